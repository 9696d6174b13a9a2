#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "pecad/nn/tensor.hpp"

namespace pecad::nn {

// Adam with bias correction; no weight decay.
template <typename T>
class Adam {
 public:
  Adam(const ParameterStore<T>& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(store.params()), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), T{0});
      v_.emplace_back(p->value.size(), T{0});
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->grad.fill(T{0});
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    const T step = static_cast<T>(lr_ * std::sqrt(c2) / c1);
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T eps = static_cast<T>(eps_ * std::sqrt(c2));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter<T>& p = *params_[k];
      if (p.grad.empty()) continue;
      std::vector<T>& m = m_[k];
      std::vector<T>& v = v_[k];
      for (std::size_t i = 0; i < m.size(); ++i) {
        const T gi = p.grad[i];
        m[i] = b1 * m[i] + (T{1} - b1) * gi;
        v[i] = b2 * v[i] + (T{1} - b2) * gi * gi;
        p.value[i] -= step * m[i] / (std::sqrt(v[i]) + eps);
      }
    }
  }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
};

namespace init {

template <typename T>
void normal(Tensor<T>& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  for (T& v : t.values()) v = static_cast<T>(d(rng));
}

template <typename T>
void uniform(Tensor<T>& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-bound, bound);
  for (T& v : t.values()) v = static_cast<T>(d(rng));
}

// He-normal for ReLU nets.
template <typename T>
void kaiming(Tensor<T>& t, int fan_in, std::mt19937_64& rng) {
  normal(t, std::sqrt(2.0 / fan_in), rng);
}

}  // namespace init
}  // namespace pecad::nn
