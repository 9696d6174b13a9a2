#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "pecad/core/error.hpp"
#include "pecad/nn/graph.hpp"

// Expects `stmt` to throw pecad::Error of the given kind.
#define EXPECT_ERROR_KIND(stmt, k)                                  \
  do {                                                              \
    try {                                                           \
      stmt;                                                         \
      ADD_FAILURE() << "no exception from: " #stmt;                 \
    } catch (const ::pecad::Error& e_) {                            \
      EXPECT_EQ(e_.kind(), k) << e_.what();                         \
    }                                                               \
  } while (0)

namespace pecad::testkit {

struct GradReport {
  double rel_norm = 0;   // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_entry = 0;  // max_i |a_i - n_i| / max(|a_i| + |n_i|, 1e-8)
  std::size_t entries = 0;
};

// Central differences of a scalar loss with respect to every entry of every
// listed parameter. build() must record the forward pass on the given graph
// (reading parameters through g.parameter) and return the scalar.
inline GradReport grad_check(const std::vector<nn::Parameter<double>*>& params,
                             const std::function<nn::Var(nn::Graph<double>&)>& build, double h = 1e-5) {
  for (auto* p : params) p->grad = nn::Tensor<double>();
  {
    nn::Graph<double> g(true, true);
    g.backward(build(g));
  }
  std::vector<double> analytic, numeric;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) analytic.push_back(p->grad.empty() ? 0.0 : p->grad[i]);
  }
  auto eval = [&] {
    nn::Graph<double> g(true, false);
    return g.value(build(g))[0];
  };
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double v = p->value[i];
      p->value[i] = v + h;
      const double up = eval();
      p->value[i] = v - h;
      const double down = eval();
      p->value[i] = v;
      numeric.push_back((up - down) / (2 * h));
    }
  }
  GradReport r;
  r.entries = analytic.size();
  double diff = 0, na = 0, nn_ = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = analytic[i] - numeric[i];
    diff += d * d;
    na += analytic[i] * analytic[i];
    nn_ += numeric[i] * numeric[i];
    r.max_entry = std::max(r.max_entry, std::abs(d) / std::max(std::abs(analytic[i]) + std::abs(numeric[i]), 1e-8));
  }
  r.rel_norm = std::sqrt(diff) / std::max(std::sqrt(std::max(na, nn_)), 1e-300);
  return r;
}

inline void fill_normal(nn::Tensor<double>& t, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  for (auto& v : t.values()) v = n(rng);
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("pecad_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace pecad::testkit
