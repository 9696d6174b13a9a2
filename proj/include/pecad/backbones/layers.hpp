#pragma once

#include <cmath>
#include <random>
#include <string>

#include "pecad/nn/ops.hpp"
#include "pecad/nn/optim.hpp"

namespace pecad::backbones {

using nn::Graph;
using nn::Parameter;
using nn::ParameterStore;
using nn::Tensor;
using nn::Var;

// Creates parameters in a fixed order and initializes them from one stream,
// so (config, seed) fully determines the initial weights.
template <typename T>
struct Builder {
  ParameterStore<T>& store;
  std::mt19937_64& rng;

  Parameter<T>& kaiming(const std::string& name, nn::Shape shape, int fan_in) {
    auto& p = store.add(name, std::move(shape));
    nn::init::kaiming(p.value, fan_in, rng);
    return p;
  }
  Parameter<T>& normal(const std::string& name, nn::Shape shape, double stddev) {
    auto& p = store.add(name, std::move(shape));
    nn::init::normal(p.value, stddev, rng);
    return p;
  }
  Parameter<T>& uniform(const std::string& name, nn::Shape shape, double bound) {
    auto& p = store.add(name, std::move(shape));
    nn::init::uniform(p.value, bound, rng);
    return p;
  }
  Parameter<T>& constant(const std::string& name, nn::Shape shape, T value) {
    auto& p = store.add(name, std::move(shape));
    p.value.fill(value);
    return p;
  }
};

template <typename T>
struct Conv {
  Parameter<T>* w = nullptr;
  int stride = 1, pad = 0;

  Conv() = default;
  Conv(Builder<T>& b, const std::string& name, int in, int out, int k, int stride_, int pad_)
      : w(&b.kaiming(name + ".weight", {out, in, k, k}, in * k * k)), stride(stride_), pad(pad_) {}

  Var operator()(Graph<T>& g, Var x) const { return nn::ops::conv2d(g, x, g.parameter(*w), stride, pad); }
};

template <typename T>
struct BatchNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  nn::ops::BatchNormBuffers<T> buf;

  BatchNorm() = default;
  BatchNorm(Builder<T>& b, const std::string& name, int c)
      : gamma(&b.constant(name + ".weight", {c}, T{1})), beta(&b.constant(name + ".bias", {c}, T{0})) {
    buf.running_mean = &b.store.add_buffer(name + ".running_mean", {c}, T{0});
    buf.running_var = &b.store.add_buffer(name + ".running_var", {c}, T{1});
  }

  Var operator()(Graph<T>& g, Var x) const {
    return nn::ops::batch_norm(g, x, g.parameter(*gamma), g.parameter(*beta), buf);
  }
};

// Depthwise 3x3 followed by pointwise 1x1, no biases.
template <typename T>
struct SeparableConv {
  Parameter<T>* depthwise = nullptr;
  Parameter<T>* pointwise = nullptr;
  int stride = 1;

  SeparableConv() = default;
  SeparableConv(Builder<T>& b, const std::string& name, int in, int out, int stride_ = 1)
      : depthwise(&b.kaiming(name + ".conv1.weight", {in, 1, 3, 3}, 9)),
        pointwise(&b.kaiming(name + ".pointwise.weight", {out, in, 1, 1}, in)),
        stride(stride_) {}

  Var operator()(Graph<T>& g, Var x) const {
    Var y = nn::ops::depthwise_conv2d(g, x, g.parameter(*depthwise), stride, 1);
    return nn::ops::conv2d(g, y, g.parameter(*pointwise), 1, 0);
  }
};

template <typename T>
struct Linear {
  Parameter<T>* w = nullptr;
  Parameter<T>* b = nullptr;

  Linear() = default;
  Linear(Builder<T>& bld, const std::string& name, int in, int out, bool bias = true)
      : w(&bld.kaiming(name + ".weight", {out, in}, in)),
        b(bias ? &bld.constant(name + ".bias", {out}, T{0}) : nullptr) {}

  Var operator()(Graph<T>& g, Var x) const {
    return nn::ops::linear(g, x, g.parameter(*w), b ? g.parameter(*b) : Var{});
  }
};

// Squeeze-and-excitation: GAP -> FC(C, C/r) -> ReLU -> FC(C/r, C) -> sigmoid
// -> per-channel scale.
inline int se_reduced(int channels, int ratio) { return std::max(1, channels / ratio); }

// Closed-form SE parameter count: two weight matrices plus both biases.
inline long long se_param_count(int channels, int ratio) {
  const long long h = se_reduced(channels, ratio);
  return 2LL * channels * h + h + channels;
}

template <typename T>
struct SEParams {
  Parameter<T>* w1 = nullptr;  // [h, C]
  Parameter<T>* b1 = nullptr;  // [h]
  Parameter<T>* w2 = nullptr;  // [C, h]
  Parameter<T>* b2 = nullptr;  // [C]

  int channels() const { return w1->value.dim(1); }
};

template <typename T>
SEParams<T> make_se(Builder<T>& b, const std::string& name, int channels, int ratio) {
  if (channels < 1 || ratio < 1) throw Error(ErrorKind::kConfig, "SE needs channels >= 1 and ratio >= 1");
  const int h = se_reduced(channels, ratio);
  SEParams<T> p;
  p.w1 = &b.kaiming(name + ".fc1.weight", {h, channels}, channels);
  p.b1 = &b.constant(name + ".fc1.bias", {h}, T{0});
  p.w2 = &b.kaiming(name + ".fc2.weight", {channels, h}, h);
  p.b2 = &b.constant(name + ".fc2.bias", {channels}, T{0});
  return p;
}

template <typename T>
Var se_forward(Graph<T>& g, Var x, const SEParams<T>& p) {
  const auto& xv = g.value(x);
  if (xv.rank() != 4 || xv.dim(1) != p.channels()) {
    throw Error(ErrorKind::kShape, "se_forward: input " + nn::shape_str(xv.shape()) + " for " +
                                       std::to_string(p.channels()) + "-channel SE block");
  }
  Var s = nn::ops::global_avg_pool(g, x);
  s = nn::ops::relu(g, nn::ops::linear(g, s, g.parameter(*p.w1), g.parameter(*p.b1)));
  s = nn::ops::sigmoid(g, nn::ops::linear(g, s, g.parameter(*p.w2), g.parameter(*p.b2)));
  return nn::ops::channel_scale(g, x, s);
}

}  // namespace pecad::backbones
