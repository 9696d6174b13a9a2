#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pecad/core/error.hpp"

namespace pecad::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape);

// Dense row-major array. Value semantics; the graph owns one per node.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) {
      throw Error(ErrorKind::kShape, "tensor data size " + std::to_string(data_.size()) +
                                         " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(Shape shape) {
    if (numel(shape) != data_.size()) {
      throw Error(ErrorKind::kShape, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
  }
  Tensor reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape(std::move(shape));
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

inline void expect_shape(const Shape& got, const Shape& want, const char* what) {
  if (got != want) {
    throw Error(ErrorKind::kShape, std::string(what) + ": expected " + shape_str(want) + ", got " +
                                       shape_str(got));
  }
}

// A trainable array plus its accumulated gradient (allocated on first use).
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// Owns parameters (trainable) and buffers (running statistics) in creation
// order. Addresses are stable for the store's lifetime.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter<T>& add(std::string name, Shape shape) {
    auto p = std::make_unique<Parameter<T>>();
    p->name = std::move(name);
    p->value = Tensor<T>(std::move(shape));
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Tensor<T>& add_buffer(std::string name, Shape shape, T fill = T{0}) {
    buffer_names_.push_back(std::move(name));
    buffers_.push_back(std::make_unique<Tensor<T>>(std::move(shape), fill));
    return *buffers_.back();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }
  std::size_t buffer_count() const {
    std::size_t n = 0;
    for (const auto& b : buffers_) n += b->size();
    return n;
  }

  std::vector<Parameter<T>*> params() const {
    std::vector<Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<Tensor<T>*> buffers() const {
    std::vector<Tensor<T>*> out;
    for (const auto& b : buffers_) out.push_back(b.get());
    return out;
  }
  const std::vector<std::string>& buffer_names() const { return buffer_names_; }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T{0});  // no-op while unallocated
  }

  // Parameters then buffers, flattened in creation order.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(count() + buffer_count());
    for (const auto& p : params_)
      for (T v : p->value.values()) out.push_back(static_cast<double>(v));
    for (const auto& b : buffers_)
      for (T v : b->values()) out.push_back(static_cast<double>(v));
    return out;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != count() + buffer_count()) {
      throw Error(ErrorKind::kIncompatibleCheckpoint,
                  "checkpoint holds " + std::to_string(flat.size()) + " values, model expects " +
                      std::to_string(count() + buffer_count()));
    }
    std::size_t k = 0;
    for (auto& p : params_)
      for (T& v : p->value.values()) v = static_cast<T>(flat[k++]);
    for (auto& b : buffers_)
      for (T& v : b->values()) v = static_cast<T>(flat[k++]);
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::vector<std::unique_ptr<Tensor<T>>> buffers_;
  std::vector<std::string> buffer_names_;
};

}  // namespace pecad::nn
