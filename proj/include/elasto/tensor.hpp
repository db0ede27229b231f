// Dense row-major tensor of small rank. The whole library is templated on the
// scalar type: float for training speed, double for oracle and gradient tests.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "elasto/common.hpp"

namespace elasto {

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

  Tensor(std::initializer_list<std::int64_t> shape, T fill = T(0))
      : Tensor(std::vector<std::int64_t>(shape), fill) {}

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // rank-specific index helpers
  T& at(std::int64_t r, std::int64_t c) {
    assert(rank() == 2);
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }
  const T& at(std::int64_t r, std::int64_t c) const {
    assert(rank() == 2);
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }
  T& at(std::int64_t c, std::int64_t r, std::int64_t s) {
    assert(rank() == 3);
    return data_[static_cast<std::size_t>((c * shape_[1] + r) * shape_[2] + s)];
  }
  const T& at(std::int64_t c, std::int64_t r, std::int64_t s) const {
    assert(rank() == 3);
    return data_[static_cast<std::size_t>((c * shape_[1] + r) * shape_[2] + s)];
  }
  T& at(std::int64_t o, std::int64_t i, std::int64_t r, std::int64_t s) {
    assert(rank() == 4);
    return data_[static_cast<std::size_t>(((o * shape_[1] + i) * shape_[2] + r) * shape_[3] + s)];
  }
  const T& at(std::int64_t o, std::int64_t i, std::int64_t r, std::int64_t s) const {
    assert(rank() == 4);
    return data_[static_cast<std::size_t>(((o * shape_[1] + i) * shape_[2] + r) * shape_[3] + s)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  Tensor reshaped(std::vector<std::int64_t> new_shape) const {
    Tensor out;
    out.shape_ = std::move(new_shape);
    if (checked_size(out.shape_) != size()) throw_config("shape error: reshape size mismatch");
    out.data_ = data_;
    return out;
  }

  Tensor& operator+=(const Tensor& other) {
    assert(same_shape(other));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
  }

 private:
  static std::int64_t checked_size(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
      if (d < 0) throw_config("shape error: negative dimension");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  std::vector<std::int64_t> shape_;
  std::vector<T> data_;
};

template <typename T>
std::string shape_string(const Tensor<T>& t) {
  std::string s = "[";
  for (int i = 0; i < t.rank(); ++i) s += (i ? "," : "") + std::to_string(t.dim(i));
  return s + "]";
}

template <typename T>
T tensor_mean(const Tensor<T>& t) {
  if (t.size() == 0) return T(0);
  T acc = T(0);
  for (std::int64_t i = 0; i < t.size(); ++i) acc += t[i];
  return acc / static_cast<T>(t.size());
}

template <typename T>
T tensor_abs_mean(const Tensor<T>& t) {
  if (t.size() == 0) return T(0);
  T acc = T(0);
  for (std::int64_t i = 0; i < t.size(); ++i) acc += std::abs(t[i]);
  return acc / static_cast<T>(t.size());
}

template <typename T>
T tensor_max_abs(const Tensor<T>& t) {
  T m = T(0);
  for (std::int64_t i = 0; i < t.size(); ++i) m = std::max(m, static_cast<T>(std::abs(t[i])));
  return m;
}

}  // namespace elasto
