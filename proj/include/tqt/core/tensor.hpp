// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "tqt/core/error.hpp"

namespace tqt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-d array. Real tensors carry the training path, integer
/// tensors the fixed-point runtime path.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), elems_(shape_numel(shape_), fill) {
    check_dims();
  }
  BasicTensor(Shape shape, std::vector<T> elems)
      : shape_(std::move(shape)), elems_(std::move(elems)) {
    check_dims();
    if (elems_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor: " + std::to_string(elems_.size()) +
                           " elements do not fill shape " + shape_str(shape_));
    }
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, std::vector<T>{v}); }
  static BasicTensor from(std::initializer_list<T> values) {
    return BasicTensor(Shape{values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return elems_.size(); }
  bool empty() const noexcept { return elems_.empty(); }

  std::span<T> data() noexcept { return elems_; }
  std::span<const T> data() const noexcept { return elems_; }
  std::vector<T>& vec() noexcept { return elems_; }
  const std::vector<T>& vec() const noexcept { return elems_; }

  T& operator[](std::size_t i) { return elems_[i]; }
  const T& operator[](std::size_t i) const { return elems_[i]; }

  /// Scalar value of a one-element tensor.
  T item() const {
    if (elems_.size() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    }
    return elems_[0];
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), elems_);
  }

  void fill(T v) { std::fill(elems_.begin(), elems_.end(), v); }

  bool operator==(const BasicTensor& other) const = default;

  /// True when every element is finite (always true for integer tensors).
  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(elems_.begin(), elems_.end(),
                         [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("tensor dims must be positive: " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> elems_;
};

using Tensor = BasicTensor<double>;
using IntTensor = BasicTensor<std::int32_t>;

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }
inline Tensor ones_like(const Tensor& t) { return Tensor(t.shape(), 1.0); }

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b));
  }
}

#ifndef NDEBUG
inline void debug_check_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw InternalError(std::string("non-finite values after ") + where);
}
#else
inline void debug_check_finite(const Tensor&, const char*) {}
#endif

}  // namespace tqt
