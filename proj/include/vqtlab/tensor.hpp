// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vqtlab/errors.hpp"

namespace vqt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array. Matrices follow the column-per-token convention:
/// a [D, n] tensor holds one D-dimensional token per column, and a rank-3
/// tensor [B, D, n] is a batch of such matrices.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(numel(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != numel(shape_)) {
      throw DimensionError("tensor buffer of length " + std::to_string(data_.size()) +
                           " does not match shape " + to_string(shape_));
    }
  }

  /// 2-D literal, row by row.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }
  std::size_t bytes() const { return data_.size() * sizeof(T); }

  /// Extent along `axis`; negative axes count from the back.
  std::size_t extent(int axis) const {
    const int r = static_cast<int>(shape_.size());
    const int a = axis < 0 ? r + axis : axis;
    if (a < 0 || a >= r) throw DimensionError("axis out of range for shape " + to_string(shape_));
    return shape_[static_cast<std::size_t>(a)];
  }

  /// Number of stacked matrices: product of all but the last two extents.
  std::size_t batch() const {
    std::size_t b = 1;
    for (std::size_t i = 0; i + 2 < shape_.size(); ++i) b *= shape_[i];
    return b;
  }
  std::size_t rows() const { return shape_.size() >= 2 ? shape_[shape_.size() - 2] : 1; }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
  T& at(std::size_t b, std::size_t i, std::size_t j) { return data_[(b * rows() + i) * cols() + j]; }
  const T& at(std::size_t b, std::size_t i, std::size_t j) const {
    return data_[(b * rows() + i) * cols() + j];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_) {
      throw DimensionError(std::string(what) + ": shape " + to_string(shape_) + " vs " + to_string(o.shape_));
    }
  }

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Exact equality of shape and every bit of the buffer.
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0);
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Matrix `index` of a stacked tensor as a standalone [rows, cols] tensor.
template <typename T>
Tensor<T> matrix_at(const Tensor<T>& t, std::size_t index) {
  const std::size_t r = t.rows(), c = t.cols();
  std::vector<T> out(t.data() + index * r * c, t.data() + (index + 1) * r * c);
  return Tensor<T>({r, c}, std::move(out));
}

/// Stack equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ContractError("stack of zero tensors");
  Shape shape = parts.front().shape();
  std::vector<T> data;
  data.reserve(parts.size() * parts.front().size());
  for (const auto& p : parts) {
    p.require_same_shape(parts.front(), "stack");
    data.insert(data.end(), p.values().begin(), p.values().end());
  }
  shape.insert(shape.begin(), parts.size());
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  return stack(std::span<const Tensor<T>>(parts));
}

/// Rows `indices` of the leading axis, in order.
template <typename T>
Tensor<T> gather_leading(const Tensor<T>& t, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("gather of zero rows");
  const std::size_t stride = t.size() / t.shape().front();
  Shape shape = t.shape();
  shape.front() = indices.size();
  std::vector<T> data(indices.size() * stride);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= t.shape().front()) throw DimensionError("gather index out of range");
    std::copy_n(t.data() + indices[i] * stride, stride, data.data() + i * stride);
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace vqt
