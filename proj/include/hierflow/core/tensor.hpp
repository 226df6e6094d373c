// Copyright (c) 2026 The hierflow Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "hierflow/core/rng.hpp"

namespace hierflow::nn {

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Dense row-major double tensor. Most tensors in this library are 2-D
// (time x channels); 1-D tensors are treated as a single row where needed.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)),
        data_(std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                              std::multiplies<>()),
              0.0) {}

  Tensor(std::size_t rows, std::size_t cols)
      : Tensor(std::vector<std::size_t>{rows, cols}) {}

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor(rows, cols);
  }

  static Tensor full(std::size_t rows, std::size_t cols, double v) {
    Tensor t(rows, cols);
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor from_rows(std::size_t rows, std::size_t cols,
                          std::vector<double> values) {
    check(values.size() == rows * cols, "from_rows: value count mismatch");
    Tensor t(rows, cols);
    t.data_ = std::move(values);
    return t;
  }

  static Tensor randn(std::size_t rows, std::size_t cols, Rng& rng,
                      double scale = 1.0) {
    Tensor t(rows, cols);
    for (auto& x : t.data_) x = scale * rng.normal();
    return t;
  }

  static Tensor rand_uniform(std::size_t rows, std::size_t cols, Rng& rng,
                             double lo, double hi) {
    Tensor t(rows, cols);
    for (auto& x : t.data_) x = rng.uniform(lo, hi);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const {
    if (shape_.size() == 1) return shape_[0];
    return shape_.size() >= 2 ? shape_[1] : 0;
  }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols() + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  void fill(double v) {
    for (auto& x : data_) x = v;
  }

  double scalar() const {
    check(size() == 1, "scalar(): tensor is not a single value");
    return data_[0];
  }

  Tensor& operator+=(const Tensor& o) {
    check(same_shape(o), "Tensor+=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline std::string shape_str(const Tensor& t) {
  std::string s = "(";
  for (std::size_t i = 0; i < t.shape().size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(t.shape()[i]);
  }
  return s + ")";
}

}  // namespace hierflow::nn
