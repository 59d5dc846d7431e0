// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cgl/core/rng.hpp"

namespace cgl {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

// Dense row-major tensor with shared storage. Copies are shallow; use
// clone() for a deep copy.
template <class S>
struct Tensor {
  std::shared_ptr<std::vector<S>> buf;
  Shape shape;

  Tensor() = default;
  explicit Tensor(Shape sh)
      : buf(std::make_shared<std::vector<S>>(numel(sh), S(0))), shape(std::move(sh)) {}
  Tensor(Shape sh, S fill_value)
      : buf(std::make_shared<std::vector<S>>(numel(sh), fill_value)), shape(std::move(sh)) {}

  static Tensor scalar(S v) {
    Tensor t(Shape{1});
    (*t.buf)[0] = v;
    return t;
  }
  static Tensor from(Shape sh, std::vector<S> values) {
    if (static_cast<int64_t>(values.size()) != numel(sh))
      throw std::runtime_error("tensor: data size does not match shape " + shape_str(sh));
    Tensor t;
    t.buf = std::make_shared<std::vector<S>>(std::move(values));
    t.shape = std::move(sh);
    return t;
  }

  bool defined() const { return static_cast<bool>(buf); }
  int64_t size() const { return defined() ? static_cast<int64_t>(buf->size()) : 0; }
  int dim(int i) const { return shape[i]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  S* data() { return buf->data(); }
  const S* data() const { return buf->data(); }
  S& operator[](int64_t i) { return (*buf)[i]; }
  const S& operator[](int64_t i) const { return (*buf)[i]; }

  // rows = product of all but last dim, cols = last dim
  int64_t rows() const { return size() / cols(); }
  int64_t cols() const { return shape.empty() ? 1 : shape.back(); }

  Tensor clone() const {
    Tensor t;
    t.buf = std::make_shared<std::vector<S>>(*buf);
    t.shape = shape;
    return t;
  }

  Tensor reshaped(Shape sh) const {
    if (numel(sh) != size())
      throw std::runtime_error("reshape: numel mismatch " + shape_str(shape) + " -> " + shape_str(sh));
    Tensor t = *this;
    t.shape = std::move(sh);
    return t;
  }

  void fill(S v) { std::fill(buf->begin(), buf->end(), v); }
  void zero() { fill(S(0)); }

  bool all_finite() const {
    for (S v : *buf)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<Mat> mat(int64_t r, int64_t c) { return Eigen::Map<Mat>(data(), r, c); }
  Eigen::Map<const Mat> mat(int64_t r, int64_t c) const {
    return Eigen::Map<const Mat>(data(), r, c);
  }
  Eigen::Map<Mat> mat2d() { return mat(rows(), cols()); }
  Eigen::Map<const Mat> mat2d() const { return mat(rows(), cols()); }
};

template <class S>
Tensor<S> randn(Shape sh, Rng& rng, double stddev = 1.0) {
  Tensor<S> t(std::move(sh));
  for (auto& v : *t.buf) v = static_cast<S>(rng.normal() * stddev);
  return t;
}

template <class S>
Tensor<S> randu(Shape sh, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<S> t(std::move(sh));
  for (auto& v : *t.buf) v = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  assert(a.size() == b.size());
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace cgl
