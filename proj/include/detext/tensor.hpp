#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "detext/common.hpp"

namespace detext {

// Dense row-major tensor. Network activations use NCHW order.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
  Tensor(std::initializer_list<int> s) : Tensor(std::vector<int>(s)) {}

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return full({1}, v); }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool defined() const { return !shape.empty(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // NCHW accessors
  T& at(int n, int c, int h, int w) {
    return data[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  Tensor reshaped(std::vector<int> s) const {
    DETEXT_CHECK(count(s) == numel(), "reshape: element count mismatch");
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }

  T sum() const { return std::accumulate(data.begin(), data.end(), T(0)); }

  T abs_max() const {
    T m = 0;
    for (T v : data) m = std::max(m, std::abs(v));
    return m;
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t.shape = shape;
    t.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<U>(data[i]);
    return t;
  }
};

// Bilinear resize with half-pixel centers, used to bring ground truth down
// to the auxiliary decoder scales. Operates on plain values, no gradient.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int oh, int ow) {
  DETEXT_CHECK(x.ndim() == 4, "resize_bilinear expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({n, c, oh, ow});
  const double sh = static_cast<double>(h) / oh;
  const double sw = static_cast<double>(w) / ow;
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < oh; ++i) {
        double fy = (i + 0.5) * sh - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double ty = fy - y0;
        int y1 = std::min(y0 + 1, h - 1);
        y0 = std::max(y0, 0);
        for (int j = 0; j < ow; ++j) {
          double fx = (j + 0.5) * sw - 0.5;
          int x0 = static_cast<int>(std::floor(fx));
          double tx = fx - x0;
          int x1 = std::min(x0 + 1, w - 1);
          x0 = std::max(x0, 0);
          double v00 = x.at(ni, ci, y0, x0), v01 = x.at(ni, ci, y0, x1);
          double v10 = x.at(ni, ci, y1, x0), v11 = x.at(ni, ci, y1, x1);
          double top = v00 + (v01 - v00) * tx;
          double bot = v10 + (v11 - v10) * tx;
          y.at(ni, ci, i, j) = static_cast<T>(top + (bot - top) * ty);
        }
      }
  return y;
}

// Block max-pool by an integer factor; masks are downscaled this way so that
// thin positive regions survive.
template <class T>
Tensor<T> maxpool_by_factor(const Tensor<T>& x, int factor) {
  DETEXT_CHECK(x.ndim() == 4, "maxpool_by_factor expects NCHW");
  DETEXT_CHECK(factor >= 1, "maxpool factor must be >= 1");
  if (factor == 1) return x;
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  DETEXT_CHECK(h % factor == 0 && w % factor == 0, "maxpool_by_factor: size not divisible");
  const int oh = h / factor, ow = w / factor;
  Tensor<T> y({n, c, oh, ow});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          T m = x.at(ni, ci, i * factor, j * factor);
          for (int di = 0; di < factor; ++di)
            for (int dj = 0; dj < factor; ++dj)
              m = std::max(m, x.at(ni, ci, i * factor + di, j * factor + dj));
          y.at(ni, ci, i, j) = m;
        }
  return y;
}

}  // namespace detext
