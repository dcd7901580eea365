#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "detext/ops.hpp"
#include "detext/rng.hpp"

namespace detext {
namespace nn {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

template <class T>
Tensor<T> kaiming_normal(Rng& rng, const std::vector<int>& shape, int64_t fan_in) {
  Tensor<T> w(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.normal(0.0, stddev));
  return w;
}

template <class T>
struct Conv2d {
  Var<T> w, b;
  int stride = 1, pad = 0;

  Conv2d() = default;
  // layers followed by a norm must pass bias=false, the norm would swallow it
  Conv2d(Rng& rng, int ci, int co, int k, int stride_, int pad_, bool bias,
         const std::string& name) {
    stride = stride_;
    pad = pad_;
    w = make_leaf(kaiming_normal<T>(rng, {co, ci, k, k}, static_cast<int64_t>(ci) * k * k), true,
                  name + ".w");
    if (bias) b = make_leaf(Tensor<T>({co}), true, name + ".b");
  }

  Var<T> forward(const Var<T>& x) const { return ops::conv2d(x, w, b, stride, pad); }

  void collect(NamedParams<T>& out) const {
    out.emplace_back(w->name, w);
    if (b) out.emplace_back(b->name, b);
  }
};

// weight layout [ci, co, k, k]
template <class T>
struct Deconv2d {
  Var<T> w, b;
  int stride = 2, pad = 1;

  Deconv2d() = default;
  Deconv2d(Rng& rng, int ci, int co, int k, int stride_, int pad_, bool bias,
           const std::string& name) {
    stride = stride_;
    pad = pad_;
    w = make_leaf(kaiming_normal<T>(rng, {ci, co, k, k}, static_cast<int64_t>(ci) * k * k), true,
                  name + ".w");
    if (bias) b = make_leaf(Tensor<T>({co}), true, name + ".b");
  }

  Var<T> forward(const Var<T>& x) const { return ops::conv_transpose2d(x, w, b, stride, pad); }

  void collect(NamedParams<T>& out) const {
    out.emplace_back(w->name, w);
    if (b) out.emplace_back(b->name, b);
  }
};

template <class T>
struct ResBlock {
  Conv2d<T> c1, c2;

  ResBlock() = default;
  ResBlock(Rng& rng, int c, const std::string& name)
      : c1(rng, c, c, 3, 1, 1, false, name + ".c1"), c2(rng, c, c, 3, 1, 1, false, name + ".c2") {}

  Var<T> forward(const Var<T>& x) const {
    auto h = ops::relu(ops::instance_norm(c1.forward(x)));
    h = ops::instance_norm(c2.forward(h));
    return ops::relu(ops::add(h, x));
  }

  void collect(NamedParams<T>& out) const {
    c1.collect(out);
    c2.collect(out);
  }
};

template <class T>
int64_t count_parameters(const NamedParams<T>& ps) {
  int64_t n = 0;
  for (const auto& [name, p] : ps) n += p->value.numel();
  return n;
}

template <class T>
struct Adam {
  std::vector<Var<T>> params;
  std::vector<Tensor<T>> m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;

  explicit Adam(const std::vector<Var<T>>& ps) : params(ps) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto& p : params) {
      m.emplace_back(p->value.shape);
      v.emplace_back(p->value.shape);
    }
  }

  explicit Adam(const NamedParams<T>& ps) {
    params.reserve(ps.size());
    for (const auto& [name, p] : ps) params.push_back(p);
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto& p : params) {
      m.emplace_back(p->value.shape);
      v.emplace_back(p->value.shape);
    }
  }

  void step(double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi];
      const Tensor<T>& g = p->grad;
      if (!g.defined() || g.numel() != p->value.numel()) continue;
      Tensor<T>& mm = m[pi];
      Tensor<T>& vv = v[pi];
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        const double gi = g[i];
        mm[i] = static_cast<T>(beta1 * mm[i] + (1.0 - beta1) * gi);
        vv[i] = static_cast<T>(beta2 * vv[i] + (1.0 - beta2) * gi * gi);
        const double mhat = mm[i] / bc1;
        const double vhat = vv[i] / bc2;
        p->value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params)
      if (p->grad.defined()) p->grad.fill(T(0));
  }
};

}  // namespace nn
}  // namespace detext
