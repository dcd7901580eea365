#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <vector>

#include "detext/autodiff.hpp"

namespace detext {
namespace ops {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using MapC = Eigen::Map<const MatRM<T>>;

// x: one sample [C,H,W] -> col [C*k*k, Ho*Wo]
template <class T>
void im2col(const T* x, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* col) {
  const int64_t plane = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        T* dst = col + (static_cast<int64_t>(c) * k * k + ki * k + kj) * plane;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * s - p + ki;
          if (ih < 0 || ih >= H) {
            for (int ow = 0; ow < Wo; ++ow) *dst++ = T(0);
            continue;
          }
          const T* src = x + (static_cast<int64_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * s - p + kj;
            *dst++ = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
}

// scatter-add of col [C*k*k, Ho*Wo] back into one sample [C,H,W]
template <class T>
void col2im_add(const T* col, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* x) {
  const int64_t plane = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const T* src = col + (static_cast<int64_t>(c) * k * k + ki * k + kj) * plane;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * s - p + ki;
          if (ih < 0 || ih >= H) {
            src += Wo;
            continue;
          }
          T* dst = x + (static_cast<int64_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * s - p + kj;
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
          src += Wo;
        }
      }
}

inline int conv_out_size(int in, int k, int s, int p) {
  const int num = in + 2 * p - k;
  DETEXT_CHECK(num >= 0 && num % s == 0, "conv: input size incompatible with kernel/stride/pad");
  return num / s + 1;
}

// y[N,Cb,Hb,Wb] = conv(x[N,Ca,Ha,Wa], w[Cb,Ca,k,k])
template <class T>
Tensor<T> conv_fwd(const Tensor<T>& x, const Tensor<T>& w, int s, int p) {
  DETEXT_CHECK(x.ndim() == 4 && w.ndim() == 4, "conv: tensors must be 4-d");
  const int N = x.dim(0), Ca = x.dim(1), Ha = x.dim(2), Wa = x.dim(3);
  const int Cb = w.dim(0), k = w.dim(2);
  DETEXT_CHECK(w.dim(1) == Ca, "conv: channel mismatch");
  DETEXT_CHECK(w.dim(3) == k, "conv: kernel must be square");
  const int Hb = conv_out_size(Ha, k, s, p);
  const int Wb = conv_out_size(Wa, k, s, p);
  const int ckk = Ca * k * k;
  const int64_t plane = static_cast<int64_t>(Hb) * Wb;
  Tensor<T> y({N, Cb, Hb, Wb});
  std::vector<T> col(static_cast<size_t>(ckk) * plane);
  MapC<T> wm(w.data.data(), Cb, ckk);
  for (int n = 0; n < N; ++n) {
    im2col(x.data.data() + static_cast<int64_t>(n) * Ca * Ha * Wa, Ca, Ha, Wa, k, s, p, Hb, Wb,
           col.data());
    MapC<T> cm(col.data(), ckk, plane);
    MapM<T> ym(y.data.data() + static_cast<int64_t>(n) * Cb * plane, Cb, plane);
    ym.noalias() = wm * cm;
  }
  return y;
}

// dx[N,Ca,Ha,Wa] from dy[N,Cb,Hb,Wb] and w[Cb,Ca,k,k]
template <class T>
Tensor<T> conv_dgrad(const Tensor<T>& dy, const Tensor<T>& w, int s, int p, int Ha, int Wa) {
  const int N = dy.dim(0), Cb = dy.dim(1), Hb = dy.dim(2), Wb = dy.dim(3);
  const int Ca = w.dim(1), k = w.dim(2);
  const int ckk = Ca * k * k;
  const int64_t plane = static_cast<int64_t>(Hb) * Wb;
  Tensor<T> dx({N, Ca, Ha, Wa});
  std::vector<T> col(static_cast<size_t>(ckk) * plane);
  MapC<T> wm(w.data.data(), Cb, ckk);
  for (int n = 0; n < N; ++n) {
    MapC<T> gm(dy.data.data() + static_cast<int64_t>(n) * Cb * plane, Cb, plane);
    MapM<T> cm(col.data(), ckk, plane);
    cm.noalias() = wm.transpose() * gm;
    col2im_add(col.data(), Ca, Ha, Wa, k, s, p, Hb, Wb,
               dx.data.data() + static_cast<int64_t>(n) * Ca * Ha * Wa);
  }
  return dx;
}

// dw[Cb,Ca,k,k] from x[N,Ca,Ha,Wa] and dy[N,Cb,Hb,Wb]
template <class T>
Tensor<T> conv_wgrad(const Tensor<T>& x, const Tensor<T>& dy, int s, int p, int k) {
  const int N = x.dim(0), Ca = x.dim(1), Ha = x.dim(2), Wa = x.dim(3);
  const int Cb = dy.dim(1), Hb = dy.dim(2), Wb = dy.dim(3);
  const int ckk = Ca * k * k;
  const int64_t plane = static_cast<int64_t>(Hb) * Wb;
  Tensor<T> dw({Cb, Ca, k, k});
  std::vector<T> col(static_cast<size_t>(ckk) * plane);
  MapM<T> dwm(dw.data.data(), Cb, ckk);
  for (int n = 0; n < N; ++n) {
    im2col(x.data.data() + static_cast<int64_t>(n) * Ca * Ha * Wa, Ca, Ha, Wa, k, s, p, Hb, Wb,
           col.data());
    MapC<T> cm(col.data(), ckk, plane);
    MapC<T> gm(dy.data.data() + static_cast<int64_t>(n) * Cb * plane, Cb, plane);
    dwm.noalias() += gm * cm.transpose();
  }
  return dw;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// convolution ops

// x [N,Ci,H,W], w [Co,Ci,k,k], optional bias [Co]
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  Tensor<T> y = detail::conv_fwd(x->value, w->value, stride, pad);
  if (b) {
    const int N = y.dim(0), Co = y.dim(1);
    const int64_t plane = static_cast<int64_t>(y.dim(2)) * y.dim(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Co; ++c) {
        T* p = y.data.data() + (static_cast<int64_t>(n) * Co + c) * plane;
        const T bv = b->value[c];
        for (int64_t i = 0; i < plane; ++i) p[i] += bv;
      }
  }
  std::vector<Var<T>> ins = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  const bool has_bias = static_cast<bool>(b);
  return make_op<T>(std::move(y), std::move(ins), [stride, pad, has_bias](Node<T>& self) {
    const auto& x = self.inputs[0];
    const auto& w = self.inputs[1];
    const int k = w->value.dim(2);
    if (x->requires_grad)
      accum_grad(x, detail::conv_dgrad(self.grad, w->value, stride, pad, x->value.dim(2),
                                       x->value.dim(3)));
    if (w->requires_grad)
      accum_grad(w, detail::conv_wgrad(x->value, self.grad, stride, pad, k));
    if (has_bias && self.inputs[2]->requires_grad) {
      const auto& b = self.inputs[2];
      Tensor<T> db(b->value.shape);
      const int N = self.grad.dim(0), Co = self.grad.dim(1);
      const int64_t plane = static_cast<int64_t>(self.grad.dim(2)) * self.grad.dim(3);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < Co; ++c) {
          const T* p = self.grad.data.data() + (static_cast<int64_t>(n) * Co + c) * plane;
          T s = 0;
          for (int64_t i = 0; i < plane; ++i) s += p[i];
          db[c] += s;
        }
      accum_grad(b, db);
    }
  });
}

// Transposed convolution. x [N,Ci,H,W], w [Ci,Co,k,k], out [N,Co,(H-1)s-2p+k,...].
// Forward is the data-gradient of a stride-s conv, so the three conv kernels
// above cover both directions.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  const int Hx = x->value.dim(2), Wx = x->value.dim(3);
  const int k = w->value.dim(2);
  const int Hy = (Hx - 1) * stride - 2 * pad + k;
  const int Wy = (Wx - 1) * stride - 2 * pad + k;
  DETEXT_CHECK(w->value.dim(0) == x->value.dim(1), "conv_transpose: channel mismatch");
  Tensor<T> y = detail::conv_dgrad(x->value, w->value, stride, pad, Hy, Wy);
  if (b) {
    const int N = y.dim(0), Co = y.dim(1);
    const int64_t plane = static_cast<int64_t>(Hy) * Wy;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Co; ++c) {
        T* p = y.data.data() + (static_cast<int64_t>(n) * Co + c) * plane;
        const T bv = b->value[c];
        for (int64_t i = 0; i < plane; ++i) p[i] += bv;
      }
  }
  std::vector<Var<T>> ins = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  const bool has_bias = static_cast<bool>(b);
  return make_op<T>(std::move(y), std::move(ins), [stride, pad, has_bias](Node<T>& self) {
    const auto& x = self.inputs[0];
    const auto& w = self.inputs[1];
    const int k = w->value.dim(2);
    if (x->requires_grad)
      accum_grad(x, detail::conv_fwd(self.grad, w->value, stride, pad));
    if (w->requires_grad)
      accum_grad(w, detail::conv_wgrad(self.grad, x->value, stride, pad, k));
    if (has_bias && self.inputs[2]->requires_grad) {
      const auto& b = self.inputs[2];
      Tensor<T> db(b->value.shape);
      const int N = self.grad.dim(0), Co = self.grad.dim(1);
      const int64_t plane = static_cast<int64_t>(self.grad.dim(2)) * self.grad.dim(3);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < Co; ++c) {
          const T* p = self.grad.data.data() + (static_cast<int64_t>(n) * Co + c) * plane;
          T s = 0;
          for (int64_t i = 0; i < plane; ++i) s += p[i];
          db[c] += s;
        }
      accum_grad(b, db);
    }
  });
}

// ---------------------------------------------------------------------------
// normalization

// Per-sample per-channel normalization, no affine parameters (conv layers
// feeding a norm therefore carry no bias).
template <class T>
Var<T> instance_norm(const Var<T>& x, double eps = 1e-5) {
  const int N = x->value.dim(0), C = x->value.dim(1);
  const int64_t hw = static_cast<int64_t>(x->value.dim(2)) * x->value.dim(3);
  DETEXT_CHECK(hw > 0, "instance_norm: empty spatial dims");
  Tensor<T> y(x->value.shape);
  Tensor<T> inv_std({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data.data() + (static_cast<int64_t>(n) * C + c) * hw;
      T* q = y.data.data() + (static_cast<int64_t>(n) * C + c) * hw;
      double mu = 0;
      for (int64_t i = 0; i < hw; ++i) mu += p[i];
      mu /= hw;
      double var = 0;
      for (int64_t i = 0; i < hw; ++i) {
        const double d = p[i] - mu;
        var += d * d;
      }
      var /= hw;
      const double r = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<int64_t>(n) * C + c] = static_cast<T>(r);
      for (int64_t i = 0; i < hw; ++i) q[i] = static_cast<T>((p[i] - mu) * r);
    }
  return make_op<T>(std::move(y), {x}, [inv_std](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    const int N = self.value.dim(0), C = self.value.dim(1);
    const int64_t hw = static_cast<int64_t>(self.value.dim(2)) * self.value.dim(3);
    Tensor<T> dx(x->value.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
        const T* dy = self.grad.data.data() + off;
        const T* yv = self.value.data.data() + off;
        T* out = dx.data.data() + off;
        double m1 = 0, m2 = 0;
        for (int64_t i = 0; i < hw; ++i) {
          m1 += dy[i];
          m2 += dy[i] * yv[i];
        }
        m1 /= hw;
        m2 /= hw;
        const double r = inv_std[static_cast<int64_t>(n) * C + c];
        for (int64_t i = 0; i < hw; ++i)
          out[i] = static_cast<T>(r * (dy[i] - m1 - yv[i] * m2));
      }
    accum_grad(x, dx);
  });
}

// ---------------------------------------------------------------------------
// elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  DETEXT_CHECK(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor<T> y(a->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] + b->value[i];
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& self) {
    accum_grad(self.inputs[0], self.grad);
    accum_grad(self.inputs[1], self.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  DETEXT_CHECK(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor<T> y(a->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] - b->value[i];
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& self) {
    accum_grad(self.inputs[0], self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor<T> g(self.grad.shape);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = -self.grad[i];
      accum_grad(self.inputs[1], g);
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  DETEXT_CHECK(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor<T> y(a->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] * b->value[i];
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& self) {
    const auto& a = self.inputs[0];
    const auto& b = self.inputs[1];
    if (a->requires_grad) {
      Tensor<T> g(self.grad.shape);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * b->value[i];
      accum_grad(a, g);
    }
    if (b->requires_grad) {
      Tensor<T> g(self.grad.shape);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * a->value[i];
      accum_grad(b, g);
    }
  });
}

// x [N,C,H,W] * m [N,1,H,W], broadcast over channels
template <class T>
Var<T> mul_bc(const Var<T>& x, const Var<T>& m) {
  const int N = x->value.dim(0), C = x->value.dim(1);
  const int64_t hw = static_cast<int64_t>(x->value.dim(2)) * x->value.dim(3);
  DETEXT_CHECK(m->value.dim(0) == N && m->value.dim(1) == 1 &&
                   m->value.dim(2) == x->value.dim(2) && m->value.dim(3) == x->value.dim(3),
               "mul_bc: mask shape mismatch");
  Tensor<T> y(x->value.shape);
  for (int n = 0; n < N; ++n) {
    const T* mp = m->value.data.data() + static_cast<int64_t>(n) * hw;
    for (int c = 0; c < C; ++c) {
      const int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) y[off + i] = x->value[off + i] * mp[i];
    }
  }
  return make_op<T>(std::move(y), {x, m}, [](Node<T>& self) {
    const auto& x = self.inputs[0];
    const auto& m = self.inputs[1];
    const int N = x->value.dim(0), C = x->value.dim(1);
    const int64_t hw = static_cast<int64_t>(x->value.dim(2)) * x->value.dim(3);
    if (x->requires_grad) {
      Tensor<T> g(x->value.shape);
      for (int n = 0; n < N; ++n) {
        const T* mp = m->value.data.data() + static_cast<int64_t>(n) * hw;
        for (int c = 0; c < C; ++c) {
          const int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) g[off + i] = self.grad[off + i] * mp[i];
        }
      }
      accum_grad(x, g);
    }
    if (m->requires_grad) {
      Tensor<T> g(m->value.shape);
      for (int n = 0; n < N; ++n) {
        T* gp = g.data.data() + static_cast<int64_t>(n) * hw;
        for (int c = 0; c < C; ++c) {
          const int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) gp[i] += self.grad[off + i] * x->value[off + i];
        }
      }
      accum_grad(m, g);
    }
  });
}

// y = x * s where s is a learnable scalar (shape [1])
template <class T>
Var<T> mul_scalar_var(const Var<T>& x, const Var<T>& s) {
  DETEXT_CHECK(s->value.numel() == 1, "mul_scalar_var: s must be scalar");
  const T sv = s->value[0];
  Tensor<T> y(x->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = x->value[i] * sv;
  return make_op<T>(std::move(y), {x, s}, [](Node<T>& self) {
    const auto& x = self.inputs[0];
    const auto& s = self.inputs[1];
    const T sv = s->value[0];
    if (x->requires_grad) {
      Tensor<T> g(self.grad.shape);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * sv;
      accum_grad(x, g);
    }
    if (s->requires_grad) {
      double acc = 0;
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        acc += static_cast<double>(self.grad[i]) * x->value[i];
      Tensor<T> g({1});
      g[0] = static_cast<T>(acc);
      accum_grad(s, g);
    }
  });
}

// y = a*x + b (elementwise, a and b plain scalars)
template <class T>
Var<T> affine(const Var<T>& x, double a, double b) {
  Tensor<T> y(x->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i)
    y[i] = static_cast<T>(a * x->value[i] + b);
  return make_op<T>(std::move(y), {x}, [a](Node<T>& self) {
    if (!self.inputs[0]->requires_grad) return;
    Tensor<T> g(self.grad.shape);
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = static_cast<T>(a * self.grad[i]);
    accum_grad(self.inputs[0], g);
  });
}

template <class T>
Var<T> scale(const Var<T>& x, double a) {
  return affine(x, a, 0.0);
}

template <class T>
Var<T> abs(const Var<T>& x) {
  Tensor<T> y(x->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::abs(x->value[i]);
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    Tensor<T> g(self.grad.shape);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T v = x->value[i];
      g[i] = v > 0 ? self.grad[i] : (v < 0 ? -self.grad[i] : T(0));
    }
    accum_grad(x, g);
  });
}

template <class T>
Var<T> log(const Var<T>& x) {
  Tensor<T> y(x->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::log(x->value[i]);
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    Tensor<T> g(self.grad.shape);
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] / x->value[i];
    accum_grad(x, g);
  });
}

template <class T>
Var<T> clamp(const Var<T>& x, double lo, double hi) {
  Tensor<T> y(x->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i)
    y[i] = static_cast<T>(std::min(hi, std::max(lo, static_cast<double>(x->value[i]))));
  return make_op<T>(std::move(y), {x}, [lo, hi](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    Tensor<T> g(self.grad.shape);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double v = x->value[i];
      g[i] = (v > lo && v < hi) ? self.grad[i] : T(0);
    }
    accum_grad(x, g);
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y(x->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i) {
    const double v = x->value[i];
    y[i] = static_cast<T>(v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                 : std::exp(v) / (1.0 + std::exp(v)));
  }
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    if (!self.inputs[0]->requires_grad) return;
    Tensor<T> g(self.grad.shape);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T s = self.value[i];
      g[i] = self.grad[i] * s * (T(1) - s);
    }
    accum_grad(self.inputs[0], g);
  });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> y(x->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::tanh(x->value[i]);
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    if (!self.inputs[0]->requires_grad) return;
    Tensor<T> g(self.grad.shape);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T t = self.value[i];
      g[i] = self.grad[i] * (T(1) - t * t);
    }
    accum_grad(self.inputs[0], g);
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y(x->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = x->value[i] > 0 ? x->value[i] : T(0);
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    Tensor<T> g(self.grad.shape);
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = x->value[i] > 0 ? self.grad[i] : T(0);
    accum_grad(x, g);
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, double slope = 0.2) {
  Tensor<T> y(x->value.shape);
  for (int64_t i = 0; i < y.numel(); ++i)
    y[i] = x->value[i] > 0 ? x->value[i] : static_cast<T>(slope * x->value[i]);
  return make_op<T>(std::move(y), {x}, [slope](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    Tensor<T> g(self.grad.shape);
    for (int64_t i = 0; i < g.numel(); ++i)
      g[i] = x->value[i] > 0 ? self.grad[i] : static_cast<T>(slope * self.grad[i]);
    accum_grad(x, g);
  });
}

// ---------------------------------------------------------------------------
// pooling / channel reductions / concat

template <class T>
Var<T> maxpool2x2(const Var<T>& x) {
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  DETEXT_CHECK(H % 2 == 0 && W % 2 == 0, "maxpool2x2: odd spatial size");
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> y({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(y.numel()));
  int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j, ++o) {
          T best = x->value.at(n, c, 2 * i, 2 * j);
          uint8_t bi = 0;
          for (uint8_t k = 1; k < 4; ++k) {
            const T v = x->value.at(n, c, 2 * i + (k >> 1), 2 * j + (k & 1));
            if (v > best) {
              best = v;
              bi = k;
            }
          }
          y[o] = best;
          (*argmax)[static_cast<size_t>(o)] = bi;
        }
  return make_op<T>(std::move(y), {x}, [argmax](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    const int N = self.value.dim(0), C = self.value.dim(1);
    const int Ho = self.value.dim(2), Wo = self.value.dim(3);
    Tensor<T> g(x->value.shape);
    int64_t o = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j, ++o) {
            const uint8_t k = (*argmax)[static_cast<size_t>(o)];
            g.at(n, c, 2 * i + (k >> 1), 2 * j + (k & 1)) += self.grad[o];
          }
    accum_grad(x, g);
  });
}

// max over channels, keepdim: [N,C,H,W] -> [N,1,H,W]
template <class T>
Var<T> channel_max(const Var<T>& x) {
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tensor<T> y({N, 1, H, W});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(N) * hw);
  for (int n = 0; n < N; ++n)
    for (int64_t i = 0; i < hw; ++i) {
      T best = x->value[(static_cast<int64_t>(n) * C) * hw + i];
      int bc = 0;
      for (int c = 1; c < C; ++c) {
        const T v = x->value[(static_cast<int64_t>(n) * C + c) * hw + i];
        if (v > best) {
          best = v;
          bc = c;
        }
      }
      y[static_cast<int64_t>(n) * hw + i] = best;
      (*argmax)[static_cast<size_t>(static_cast<int64_t>(n) * hw + i)] = bc;
    }
  return make_op<T>(std::move(y), {x}, [argmax](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    const int N = x->value.dim(0), C = x->value.dim(1);
    const int64_t hw = static_cast<int64_t>(x->value.dim(2)) * x->value.dim(3);
    Tensor<T> g(x->value.shape);
    for (int n = 0; n < N; ++n)
      for (int64_t i = 0; i < hw; ++i) {
        const int bc = (*argmax)[static_cast<size_t>(static_cast<int64_t>(n) * hw + i)];
        g[(static_cast<int64_t>(n) * C + bc) * hw + i] += self.grad[static_cast<int64_t>(n) * hw + i];
      }
    accum_grad(x, g);
  });
}

template <class T>
Var<T> channel_mean(const Var<T>& x) {
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tensor<T> y({N, 1, H, W});
  for (int n = 0; n < N; ++n)
    for (int64_t i = 0; i < hw; ++i) {
      double s = 0;
      for (int c = 0; c < C; ++c) s += x->value[(static_cast<int64_t>(n) * C + c) * hw + i];
      y[static_cast<int64_t>(n) * hw + i] = static_cast<T>(s / C);
    }
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    const int N = x->value.dim(0), C = x->value.dim(1);
    const int64_t hw = static_cast<int64_t>(x->value.dim(2)) * x->value.dim(3);
    Tensor<T> g(x->value.shape);
    for (int n = 0; n < N; ++n)
      for (int64_t i = 0; i < hw; ++i) {
        const T v = self.grad[static_cast<int64_t>(n) * hw + i] / static_cast<T>(C);
        for (int c = 0; c < C; ++c) g[(static_cast<int64_t>(n) * C + c) * hw + i] = v;
      }
    accum_grad(x, g);
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  DETEXT_CHECK(!xs.empty(), "concat: no inputs");
  const int N = xs[0]->value.dim(0), H = xs[0]->value.dim(2), W = xs[0]->value.dim(3);
  const int64_t hw = static_cast<int64_t>(H) * W;
  int Ctot = 0;
  for (const auto& x : xs) {
    DETEXT_CHECK(x->value.dim(0) == N && x->value.dim(2) == H && x->value.dim(3) == W,
                 "concat: spatial/batch mismatch");
    Ctot += x->value.dim(1);
  }
  Tensor<T> y({N, Ctot, H, W});
  for (int n = 0; n < N; ++n) {
    int co = 0;
    for (const auto& x : xs) {
      const int C = x->value.dim(1);
      std::copy_n(x->value.data.data() + static_cast<int64_t>(n) * C * hw,
                  static_cast<size_t>(C * hw),
                  y.data.data() + (static_cast<int64_t>(n) * Ctot + co) * hw);
      co += C;
    }
  }
  return make_op<T>(std::move(y), xs, [](Node<T>& self) {
    const int N = self.value.dim(0), Ctot = self.value.dim(1);
    const int64_t hw = static_cast<int64_t>(self.value.dim(2)) * self.value.dim(3);
    int co = 0;
    for (const auto& x : self.inputs) {
      const int C = x->value.dim(1);
      if (x->requires_grad) {
        Tensor<T> g(x->value.shape);
        for (int n = 0; n < N; ++n)
          std::copy_n(self.grad.data.data() + (static_cast<int64_t>(n) * Ctot + co) * hw,
                      static_cast<size_t>(C * hw), g.data.data() + static_cast<int64_t>(n) * C * hw);
        accum_grad(x, g);
      }
      co += C;
    }
  });
}

// ---------------------------------------------------------------------------
// reductions and structured losses

template <class T>
Var<T> sum_all(const Var<T>& x) {
  Tensor<T> y({1});
  double s = 0;
  for (int64_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
  y[0] = static_cast<T>(s);
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    Tensor<T> g = Tensor<T>::full(x->value.shape, self.grad[0]);
    accum_grad(x, g);
  });
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x->value.numel()));
}

// Gram matrices per sample: x [N,C,H,W] -> [N,C,C] with G = A A^T, A = [C, HW]
template <class T>
Var<T> gram(const Var<T>& x) {
  const int N = x->value.dim(0), C = x->value.dim(1);
  const int64_t hw = static_cast<int64_t>(x->value.dim(2)) * x->value.dim(3);
  Tensor<T> y({N, C, C});
  for (int n = 0; n < N; ++n) {
    detail::MapC<T> a(x->value.data.data() + static_cast<int64_t>(n) * C * hw, C, hw);
    detail::MapM<T> g(y.data.data() + static_cast<int64_t>(n) * C * C, C, C);
    g.noalias() = a * a.transpose();
  }
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    const int N = x->value.dim(0), C = x->value.dim(1);
    const int64_t hw = static_cast<int64_t>(x->value.dim(2)) * x->value.dim(3);
    Tensor<T> dx(x->value.shape);
    for (int n = 0; n < N; ++n) {
      detail::MapC<T> a(x->value.data.data() + static_cast<int64_t>(n) * C * hw, C, hw);
      detail::MapC<T> dg(self.grad.data.data() + static_cast<int64_t>(n) * C * C, C, C);
      detail::MapM<T> da(dx.data.data() + static_cast<int64_t>(n) * C * hw, C, hw);
      da.noalias() = (dg + dg.transpose()) * a;
    }
    accum_grad(x, dx);
  });
}

// Mean absolute horizontal difference plus mean absolute vertical difference.
template <class T>
Var<T> total_variation(const Var<T>& x) {
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int64_t nh = static_cast<int64_t>(N) * C * H * (W - 1);
  const int64_t nv = static_cast<int64_t>(N) * C * (H - 1) * W;
  double sh = 0, sv = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      for (int i = 0; i < H; ++i)
        for (int j = 0; j + 1 < W; ++j)
          sh += std::abs(static_cast<double>(x->value.at(n, c, i, j + 1)) - x->value.at(n, c, i, j));
      for (int i = 0; i + 1 < H; ++i)
        for (int j = 0; j < W; ++j)
          sv += std::abs(static_cast<double>(x->value.at(n, c, i + 1, j)) - x->value.at(n, c, i, j));
    }
  Tensor<T> y({1});
  y[0] = static_cast<T>((nh > 0 ? sh / nh : 0.0) + (nv > 0 ? sv / nv : 0.0));
  return make_op<T>(std::move(y), {x}, [nh, nv](Node<T>& self) {
    const auto& x = self.inputs[0];
    if (!x->requires_grad) return;
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const T g0 = self.grad[0];
    const T wh = nh > 0 ? g0 / static_cast<T>(nh) : T(0);
    const T wv = nv > 0 ? g0 / static_cast<T>(nv) : T(0);
    Tensor<T> g(x->value.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        for (int i = 0; i < H; ++i)
          for (int j = 0; j + 1 < W; ++j) {
            const T d = x->value.at(n, c, i, j + 1) - x->value.at(n, c, i, j);
            const T s = d > 0 ? wh : (d < 0 ? -wh : T(0));
            g.at(n, c, i, j + 1) += s;
            g.at(n, c, i, j) -= s;
          }
        for (int i = 0; i + 1 < H; ++i)
          for (int j = 0; j < W; ++j) {
            const T d = x->value.at(n, c, i + 1, j) - x->value.at(n, c, i, j);
            const T s = d > 0 ? wv : (d < 0 ? -wv : T(0));
            g.at(n, c, i + 1, j) += s;
            g.at(n, c, i, j) -= s;
          }
      }
    accum_grad(x, g);
  });
}

}  // namespace ops
}  // namespace detext
