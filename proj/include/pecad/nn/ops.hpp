#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "pecad/nn/graph.hpp"

// Differentiable operators. Layouts: images NCHW, sequences [B, T, F], rows
// of a bag [N, F]. Every op records its own backward closure on the Graph.
namespace pecad::nn::ops {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

namespace detail {

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// cols[(c*k + ky)*k + kx, oy*Wo + ox] = x[c, oy*s - p + ky, ox*s - p + kx]
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* cols) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill(row + oy * Wo, row + (oy + 1) * Wo, T{0});
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* x) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

template <typename T>
T sigmoid(T x) {
  if (x >= 0) {
    const T e = std::exp(-x);
    return T{1} / (T{1} + e);
  }
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// Numerically stable log(1 + exp(x)).
template <typename T>
T softplus(T x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T, typename F, typename D>
Var unary(Graph<T>& g, Var x, F f, D dfdx) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return g.record(std::move(y), {x}, [x, dfdx](Graph<T>& g, const Tensor<T>& dy) {
    const Tensor<T>& xv = g.value(x);
    Tensor<T>& dx = g.grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * dfdx(xv[i]);
  });
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
  return unary(
      g, x, [](T v) { return v > 0 ? v : T{0}; }, [](T v) { return v > 0 ? T{1} : T{0}; });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  return unary(
      g, x, [](T v) { return detail::sigmoid(v); },
      [](T v) {
        const T s = detail::sigmoid(v);
        return s * (T{1} - s);
      });
}

template <typename T>
Var tanh(Graph<T>& g, Var x) {
  return unary(
      g, x, [](T v) { return std::tanh(v); },
      [](T v) {
        const T t = std::tanh(v);
        return T{1} - t * t;
      });
}

// Exact (erf) GELU.
template <typename T>
Var gelu(Graph<T>& g, Var x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return unary(
      g, x, [=](T v) { return T(0.5) * v * (T{1} + std::erf(v * kInvSqrt2)); },
      [=](T v) {
        return T(0.5) * (T{1} + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  expect_shape(bv.shape(), av.shape(), "add");
  Tensor<T> y = av;
  detail::add_into(y, bv);
  return g.record(std::move(y), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& dy) {
    if (g.needs_grad(a)) detail::add_into(g.grad(a), dy);
    if (g.needs_grad(b)) detail::add_into(g.grad(b), dy);
  });
}

// ---------------------------------------------------------------------------
// Convolutions

// Dense 2-D convolution, weight [O, C, k, k], optional bias [O].
template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, Var bias, int stride, int pad) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(w);
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3)) {
    throw Error(ErrorKind::kShape, "conv2d: input " + shape_str(xv.shape()) + " vs weight " +
                                       shape_str(wv.shape()));
  }
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int O = wv.dim(0), k = wv.dim(2);
  const int Ho = detail::conv_out(H, k, stride, pad), Wo = detail::conv_out(W, k, stride, pad);
  const int ckk = C * k * k, hw = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> y({N, O, Ho, Wo});
  std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(ckk) * hw);
  CMapR<T> wm(wv.data(), O, ckk);
  for (int n = 0; n < N; ++n) {
    const T* xn = xv.data() + static_cast<std::size_t>(n) * C * H * W;
    if (!direct) detail::im2col(xn, C, H, W, k, stride, pad, Ho, Wo, cols.data());
    CMapR<T> cm(direct ? xn : cols.data(), ckk, hw);
    MapR<T> ym(y.data() + static_cast<std::size_t>(n) * O * hw, O, hw);
    ym.noalias() = wm * cm;
  }
  if (bias.valid()) {
    const Tensor<T>& bv = g.value(bias);
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < O; ++o) {
        T* p = y.data() + (static_cast<std::size_t>(n) * O + o) * hw;
        for (int i = 0; i < hw; ++i) p[i] += bv[o];
      }
  }
  const Var parents[] = {x, w, bias.valid() ? bias : w};
  return g.record(
      std::move(y), parents,
      [=](Graph<T>& g, const Tensor<T>& dy) {
        const Tensor<T>& xv = g.value(x);
        const Tensor<T>& wv = g.value(w);
        const bool need_x = g.needs_grad(x), need_w = g.needs_grad(w);
        std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(ckk) * hw);
        std::vector<T> dcols(static_cast<std::size_t>(ckk) * hw);
        CMapR<T> wm(wv.data(), O, ckk);
        for (int n = 0; n < N; ++n) {
          const T* xn = xv.data() + static_cast<std::size_t>(n) * C * H * W;
          CMapR<T> dym(dy.data() + static_cast<std::size_t>(n) * O * hw, O, hw);
          if (need_w) {
            if (!direct) detail::im2col(xn, C, H, W, k, stride, pad, Ho, Wo, cols.data());
            CMapR<T> cm(direct ? xn : cols.data(), ckk, hw);
            MapR<T> dwm(g.grad(w).data(), O, ckk);
            dwm.noalias() += dym * cm.transpose();
          }
          if (need_x) {
            T* dxn = g.grad(x).data() + static_cast<std::size_t>(n) * C * H * W;
            if (direct) {
              MapR<T> dxm(dxn, C, hw);
              dxm.noalias() += wm.transpose() * dym;
            } else {
              MapR<T> dcm(dcols.data(), ckk, hw);
              dcm.noalias() = wm.transpose() * dym;
              detail::col2im(dcols.data(), C, H, W, k, stride, pad, Ho, Wo, dxn);
            }
          }
        }
        if (bias.valid() && g.needs_grad(bias)) {
          Tensor<T>& db = g.grad(bias);
          for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) {
              const T* p = dy.data() + (static_cast<std::size_t>(n) * O + o) * hw;
              T s{0};
              for (int i = 0; i < hw; ++i) s += p[i];
              db[o] += s;
            }
        }
      });
}

template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, int stride, int pad) {
  return conv2d(g, x, w, Var{}, stride, pad);
}

// Per-channel spatial convolution, weight [C, 1, k, k], no bias.
template <typename T>
Var depthwise_conv2d(Graph<T>& g, Var x, Var w, int stride, int pad) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(w);
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(0) != xv.dim(1) || wv.dim(1) != 1) {
    throw Error(ErrorKind::kShape, "depthwise_conv2d: input " + shape_str(xv.shape()) +
                                       " vs weight " + shape_str(wv.shape()));
  }
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3), k = wv.dim(2);
  const int Ho = detail::conv_out(H, k, stride, pad), Wo = detail::conv_out(W, k, stride, pad);
  Tensor<T> y({N, C, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* xc = xv.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
      const T* wc = wv.data() + static_cast<std::size_t>(c) * k * k;
      T* yc = y.data() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const T wk = wc[ky * k + kx];
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            const T* xr = xc + static_cast<std::size_t>(iy) * W;
            T* yr = yc + static_cast<std::size_t>(oy) * Wo;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) yr[ox] += wk * xr[ix];
            }
          }
        }
    }
  return g.record(std::move(y), {x, w}, [=](Graph<T>& g, const Tensor<T>& dy) {
    const Tensor<T>& xv = g.value(x);
    const Tensor<T>& wv = g.value(w);
    const bool need_x = g.needs_grad(x), need_w = g.needs_grad(w);
    T* dx = need_x ? g.grad(x).data() : nullptr;
    T* dw = need_w ? g.grad(w).data() : nullptr;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t xoff = (static_cast<std::size_t>(n) * C + c) * H * W;
        const T* xc = xv.data() + xoff;
        const T* wc = wv.data() + static_cast<std::size_t>(c) * k * k;
        const T* dyc = dy.data() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const T wk = wc[ky * k + kx];
            T acc{0};
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              const T* xr = xc + static_cast<std::size_t>(iy) * W;
              const T* dyr = dyc + static_cast<std::size_t>(oy) * Wo;
              T* dxr = need_x ? dx + xoff + static_cast<std::size_t>(iy) * W : nullptr;
              for (int ox = 0; ox < Wo; ++ox) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                acc += dyr[ox] * xr[ix];
                if (need_x) dxr[ix] += wk * dyr[ox];
              }
            }
            if (need_w) dw[static_cast<std::size_t>(c) * k * k + ky * k + kx] += acc;
          }
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
struct BatchNormBuffers {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

// Batch norm over [N, C, ...]. Training mode normalizes with batch
// statistics and updates the running buffers; eval mode uses the buffers.
template <typename T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, const BatchNormBuffers<T>& buf) {
  const Tensor<T>& xv = g.value(x);
  const int N = xv.dim(0), C = xv.dim(1);
  const std::size_t inner = xv.size() / (static_cast<std::size_t>(N) * C);
  const T m = static_cast<T>(static_cast<std::size_t>(N) * inner);
  const Tensor<T>& gv = g.value(gamma);
  const Tensor<T>& bv = g.value(beta);
  std::vector<T> mean(C), inv_std(C);
  if (g.training()) {
    for (int c = 0; c < C; ++c) {
      double s = 0, s2 = 0;
      for (int n = 0; n < N; ++n) {
        const T* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
      }
      const double mu = s / m;
      for (int n = 0; n < N; ++n) {
        const T* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) s2 += (p[i] - mu) * (p[i] - mu);
      }
      const double var = s2 / m;
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + buf.eps));
      if (buf.running_mean) {
        const double unbiased = m > 1 ? s2 / (m - 1) : var;
        (*buf.running_mean)[c] = (T{1} - buf.momentum) * (*buf.running_mean)[c] + buf.momentum * mean[c];
        (*buf.running_var)[c] =
            (T{1} - buf.momentum) * (*buf.running_var)[c] + buf.momentum * static_cast<T>(unbiased);
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = (*buf.running_mean)[c];
      inv_std[c] = T{1} / std::sqrt((*buf.running_var)[c] + buf.eps);
    }
  }
  Tensor<T> xhat(xv.shape());
  Tensor<T> y(xv.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const T h = (xv[off + i] - mean[c]) * inv_std[c];
        xhat[off + i] = h;
        y[off + i] = gv[c] * h + bv[c];
      }
    }
  const bool batch_stats = g.training();
  return g.record(
      std::move(y), {x, gamma, beta},
      [=, xhat = std::move(xhat)](Graph<T>& g, const Tensor<T>& dy) {
        const Tensor<T>& gv = g.value(gamma);
        std::vector<T> sum_dy(C, T{0}), sum_dy_xhat(C, T{0});
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              sum_dy[c] += dy[off + i];
              sum_dy_xhat[c] += dy[off + i] * xhat[off + i];
            }
          }
        if (g.needs_grad(gamma)) {
          Tensor<T>& dg = g.grad(gamma);
          for (int c = 0; c < C; ++c) dg[c] += sum_dy_xhat[c];
        }
        if (g.needs_grad(beta)) {
          Tensor<T>& db = g.grad(beta);
          for (int c = 0; c < C; ++c) db[c] += sum_dy[c];
        }
        if (!g.needs_grad(x)) return;
        Tensor<T>& dx = g.grad(x);
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
            const T scale = gv[c] * inv_std[c];
            if (batch_stats) {
              for (std::size_t i = 0; i < inner; ++i)
                dx[off + i] += scale * (dy[off + i] - sum_dy[c] / m - xhat[off + i] * sum_dy_xhat[c] / m);
            } else {
              for (std::size_t i = 0; i < inner; ++i) dx[off + i] += scale * dy[off + i];
            }
          }
      });
}

// Layer norm over the last dimension.
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-6)) {
  const Tensor<T>& xv = g.value(x);
  const int D = xv.dim(-1);
  const std::size_t rows = xv.size() / D;
  const Tensor<T>& gv = g.value(gamma);
  const Tensor<T>& bv = g.value(beta);
  Tensor<T> xhat(xv.shape()), y(xv.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = xv.data() + r * D;
    T mu{0};
    for (int i = 0; i < D; ++i) mu += p[i];
    mu /= D;
    T var{0};
    for (int i = 0; i < D; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= D;
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (int i = 0; i < D; ++i) {
      const T h = (p[i] - mu) * inv_std[r];
      xhat[r * D + i] = h;
      y[r * D + i] = gv[i] * h + bv[i];
    }
  }
  return g.record(std::move(y), {x, gamma, beta},
                  [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g,
                                                                            const Tensor<T>& dy) {
                    const Tensor<T>& gv = g.value(gamma);
                    if (g.needs_grad(gamma) || g.needs_grad(beta)) {
                      Tensor<T>& dg = g.grad(gamma);
                      Tensor<T>& db = g.grad(beta);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (int i = 0; i < D; ++i) {
                          dg[i] += dy[r * D + i] * xhat[r * D + i];
                          db[i] += dy[r * D + i];
                        }
                    }
                    if (!g.needs_grad(x)) return;
                    Tensor<T>& dx = g.grad(x);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T s1{0}, s2{0};
                      for (int i = 0; i < D; ++i) {
                        const T dh = dy[r * D + i] * gv[i];
                        s1 += dh;
                        s2 += dh * xhat[r * D + i];
                      }
                      for (int i = 0; i < D; ++i) {
                        const T dh = dy[r * D + i] * gv[i];
                        dx[r * D + i] += inv_std[r] * (dh - s1 / D - xhat[r * D + i] * s2 / D);
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Pooling and reshaping

template <typename T>
Var max_pool2d(Graph<T>& g, Var x, int k, int stride, int pad) {
  const Tensor<T>& xv = g.value(x);
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Ho = detail::conv_out(H, k, stride, pad), Wo = detail::conv_out(W, k, stride, pad);
  Tensor<T> y({N, C, Ho, Wo});
  std::vector<int> arg(y.size());
  for (int nc = 0; nc < N * C; ++nc) {
    const T* xc = xv.data() + static_cast<std::size_t>(nc) * H * W;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        int best_i = -1;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            if (xc[iy * W + ix] > best) {
              best = xc[iy * W + ix];
              best_i = iy * W + ix;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(nc) * Ho + oy) * Wo + ox;
        y[o] = best;
        arg[o] = best_i;
      }
  }
  return g.record(std::move(y), {x},
                  [=, arg = std::move(arg)](Graph<T>& g, const Tensor<T>& dy) {
                    Tensor<T>& dx = g.grad(x);
                    const std::size_t per_out = static_cast<std::size_t>(Ho) * Wo;
                    for (std::size_t o = 0; o < dy.size(); ++o) {
                      const std::size_t nc = o / per_out;
                      dx[nc * H * W + arg[o]] += dy[o];
                    }
                  });
}

// [N, C, H, W] -> [N, C]
template <typename T>
Var global_avg_pool(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  const int N = xv.dim(0), C = xv.dim(1);
  const std::size_t hw = xv.size() / (static_cast<std::size_t>(N) * C);
  Tensor<T> y({N, C});
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc) {
    T s{0};
    for (std::size_t i = 0; i < hw; ++i) s += xv[nc * hw + i];
    y[nc] = s / static_cast<T>(hw);
  }
  return g.record(std::move(y), {x}, [=](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>& dx = g.grad(x);
    for (std::size_t nc = 0; nc < dy.size(); ++nc) {
      const T v = dy[nc] / static_cast<T>(hw);
      for (std::size_t i = 0; i < hw; ++i) dx[nc * hw + i] += v;
    }
  });
}

// x [N, C, H, W] scaled per (n, c) by s [N, C].
template <typename T>
Var channel_scale(Graph<T>& g, Var x, Var s) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& sv = g.value(s);
  const int N = xv.dim(0), C = xv.dim(1);
  expect_shape(sv.shape(), {N, C}, "channel_scale");
  const std::size_t hw = xv.size() / (static_cast<std::size_t>(N) * C);
  Tensor<T> y(xv.shape());
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc)
    for (std::size_t i = 0; i < hw; ++i) y[nc * hw + i] = xv[nc * hw + i] * sv[nc];
  return g.record(std::move(y), {x, s}, [=](Graph<T>& g, const Tensor<T>& dy) {
    const Tensor<T>& xv = g.value(x);
    const Tensor<T>& sv = g.value(s);
    const bool need_x = g.needs_grad(x), need_s = g.needs_grad(s);
    for (std::size_t nc = 0; nc < dy.size() / hw; ++nc) {
      T acc{0};
      for (std::size_t i = 0; i < hw; ++i) {
        acc += dy[nc * hw + i] * xv[nc * hw + i];
        if (need_x) g.grad(x)[nc * hw + i] += dy[nc * hw + i] * sv[nc];
      }
      if (need_s) g.grad(s)[nc] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Dense

// y[..., O] = x[..., F] W^T + b. Leading dims are flattened.
template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(w);
  const int F = xv.dim(-1), O = wv.dim(0);
  if (wv.rank() != 2 || wv.dim(1) != F) {
    throw Error(ErrorKind::kShape,
                "linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  }
  const int rows = static_cast<int>(xv.size() / F);
  Shape out_shape = xv.shape();
  out_shape.back() = O;
  Tensor<T> y(out_shape);
  MapR<T> ym(y.data(), rows, O);
  ym.noalias() = CMapR<T>(xv.data(), rows, F) * CMapR<T>(wv.data(), O, F).transpose();
  if (b.valid()) {
    const Tensor<T>& bv = g.value(b);
    expect_shape(bv.shape(), {O}, "linear bias");
    for (int r = 0; r < rows; ++r)
      for (int o = 0; o < O; ++o) y[static_cast<std::size_t>(r) * O + o] += bv[o];
  }
  const Var parents[] = {x, w, b.valid() ? b : w};
  return g.record(std::move(y), parents, [=](Graph<T>& g, const Tensor<T>& dy) {
    CMapR<T> dym(dy.data(), rows, O);
    if (g.needs_grad(w)) {
      MapR<T> dwm(g.grad(w).data(), O, F);
      dwm.noalias() += dym.transpose() * CMapR<T>(g.value(x).data(), rows, F);
    }
    if (g.needs_grad(x)) {
      MapR<T> dxm(g.grad(x).data(), rows, F);
      dxm.noalias() += dym * CMapR<T>(g.value(w).data(), O, F);
    }
    if (b.valid() && g.needs_grad(b)) {
      Tensor<T>& db = g.grad(b);
      for (int r = 0; r < rows; ++r)
        for (int o = 0; o < O; ++o) db[o] += dy[static_cast<std::size_t>(r) * O + o];
    }
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  Tensor<T> y = g.value(x).reshaped(std::move(shape));
  return g.record(std::move(y), {x}, [x](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>& dx = g.grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

// Concatenate along the last dimension.
template <typename T>
Var concat_last(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  const int Fa = av.dim(-1), Fb = bv.dim(-1);
  const std::size_t rows = av.size() / Fa;
  if (bv.size() / Fb != rows) throw Error(ErrorKind::kShape, "concat_last: row count mismatch");
  Shape out_shape = av.shape();
  out_shape.back() = Fa + Fb;
  Tensor<T> y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * Fa, Fa, y.data() + r * (Fa + Fb));
    std::copy_n(bv.data() + r * Fb, Fb, y.data() + r * (Fa + Fb) + Fa);
  }
  return g.record(std::move(y), {a, b}, [=](Graph<T>& g, const Tensor<T>& dy) {
    const bool na = g.needs_grad(a), nb = g.needs_grad(b);
    for (std::size_t r = 0; r < rows; ++r) {
      if (na)
        for (int i = 0; i < Fa; ++i) g.grad(a)[r * Fa + i] += dy[r * (Fa + Fb) + i];
      if (nb)
        for (int i = 0; i < Fb; ++i) g.grad(b)[r * Fb + i] += dy[r * (Fa + Fb) + Fa + i];
    }
  });
}

// Stack row vectors [1, F] (or [F]) into [B, F].
template <typename T>
Var stack_rows(Graph<T>& g, const std::vector<Var>& rows) {
  if (rows.empty()) throw Error(ErrorKind::kShape, "stack_rows: no rows");
  const int F = static_cast<int>(g.value(rows[0]).size());
  Tensor<T> y({static_cast<int>(rows.size()), F});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Tensor<T>& v = g.value(rows[r]);
    if (static_cast<int>(v.size()) != F) throw Error(ErrorKind::kShape, "stack_rows: width mismatch");
    std::copy_n(v.data(), F, y.data() + r * F);
  }
  return g.record(std::move(y), rows, [=](Graph<T>& g, const Tensor<T>& dy) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (!g.needs_grad(rows[r])) continue;
      Tensor<T>& d = g.grad(rows[r]);
      for (int i = 0; i < F; ++i) d[i] += dy[r * F + i];
    }
  });
}

// [B, T, F] -> [B, F] maximum over the middle axis (first index wins ties).
template <typename T>
Var max_over_time(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  const int B = xv.rank() == 3 ? xv.dim(0) : 1;
  const int Tn = xv.dim(-2), F = xv.dim(-1);
  Tensor<T> y({B, F});
  std::vector<int> arg(static_cast<std::size_t>(B) * F, 0);
  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f) {
      const T* base = xv.data() + static_cast<std::size_t>(b) * Tn * F + f;
      T best = base[0];
      int bi = 0;
      for (int t = 1; t < Tn; ++t)
        if (base[static_cast<std::size_t>(t) * F] > best) {
          best = base[static_cast<std::size_t>(t) * F];
          bi = t;
        }
      y[static_cast<std::size_t>(b) * F + f] = best;
      arg[static_cast<std::size_t>(b) * F + f] = bi;
    }
  return g.record(std::move(y), {x}, [=, arg = std::move(arg)](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>& dx = g.grad(x);
    for (int b = 0; b < B; ++b)
      for (int f = 0; f < F; ++f) {
        const std::size_t o = static_cast<std::size_t>(b) * F + f;
        dx[(static_cast<std::size_t>(b) * Tn + arg[o]) * F + f] += dy[o];
      }
  });
}

template <typename T>
Var mean_over_time(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  const int B = xv.rank() == 3 ? xv.dim(0) : 1;
  const int Tn = xv.dim(-2), F = xv.dim(-1);
  Tensor<T> y({B, F});
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < Tn; ++t)
      for (int f = 0; f < F; ++f)
        y[static_cast<std::size_t>(b) * F + f] += xv[(static_cast<std::size_t>(b) * Tn + t) * F + f];
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= static_cast<T>(Tn);
  return g.record(std::move(y), {x}, [=](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>& dx = g.grad(x);
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < Tn; ++t)
        for (int f = 0; f < F; ++f)
          dx[(static_cast<std::size_t>(b) * Tn + t) * F + f] +=
              dy[static_cast<std::size_t>(b) * F + f] / static_cast<T>(Tn);
  });
}

// ---------------------------------------------------------------------------
// Attention-based MIL pooling

// a = softmax_k(w^T tanh(V h_k)) over the rows of h [N, M]; V [L, M], w [L].
template <typename T>
Var attention_weights(Graph<T>& g, Var h, Var V, Var w) {
  const Tensor<T>& hv = g.value(h);
  const Tensor<T>& Vv = g.value(V);
  const Tensor<T>& wv = g.value(w);
  const int N = hv.dim(0), M = hv.dim(1), L = Vv.dim(0);
  if (Vv.dim(1) != M || static_cast<int>(wv.size()) != L) {
    throw Error(ErrorKind::kShape, "attention_weights: V " + shape_str(Vv.shape()) + ", w " +
                                       shape_str(wv.shape()) + ", bag " + shape_str(hv.shape()));
  }
  MatR<T> act = (CMapR<T>(hv.data(), N, M) * CMapR<T>(Vv.data(), L, M).transpose()).array().tanh();
  Eigen::Matrix<T, Eigen::Dynamic, 1> score = act * Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(wv.data(), L);
  const T mx = score.maxCoeff();
  Tensor<T> a({N});
  T z{0};
  for (int k = 0; k < N; ++k) z += (a[k] = std::exp(score[k] - mx));
  for (int k = 0; k < N; ++k) a[k] /= z;
  Tensor<T> a_copy = a;
  return g.record(std::move(a), {h, V, w},
                  [=, act = std::move(act), a = std::move(a_copy)](Graph<T>& g, const Tensor<T>& da) {
                    // Softmax Jacobian: ds_k = a_k (da_k - sum_j a_j da_j).
                    const Tensor<T>& hv = g.value(h);
                    const Tensor<T>& Vv = g.value(V);
                    const Tensor<T>& wv = g.value(w);
                    T dot{0};
                    for (int k = 0; k < N; ++k) dot += a[k] * da[k];
                    Eigen::Matrix<T, Eigen::Dynamic, 1> ds(N);
                    for (int k = 0; k < N; ++k) ds[k] = a[k] * (da[k] - dot);
                    if (g.needs_grad(w)) {
                      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dw(g.grad(w).data(), L);
                      dw.noalias() += act.transpose() * ds;
                    }
                    // d pre-activation [N, L] = ds_k * w_l * (1 - act^2)
                    MatR<T> dpre(N, L);
                    for (int k = 0; k < N; ++k)
                      for (int l = 0; l < L; ++l)
                        dpre(k, l) = ds[k] * wv[l] * (T{1} - act(k, l) * act(k, l));
                    if (g.needs_grad(V)) {
                      MapR<T> dV(g.grad(V).data(), L, M);
                      dV.noalias() += dpre.transpose() * CMapR<T>(hv.data(), N, M);
                    }
                    if (g.needs_grad(h)) {
                      MapR<T> dh(g.grad(h).data(), N, M);
                      dh.noalias() += dpre * CMapR<T>(Vv.data(), L, M);
                    }
                  });
}

// pooled [1, M] = sum_k a_k h_k
template <typename T>
Var weighted_sum(Graph<T>& g, Var a, Var h) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& hv = g.value(h);
  const int N = hv.dim(0), M = hv.dim(1);
  if (static_cast<int>(av.size()) != N) throw Error(ErrorKind::kShape, "weighted_sum: weight count");
  Tensor<T> y({1, M});
  for (int k = 0; k < N; ++k)
    for (int m = 0; m < M; ++m) y[m] += av[k] * hv[static_cast<std::size_t>(k) * M + m];
  return g.record(std::move(y), {a, h}, [=](Graph<T>& g, const Tensor<T>& dy) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& hv = g.value(h);
    const bool na = g.needs_grad(a), nh = g.needs_grad(h);
    for (int k = 0; k < N; ++k) {
      T acc{0};
      for (int m = 0; m < M; ++m) {
        acc += dy[m] * hv[static_cast<std::size_t>(k) * M + m];
        if (nh) g.grad(h)[static_cast<std::size_t>(k) * M + m] += dy[m] * av[k];
      }
      if (na) g.grad(a)[k] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Losses and helpers

// Mean binary cross-entropy with logits over every element.
template <typename T>
Var bce_with_logits(Graph<T>& g, Var logits, const Tensor<T>& targets) {
  const Tensor<T>& zv = g.value(logits);
  expect_shape(targets.shape(), zv.shape(), "bce targets");
  T loss{0};
  for (std::size_t i = 0; i < zv.size(); ++i) loss += detail::softplus(zv[i]) - targets[i] * zv[i];
  const T n = static_cast<T>(zv.size());
  Tensor<T> out({1}, loss / n);
  return g.record(std::move(out), {logits}, [=](Graph<T>& g, const Tensor<T>& dy) {
    const Tensor<T>& zv = g.value(logits);
    Tensor<T>& dz = g.grad(logits);
    for (std::size_t i = 0; i < zv.size(); ++i)
      dz[i] += dy[0] * (detail::sigmoid(zv[i]) - targets[i]) / n;
  });
}

// Scalar sum_i x_i c_i; a generic probe loss for gradient checks.
template <typename T>
Var dot_with(Graph<T>& g, Var x, const Tensor<T>& c) {
  const Tensor<T>& xv = g.value(x);
  expect_shape(c.shape(), xv.shape(), "dot_with");
  T s{0};
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * c[i];
  return g.record(Tensor<T>({1}, s), {x}, [=](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>& dx = g.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[0] * c[i];
  });
}

}  // namespace pecad::nn::ops
