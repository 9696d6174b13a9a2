#pragma once

#include <cmath>
#include <vector>

#include "pecad/nn/ops.hpp"

namespace pecad::nn::ops {

// Multi-head scaled dot-product self-attention. qkv [B, T, 3D] holds the
// query, key and value projections side by side; returns [B, T, D] with the
// heads concatenated along the last dimension.
template <typename T>
Var self_attention(Graph<T>& g, Var qkv, int heads) {
  const Tensor<T>& in = g.value(qkv);
  const int B = in.dim(0), Tn = in.dim(1), D3 = in.dim(2);
  const int D = D3 / 3;
  if (D3 % 3 != 0 || D % heads != 0) {
    throw Error(ErrorKind::kShape, "self_attention: width " + std::to_string(D3) +
                                       " incompatible with " + std::to_string(heads) + " heads");
  }
  const int dh = D / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  auto slice = [&](const Tensor<T>& src, int b, int part, int h) {
    MatR<T> m(Tn, dh);
    for (int t = 0; t < Tn; ++t)
      for (int j = 0; j < dh; ++j)
        m(t, j) = src[(static_cast<std::size_t>(b) * Tn + t) * D3 + part * D + h * dh + j];
    return m;
  };

  Tensor<T> out({B, Tn, D});
  std::vector<MatR<T>> probs(static_cast<std::size_t>(B) * heads);
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h) {
      const MatR<T> q = slice(in, b, 0, h), k = slice(in, b, 1, h), v = slice(in, b, 2, h);
      MatR<T> s = (q * k.transpose()) * scale;
      for (int i = 0; i < Tn; ++i) {
        const T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      const MatR<T> o = s * v;
      for (int t = 0; t < Tn; ++t)
        for (int j = 0; j < dh; ++j) out[(static_cast<std::size_t>(b) * Tn + t) * D + h * dh + j] = o(t, j);
      probs[static_cast<std::size_t>(b) * heads + h] = std::move(s);
    }

  return g.record(std::move(out), {qkv},
                  [=, probs = std::move(probs)](Graph<T>& g, const Tensor<T>& dout) {
                    const Tensor<T>& in = g.value(qkv);
                    Tensor<T>& din = g.grad(qkv);
                    auto slice = [&](const Tensor<T>& src, int b, int part, int h) {
                      MatR<T> m(Tn, dh);
                      for (int t = 0; t < Tn; ++t)
                        for (int j = 0; j < dh; ++j)
                          m(t, j) = src[(static_cast<std::size_t>(b) * Tn + t) * D3 + part * D + h * dh + j];
                      return m;
                    };
                    for (int b = 0; b < B; ++b)
                      for (int h = 0; h < heads; ++h) {
                        const MatR<T>& p = probs[static_cast<std::size_t>(b) * heads + h];
                        const MatR<T> q = slice(in, b, 0, h), k = slice(in, b, 1, h), v = slice(in, b, 2, h);
                        MatR<T> dout_h(Tn, dh);
                        for (int t = 0; t < Tn; ++t)
                          for (int j = 0; j < dh; ++j)
                            dout_h(t, j) = dout[(static_cast<std::size_t>(b) * Tn + t) * D + h * dh + j];
                        const MatR<T> dv = p.transpose() * dout_h;
                        const MatR<T> dp = dout_h * v.transpose();
                        MatR<T> ds(Tn, Tn);
                        for (int i = 0; i < Tn; ++i) {
                          const T rowdot = (dp.row(i).array() * p.row(i).array()).sum();
                          ds.row(i) = p.row(i).array() * (dp.row(i).array() - rowdot);
                        }
                        ds *= scale;
                        const MatR<T> dq = ds * k;
                        const MatR<T> dk = ds.transpose() * q;
                        for (int t = 0; t < Tn; ++t)
                          for (int j = 0; j < dh; ++j) {
                            const std::size_t base = (static_cast<std::size_t>(b) * Tn + t) * D3 + h * dh + j;
                            din[base] += dq(t, j);
                            din[base + D] += dk(t, j);
                            din[base + 2 * D] += dv(t, j);
                          }
                      }
                  });
}

// [B, T, D] with a learned token [D] prepended at position 0 -> [B, T+1, D].
template <typename T>
Var prepend_token(Graph<T>& g, Var x, Var token) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& tv = g.value(token);
  const int B = xv.dim(0), Tn = xv.dim(1), D = xv.dim(2);
  if (static_cast<int>(tv.size()) != D) throw Error(ErrorKind::kShape, "prepend_token: width");
  Tensor<T> y({B, Tn + 1, D});
  for (int b = 0; b < B; ++b) {
    std::copy_n(tv.data(), D, y.data() + static_cast<std::size_t>(b) * (Tn + 1) * D);
    std::copy_n(xv.data() + static_cast<std::size_t>(b) * Tn * D, static_cast<std::size_t>(Tn) * D,
                y.data() + (static_cast<std::size_t>(b) * (Tn + 1) + 1) * D);
  }
  return g.record(std::move(y), {x, token}, [=](Graph<T>& g, const Tensor<T>& dy) {
    for (int b = 0; b < B; ++b) {
      const T* src = dy.data() + static_cast<std::size_t>(b) * (Tn + 1) * D;
      if (g.needs_grad(token)) {
        Tensor<T>& dt = g.grad(token);
        for (int j = 0; j < D; ++j) dt[j] += src[j];
      }
      if (g.needs_grad(x)) {
        T* dst = g.grad(x).data() + static_cast<std::size_t>(b) * Tn * D;
        for (std::size_t i = 0; i < static_cast<std::size_t>(Tn) * D; ++i) dst[i] += src[D + i];
      }
    }
  });
}

// x [B, T, D] + table [T, D] broadcast over the batch.
template <typename T>
Var add_broadcast(Graph<T>& g, Var x, Var table) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& tv = g.value(table);
  const std::size_t per = tv.size();
  if (xv.size() % per != 0 || xv.size() / xv.dim(0) != per) {
    throw Error(ErrorKind::kShape, "add_broadcast: " + shape_str(xv.shape()) + " + " + shape_str(tv.shape()));
  }
  Tensor<T> y = xv;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += tv[i % per];
  return g.record(std::move(y), {x, table}, [=](Graph<T>& g, const Tensor<T>& dy) {
    if (g.needs_grad(x)) detail::add_into(g.grad(x), dy);
    if (g.needs_grad(table)) {
      Tensor<T>& dt = g.grad(table);
      for (std::size_t i = 0; i < dy.size(); ++i) dt[i % per] += dy[i];
    }
  });
}

// [B, T, D] -> [B, D] at token index.
template <typename T>
Var take_token(Graph<T>& g, Var x, int index) {
  const Tensor<T>& xv = g.value(x);
  const int B = xv.dim(0), Tn = xv.dim(1), D = xv.dim(2);
  Tensor<T> y({B, D});
  for (int b = 0; b < B; ++b)
    std::copy_n(xv.data() + (static_cast<std::size_t>(b) * Tn + index) * D, D, y.data() + static_cast<std::size_t>(b) * D);
  return g.record(std::move(y), {x}, [=](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>& dx = g.grad(x);
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < D; ++j) dx[(static_cast<std::size_t>(b) * Tn + index) * D + j] += dy[static_cast<std::size_t>(b) * D + j];
  });
}

}  // namespace pecad::nn::ops
