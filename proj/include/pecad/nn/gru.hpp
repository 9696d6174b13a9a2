#pragma once

#include <vector>

#include "pecad/nn/ops.hpp"

namespace pecad::nn::ops {

// Single-direction GRU over x [B, K, M] with gate order (r, z, n):
//   r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//   z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//   n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//   h' = (1 - z) * n + z * h
// W_ih [3H, M], W_hh [3H, H], b_ih [3H], b_hh [3H]. Returns [B, K, H] with
// outputs stored at their input positions; `reverse` scans from K-1 to 0.
template <typename T>
Var gru(Graph<T>& g, Var x, Var w_ih, Var w_hh, Var b_ih, Var b_hh, bool reverse) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wih = g.value(w_ih);
  const Tensor<T>& whh = g.value(w_hh);
  const Tensor<T>& bih = g.value(b_ih);
  const Tensor<T>& bhh = g.value(b_hh);
  if (xv.rank() != 3) throw Error(ErrorKind::kShape, "gru: input must be [B, K, M]");
  const int B = xv.dim(0), K = xv.dim(1), M = xv.dim(2);
  const int H = whh.dim(1);
  if (wih.dim(0) != 3 * H || wih.dim(1) != M || whh.dim(0) != 3 * H ||
      static_cast<int>(bih.size()) != 3 * H || static_cast<int>(bhh.size()) != 3 * H) {
    throw Error(ErrorKind::kShape, "gru: weights " + shape_str(wih.shape()) + "/" +
                                       shape_str(whh.shape()) + " do not fit input " +
                                       shape_str(xv.shape()));
  }
  const int G = 3 * H;

  // Input projections for every step at once: [B*K, 3H].
  MatR<T> gi = CMapR<T>(xv.data(), B * K, M) * CMapR<T>(wih.data(), G, M).transpose();
  for (int r = 0; r < B * K; ++r)
    for (int j = 0; j < G; ++j) gi(r, j) += bih[j];

  // Per-step caches indexed by time position t: [B, H] each.
  std::vector<MatR<T>> rs(K), zs(K), ns(K), ghn(K), hprev(K);
  Tensor<T> out({B, K, H});
  MatR<T> h = MatR<T>::Zero(B, H);
  CMapR<T> whh_m(whh.data(), G, H);
  for (int step = 0; step < K; ++step) {
    const int t = reverse ? K - 1 - step : step;
    MatR<T> gh = h * whh_m.transpose();
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < G; ++j) gh(b, j) += bhh[j];
    MatR<T> r(B, H), z(B, H), n(B, H), hn(B, H);
    for (int b = 0; b < B; ++b) {
      const int row = b * K + t;
      for (int j = 0; j < H; ++j) {
        r(b, j) = detail::sigmoid(gi(row, j) + gh(b, j));
        z(b, j) = detail::sigmoid(gi(row, H + j) + gh(b, H + j));
        hn(b, j) = gh(b, 2 * H + j);
        n(b, j) = std::tanh(gi(row, 2 * H + j) + r(b, j) * hn(b, j));
      }
    }
    hprev[t] = h;
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < H; ++j) {
        h(b, j) = (T{1} - z(b, j)) * n(b, j) + z(b, j) * hprev[t](b, j);
        out[(static_cast<std::size_t>(b) * K + t) * H + j] = h(b, j);
      }
    rs[t] = std::move(r);
    zs[t] = std::move(z);
    ns[t] = std::move(n);
    ghn[t] = std::move(hn);
  }

  return g.record(
      std::move(out), {x, w_ih, w_hh, b_ih, b_hh},
      [=, rs = std::move(rs), zs = std::move(zs), ns = std::move(ns), ghn = std::move(ghn),
       hprev = std::move(hprev)](Graph<T>& g, const Tensor<T>& dout) {
        const Tensor<T>& xv = g.value(x);
        CMapR<T> wih_m(g.value(w_ih).data(), G, M);
        CMapR<T> whh_m(g.value(w_hh).data(), G, H);
        MatR<T> dgi(B * K, G);
        MatR<T> dwhh = MatR<T>::Zero(G, H);
        Eigen::Matrix<T, 1, Eigen::Dynamic> dbhh = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(G);
        MatR<T> dh_next = MatR<T>::Zero(B, H);
        MatR<T> dgh(B, G);
        for (int step = K - 1; step >= 0; --step) {
          const int t = reverse ? K - 1 - step : step;
          const MatR<T>& r = rs[t];
          const MatR<T>& z = zs[t];
          const MatR<T>& n = ns[t];
          const MatR<T>& hn = ghn[t];
          const MatR<T>& hp = hprev[t];
          for (int b = 0; b < B; ++b) {
            const int row = b * K + t;
            for (int j = 0; j < H; ++j) {
              const T dh = dout[(static_cast<std::size_t>(b) * K + t) * H + j] + dh_next(b, j);
              const T dn = dh * (T{1} - z(b, j));
              const T dz = dh * (hp(b, j) - n(b, j));
              const T dn_pre = dn * (T{1} - n(b, j) * n(b, j));
              const T dr = dn_pre * hn(b, j);
              const T dr_pre = dr * r(b, j) * (T{1} - r(b, j));
              const T dz_pre = dz * z(b, j) * (T{1} - z(b, j));
              dgi(row, j) = dr_pre;
              dgi(row, H + j) = dz_pre;
              dgi(row, 2 * H + j) = dn_pre;
              dgh(b, j) = dr_pre;
              dgh(b, H + j) = dz_pre;
              dgh(b, 2 * H + j) = dn_pre * r(b, j);
              dh_next(b, j) = dh * z(b, j);
            }
          }
          dh_next.noalias() += dgh * whh_m;
          dwhh.noalias() += dgh.transpose() * hp;
          dbhh += dgh.colwise().sum();
        }
        if (g.needs_grad(w_hh)) MapR<T>(g.grad(w_hh).data(), G, H) += dwhh;
        if (g.needs_grad(b_hh)) {
          Tensor<T>& d = g.grad(b_hh);
          for (int j = 0; j < G; ++j) d[j] += dbhh[j];
        }
        if (g.needs_grad(w_ih)) {
          MapR<T>(g.grad(w_ih).data(), G, M).noalias() +=
              dgi.transpose() * CMapR<T>(xv.data(), B * K, M);
        }
        if (g.needs_grad(b_ih)) {
          Tensor<T>& d = g.grad(b_ih);
          const auto colsum = dgi.colwise().sum();
          for (int j = 0; j < G; ++j) d[j] += colsum[j];
        }
        if (g.needs_grad(x)) {
          MapR<T>(g.grad(x).data(), B * K, M).noalias() += dgi * wih_m;
        }
      });
}

}  // namespace pecad::nn::ops
