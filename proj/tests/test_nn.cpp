#include <gtest/gtest.h>

#include "pecad/nn/gru.hpp"
#include "pecad/nn/ops.hpp"
#include "pecad/nn/optim.hpp"
#include "pecad/nn/transformer_ops.hpp"
#include "test_util.hpp"

using namespace pecad;
using namespace pecad::nn;
using P = Parameter<double>;

namespace {

constexpr double kTol = 1e-6;

P make(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  P p{"p", Tensor<double>(std::move(s)), {}};
  testkit::fill_normal(p.value, rng, sd);
  return p;
}

// Contracts the op output with a fixed random probe so every output entry
// contributes to the checked scalar.
struct Probe {
  Tensor<double> c;
  Var operator()(Graph<double>& g, Var y, std::uint64_t seed = 99) {
    if (c.empty()) {
      std::mt19937_64 rng(seed);
      c = Tensor<double>(g.value(y).shape());
      testkit::fill_normal(c, rng);
    }
    return ops::dot_with(g, y, c);
  }
};

void expect_grad(const std::vector<P*>& params, const std::function<Var(Graph<double>&)>& build) {
  const auto r = testkit::grad_check(params, build);
  EXPECT_GT(r.entries, 0u);
  EXPECT_LT(r.rel_norm, kTol);
}

}  // namespace

TEST(Graph, ValuesAndAccumulation) {
  Graph<double> g(true, true);
  P a{"a", Tensor<double>({2}, std::vector<double>{1, 2}), {}};
  const Var va = g.parameter(a);
  const Var s = ops::add(g, va, va);
  EXPECT_EQ(g.value(s)[1], 4.0);
  g.backward(ops::dot_with(g, s, Tensor<double>({2}, std::vector<double>{3, 5})));
  EXPECT_EQ(a.grad[0], 6.0);
  EXPECT_EQ(a.grad[1], 10.0);
  EXPECT_ERROR_KIND(g.backward(s), ErrorKind::kShape);

  Graph<double> frozen(false, false);
  const Var vb = frozen.parameter(a);
  EXPECT_FALSE(frozen.needs_grad(ops::relu(frozen, vb)));
}

TEST(OpsGrad, Elementwise) {
  std::mt19937_64 rng(1);
  P x = make({3, 4}, rng), y = make({3, 4}, rng);
  for (auto op : {0, 1, 2, 3}) {
    Probe pr;
    expect_grad({&x}, [&](Graph<double>& g) {
      const Var v = g.parameter(x);
      const Var o = op == 0 ? ops::relu(g, v) : op == 1 ? ops::sigmoid(g, v) : op == 2 ? ops::tanh(g, v) : ops::gelu(g, v);
      return pr(g, o);
    });
  }
  Probe pr;
  expect_grad({&x, &y}, [&](Graph<double>& g) { return pr(g, ops::add(g, g.parameter(x), g.parameter(y))); });
}

TEST(OpsGrad, Convolutions) {
  std::mt19937_64 rng(2);
  P x = make({2, 3, 7, 6}, rng), w = make({4, 3, 3, 3}, rng, 0.3), b = make({4}, rng);
  P dw = make({3, 1, 3, 3}, rng, 0.3);
  for (int stride : {1, 2}) {
    Probe pr, pr2;
    expect_grad({&x, &w, &b}, [&](Graph<double>& g) {
      return pr(g, ops::conv2d(g, g.parameter(x), g.parameter(w), g.parameter(b), stride, 1));
    });
    expect_grad({&x, &dw}, [&](Graph<double>& g) {
      return pr2(g, ops::depthwise_conv2d(g, g.parameter(x), g.parameter(dw), stride, 1));
    });
  }
}

TEST(OpsGrad, Norms) {
  std::mt19937_64 rng(3);
  P x = make({4, 3, 2, 2}, rng), gamma = make({3}, rng), beta = make({3}, rng);
  Tensor<double> rm({3}), rv({3}, 1.0);
  Probe pr;
  expect_grad({&x, &gamma, &beta}, [&](Graph<double>& g) {
    ops::BatchNormBuffers<double> buf{&rm, &rv};
    return pr(g, ops::batch_norm(g, g.parameter(x), g.parameter(gamma), g.parameter(beta), buf));
  });
  // Eval mode is an affine map of the running statistics.
  Graph<double> ev(false, false);
  Tensor<double> m({3}, 0.5), v({3}, 4.0);
  ops::BatchNormBuffers<double> buf{&m, &v};
  const Var y = ops::batch_norm(ev, ev.parameter(x), ev.parameter(gamma), ev.parameter(beta), buf);
  EXPECT_NEAR(ev.value(y)[0], (x.value[0] - 0.5) / std::sqrt(4.0 + 1e-5) * gamma.value[0] + beta.value[0], 1e-12);

  P z = make({2, 5, 6}, rng), lg = make({6}, rng), lb = make({6}, rng);
  Probe pl;
  expect_grad({&z, &lg, &lb}, [&](Graph<double>& g) {
    return pl(g, ops::layer_norm(g, g.parameter(z), g.parameter(lg), g.parameter(lb)));
  });
}

TEST(OpsGrad, PoolingAndShape) {
  std::mt19937_64 rng(4);
  P x = make({2, 3, 5, 5}, rng), s = make({2, 3}, rng);
  Probe p1, p2, p3;
  expect_grad({&x}, [&](Graph<double>& g) { return p1(g, ops::max_pool2d(g, g.parameter(x), 3, 2, 1)); });
  expect_grad({&x}, [&](Graph<double>& g) { return p2(g, ops::global_avg_pool(g, g.parameter(x))); });
  expect_grad({&x, &s}, [&](Graph<double>& g) { return p3(g, ops::channel_scale(g, g.parameter(x), g.parameter(s))); });

  P a = make({3, 4}, rng), b = make({3, 2}, rng), w = make({5, 6}, rng), bias = make({5}, rng);
  Probe p4;
  expect_grad({&a, &b, &w, &bias}, [&](Graph<double>& g) {
    const Var c = ops::concat_last(g, g.parameter(a), g.parameter(b));
    const Var l = ops::linear(g, c, g.parameter(w), g.parameter(bias));
    return p4(g, ops::reshape(g, l, {15}));
  });
  P r0 = make({1, 4}, rng), r1 = make({1, 4}, rng);
  Probe p5;
  expect_grad({&r0, &r1}, [&](Graph<double>& g) { return p5(g, ops::stack_rows(g, {g.parameter(r0), g.parameter(r1)})); });
}

TEST(OpsGrad, TimePoolingAndAttention) {
  std::mt19937_64 rng(5);
  P x = make({2, 6, 4}, rng);
  Probe p1, p2;
  expect_grad({&x}, [&](Graph<double>& g) { return p1(g, ops::max_over_time(g, g.parameter(x))); });
  expect_grad({&x}, [&](Graph<double>& g) { return p2(g, ops::mean_over_time(g, g.parameter(x))); });

  P h = make({7, 5}, rng), V = make({3, 5}, rng, 0.5), w = make({3}, rng);
  Probe p3;
  expect_grad({&h, &V, &w}, [&](Graph<double>& g) {
    const Var hv = g.parameter(h);
    const Var a = ops::attention_weights(g, hv, g.parameter(V), g.parameter(w));
    return p3(g, ops::weighted_sum(g, a, hv));
  });
  Graph<double> g;
  const Var a = ops::attention_weights(g, g.parameter(h), g.parameter(V), g.parameter(w));
  double sum = 0;
  for (double v : g.value(a).values()) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(OpsGrad, Loss) {
  std::mt19937_64 rng(6);
  P z = make({3, 2}, rng, 3.0);
  const Tensor<double> t({3, 2}, std::vector<double>{1, 0, 0, 1, 1, 1});
  expect_grad({&z}, [&](Graph<double>& g) { return ops::bce_with_logits(g, g.parameter(z), t); });
  // Closed form at zero logits: log 2.
  Graph<double> g;
  P zero{"z", Tensor<double>({4}), {}};
  EXPECT_NEAR(g.value(ops::bce_with_logits(g, g.parameter(zero), Tensor<double>({4}, 1.0)))[0], std::log(2.0), 1e-15);
  // Large logits stay finite.
  P big{"b", Tensor<double>({2}, std::vector<double>{800, -800}), {}};
  Graph<double> g2;
  EXPECT_NEAR(g2.value(ops::bce_with_logits(g2, g2.parameter(big), Tensor<double>({2}, std::vector<double>{0, 1})))[0], 800.0, 1e-9);
}

TEST(OpsGrad, TransformerPieces) {
  std::mt19937_64 rng(7);
  P qkv = make({2, 5, 12}, rng, 0.7), tok = make({4}, rng), table = make({6, 4}, rng), x = make({2, 5, 4}, rng);
  Probe p1, p2;
  expect_grad({&qkv}, [&](Graph<double>& g) { return p1(g, ops::self_attention(g, g.parameter(qkv), 2)); });
  expect_grad({&x, &tok, &table}, [&](Graph<double>& g) {
    const Var y = ops::prepend_token(g, g.parameter(x), g.parameter(tok));
    const Var z = ops::add_broadcast(g, y, g.parameter(table));
    return p2(g, ops::take_token(g, z, 0));
  });
  EXPECT_ERROR_KIND(({
                      Graph<double> g;
                      ops::self_attention(g, g.parameter(qkv), 5);
                    }),
                    ErrorKind::kShape);
}

TEST(OpsGrad, Gru) {
  std::mt19937_64 rng(8);
  const int M = 3, H = 4;
  P x = make({2, 5, M}, rng), wih = make({3 * H, M}, rng, 0.5), whh = make({3 * H, H}, rng, 0.5);
  P bih = make({3 * H}, rng, 0.2), bhh = make({3 * H}, rng, 0.2);
  for (bool rev : {false, true}) {
    Probe pr;
    expect_grad({&x, &wih, &whh, &bih, &bhh}, [&](Graph<double>& g) {
      return pr(g, ops::gru(g, g.parameter(x), g.parameter(wih), g.parameter(whh), g.parameter(bih), g.parameter(bhh), rev));
    });
  }
}

TEST(Gru, SingleStepClosedForm) {
  // One step from h = 0: h' = (1 - z) n with r, z, n from the input path only.
  Graph<double> g;
  P x{"x", Tensor<double>({1, 1, 1}, std::vector<double>{0.5}), {}};
  P wih{"wih", Tensor<double>({3, 1}, std::vector<double>{1, 2, 3}), {}};
  P whh{"whh", Tensor<double>({3, 1}, std::vector<double>{7, 7, 7}), {}};
  P bih{"bih", Tensor<double>({3}, std::vector<double>{0, 0.1, 0}), {}};
  P bhh{"bhh", Tensor<double>({3}, std::vector<double>{0, 0, 0.2}), {}};
  const Var y = ops::gru(g, g.parameter(x), g.parameter(wih), g.parameter(whh), g.parameter(bih), g.parameter(bhh), false);
  const double r = 1 / (1 + std::exp(-0.5));
  const double z = 1 / (1 + std::exp(-(1.0 + 0.1)));
  const double n = std::tanh(1.5 + r * 0.2);
  EXPECT_NEAR(g.value(y)[0], (1 - z) * n, 1e-15);
}

TEST(Adam, FirstStepMovesByLr) {
  ParameterStore<double> store;
  auto& p = store.add("w", {2});
  p.value = Tensor<double>({2}, std::vector<double>{1, -1});
  Adam<double> opt(store, 0.01);
  p.grad = Tensor<double>({2}, std::vector<double>{3, -0.5});
  opt.step();
  // Bias-corrected first step is lr * sign(g) up to eps.
  EXPECT_NEAR(p.value[0], 0.99, 1e-9);
  EXPECT_NEAR(p.value[1], -0.99, 1e-9);
}
