#include <gtest/gtest.h>

#include <chrono>

#include "pecad/backbones/backbones.hpp"
#include "test_util.hpp"

using namespace pecad;
using namespace pecad::backbones;

namespace {

ModelSpec spec(const std::string& family, const std::string& scale, bool se = false) {
  ModelSpec s;
  s.family = family;
  s.scale = scale;
  s.with_se = se;
  return s;
}

long long count(const ModelSpec& s) { return count_params(*build_model<float>(s, 0)); }

// Mini residual by hand: 3x3 stride-2 stem to 16, one basic block per stage
// at widths 16/32/64/96, 1x1 projection shortcuts where the shape changes.
long long residual_mini_by_hand() {
  auto conv = [](long long in, long long out, long long k) { return in * out * k * k; };
  auto bn = [](long long c) { return 2 * c; };
  auto block = [&](int in, int out) {
    long long n = conv(in, out, 3) + bn(out) + conv(out, out, 3) + bn(out);
    if (in != out) n += conv(in, out, 1) + bn(out);
    return n;
  };
  return conv(3, 16, 3) + bn(16) + block(16, 16) + block(16, 32) + block(32, 64) + block(64, 96) + 96 + 1;
}

// ViT by hand: patch embedding, class token, position table, pre-norm blocks
// with a 4x MLP, final norm, single-logit head.
long long vit_by_hand(const ViTConfig& v) {
  const long long D = v.dim, P = v.patch, T = v.num_tokens();
  const long long block = 2 * D + (3 * D * D + 3 * D) + (D * D + D) + 2 * D + (D * 4 * D + 4 * D) + (4 * D * D + D);
  return 3 * P * P * D + D + D + T * D + v.depth * block + 2 * D + D + 1;
}

}  // namespace

TEST(Counts, FullXceptionAndSe) {
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_EQ(count(spec("xception", "full")), 20809001);
  EXPECT_EQ(count(spec("xception", "full", true)), 21548446);
  EXPECT_EQ(count(spec("residual", "full")), 11177025);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 30.0);
}

TEST(Counts, MiniOracles) {
  EXPECT_EQ(count(spec("residual", "mini")), residual_mini_by_hand());
  EXPECT_EQ(count(spec("vit", "mini")), vit_by_hand(ViTConfig{}));
  ModelSpec v = spec("vit", "mini");
  v.vit.patch = 8;
  v.vit.depth = 2;
  EXPECT_EQ(count(v), vit_by_hand(v.vit));
}

TEST(Counts, SeIsAdditive) {
  EXPECT_EQ(se_param_count(128, 16), 2184);
  EXPECT_EQ(se_param_count(8, 16), 2 * 8 + 1 + 8);  // reduced width floors at 1
  for (const std::string family : {"xception", "residual"})
    for (const std::string scale : {"mini", "full"})
      for (int ratio : {4, 16}) {
        ModelSpec with = spec(family, scale, true);
        with.se_ratio = ratio;
        long long extra = 0;
        for (int c : se_block_channels(with)) extra += se_param_count(c, ratio);
        EXPECT_EQ(count(with) - count(spec(family, scale)), extra) << family << " " << scale << " r=" << ratio;
      }
}

TEST(SeBlock, GradientCheck) {
  std::mt19937_64 rng(3);
  nn::ParameterStore<double> store;
  Builder<double> b{store, rng};
  const auto se = make_se(b, "se", 8, 4);
  nn::Parameter<double> x{"x", nn::Tensor<double>({2, 8, 3, 3}), {}};
  testkit::fill_normal(x.value, rng);
  for (auto* p : store.params()) testkit::fill_normal(p->value, rng, 0.5);
  nn::Tensor<double> c({2, 8, 3, 3});
  testkit::fill_normal(c, rng);
  std::vector<nn::Parameter<double>*> params = store.params();
  params.push_back(&x);
  const auto r = testkit::grad_check(params, [&](nn::Graph<double>& g) {
    return nn::ops::dot_with(g, se_forward(g, g.parameter(x), se), c);
  });
  EXPECT_LT(r.rel_norm, 1e-6);
  EXPECT_EQ(r.entries, 2u * 8 * 2 + 2 + 8 + 144);
}

TEST(SeBlock, ScalesChannelsIntoUnitInterval) {
  std::mt19937_64 rng(4);
  nn::ParameterStore<double> store;
  Builder<double> b{store, rng};
  const auto se = make_se(b, "se", 4, 2);
  nn::Graph<double> g;
  nn::Tensor<double> x({1, 4, 2, 2}, 1.0);
  const auto& y = g.value(se_forward(g, g.input(x), se));
  for (double v : y.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Vit, PatchCounts) {
  EXPECT_EQ(patch_count(512, 32), 256);
  EXPECT_EQ(patch_count(576, 16), 1296);
  EXPECT_EQ(patch_count(224, 32), 49);
  EXPECT_ERROR_KIND(patch_count(100, 16), ErrorKind::kPatch);
  ViTConfig v;
  v.patch = 12;
  EXPECT_ERROR_KIND(v.validate(), ErrorKind::kPatch);
}

TEST(Vit, PatchifyLayoutAndRoundTrip) {
  const int S = 4, P = 2;
  std::vector<float> img(3 * S * S);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i);
  const auto patches = patchify(img.data(), S, P);
  ASSERT_EQ(patches.size(), img.size());
  // Patch 1 is the top-right block; its first values are channel 0 rows 0-1, cols 2-3.
  const float* p1 = patches.data() + 3 * P * P;
  EXPECT_EQ(p1[0], 2);
  EXPECT_EQ(p1[1], 3);
  EXPECT_EQ(p1[2], 6);
  EXPECT_EQ(p1[3], 7);
  EXPECT_EQ(p1[4], 18);  // channel 1
  EXPECT_EQ(unpatchify(patches, S, P), img);
}

TEST(Vit, NoConvFeatureMap) {
  auto m = build_model<float>(spec("vit", "mini"), 1);
  nn::Graph<float> g;
  Var last;
  const Var x = g.input(nn::Tensor<float>({1, 3, 64, 64}));
  EXPECT_ERROR_KIND(m->features(g, x, &last), ErrorKind::kUnsupportedArchitecture);
  nn::Graph<float> g2;
  EXPECT_ERROR_KIND(m->features(g2, g2.input(nn::Tensor<float>({1, 3, 32, 32}))), ErrorKind::kShape);
}

TEST(Model, LogitIsLinearInFeatures) {
  for (const auto& s : {spec("xception", "mini", true), spec("residual", "mini"), spec("vit", "mini")}) {
    const auto h = build_backbone(s, 5);
    h.model->reset_head(9);
    std::mt19937_64 rng(1);
    nn::Tensor<float> x({2, 3, 64, 64});
    std::uniform_real_distribution<float> u(0, 1);
    for (auto& v : x.values()) v = u(rng);
    const auto f = forward_features(h, x);
    const auto z = forward_logits(h, x);
    const int M = h.feature_dim();
    ASSERT_EQ(f.size(), 2u * M);
    const auto& head = h.model->head_layer();
    for (int b = 0; b < 2; ++b) {
      double acc = head.b->value[0];
      for (int m = 0; m < M; ++m) acc += static_cast<double>(head.w->value[m]) * f[b * M + m];
      EXPECT_NEAR(z[b], acc, 1e-4 * (1 + std::abs(acc))) << s.family;
    }
  }
}

TEST(Model, SeededAndFingerprinted) {
  const auto s = spec("xception", "mini");
  const auto a = build_backbone(s, 3), b = build_backbone(s, 3), c = build_backbone(s, 4);
  EXPECT_EQ(a.fingerprint, b.fingerprint);
  EXPECT_EQ(a.fingerprint, spec_fingerprint(s));
  EXPECT_NE(spec_fingerprint(spec("xception", "mini", true)), a.fingerprint);
  const auto pa = a.model->store().params(), pb = b.model->store().params(), pc = c.model->store().params();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value.storage(), pb[i]->value.storage());
    differs |= pa[i]->value.storage() != pc[i]->value.storage();
  }
  EXPECT_TRUE(differs);
}

TEST(ModelSpecJson, RoundTripAndErrors) {
  ModelSpec s = spec("vit", "mini");
  s.vit.patch = 8;
  nlohmann::json j = s;
  EXPECT_EQ(j.get<ModelSpec>(), s);
  EXPECT_ERROR_KIND((nlohmann::json{{"family", "lstm"}}.get<ModelSpec>().validate()), ErrorKind::kConfig);
  EXPECT_ERROR_KIND((nlohmann::json{{"family", "xception"}, {"depth", 3}}.get<ModelSpec>()), ErrorKind::kConfig);
  EXPECT_ERROR_KIND(spec("vit", "mini", true).validate(), ErrorKind::kConfig);
}
