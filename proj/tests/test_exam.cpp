#include <gtest/gtest.h>

#include <algorithm>

#include "pecad/core/io.hpp"
#include "pecad/exam/exam_level.hpp"
#include "pecad/metrics/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace pecad;
using namespace pecad::exam;

namespace {

FeatureSequence random_features(int n, int m, std::mt19937_64& rng, const std::string& id = "e") {
  FeatureSequence f{id, n, m, std::vector<float>(static_cast<std::size_t>(n) * m), "fp"};
  std::normal_distribution<float> nd;
  for (auto& v : f.values) v = nd(rng);
  return f;
}

ExamHeadConfig mil(const std::string& mode, int L = 16) {
  ExamHeadConfig c;
  c.kind = "mil";
  c.mode = mode;
  c.attn_hidden = L;
  return c;
}

ExamHeadConfig cc(int k, int hidden) {
  ExamHeadConfig c;
  c.kind = "cc";
  c.k = k;
  c.hidden = hidden;
  return c;
}

std::vector<float> head_logits(const ExamHead<float>& head, const FeatureSequence& f, std::vector<float>* attn = nullptr) {
  Graph<float> g;
  Var a;
  const Var z = head.logits(g, g.input(head.prepare(f)), &a);
  if (attn && a.valid()) *attn = std::vector<float>(g.value(a).values().begin(), g.value(a).values().end());
  return {g.value(z).values().begin(), g.value(z).values().end()};
}

}  // namespace

TEST(Resample, Examples) {
  const std::vector<double> x = {0, 10, 20};  // N=3, M=1
  EXPECT_EQ(resample_to_k(x.data(), 3, 1, 5), (std::vector<double>{0, 5, 10, 15, 20}));
  EXPECT_EQ(resample_to_k(x.data(), 3, 1, 2), (std::vector<double>{0, 20}));
  EXPECT_EQ(resample_to_k(x.data(), 3, 1, 3), x);
  const std::vector<double> one = {7, -1};
  EXPECT_EQ(resample_to_k(one.data(), 1, 2, 3), (std::vector<double>{7, -1, 7, -1, 7, -1}));
  EXPECT_ERROR_KIND(resample_to_k(x.data(), 3, 1, 1), ErrorKind::kConfig);
}

TEST(Resample, MatchesOracle) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(1, 300)(rng);
    const int k = std::uniform_int_distribution<int>(2, 256)(rng);
    const int m = std::uniform_int_distribution<int>(1, 6)(rng);
    std::vector<double> x(static_cast<std::size_t>(n) * m);
    for (auto& v : x) v = nd(rng);
    const auto got = resample_to_k(x.data(), n, m, k);
    const auto want = oracle::resample(x, n, m, k);
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12) << n << "->" << k;
    // Endpoints are copied exactly.
    for (int c = 0; c < m; ++c) {
      EXPECT_EQ(got[c], x[c]);
      EXPECT_EQ(got[static_cast<std::size_t>(k - 1) * m + c], x[static_cast<std::size_t>(n - 1) * m + c]);
    }
  }
}

TEST(Mil, PoolingExamples) {
  Graph<double> g;
  const Var h = g.input(Tensor<double>({3, 2}, std::vector<double>{1, 5, 4, 2, 0, 3}));
  EXPECT_EQ(g.value(mil_pool(g, h, "MP", {}, {})).storage(), (std::vector<double>{4, 5}));
  // V = 0 makes every score equal, so AP is the plain mean.
  const Var V = g.input(Tensor<double>({2, 2}));
  const Var w = g.input(Tensor<double>({2}, 1.0));
  Var a;
  const auto& ap = g.value(mil_pool(g, h, "AP", V, w, &a));
  EXPECT_NEAR(ap[0], 5.0 / 3, 1e-15);
  EXPECT_NEAR(ap[1], 10.0 / 3, 1e-15);
  for (double v : g.value(a).values()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
  const auto& amp = g.value(mil_pool(g, h, "AMP", V, w));
  EXPECT_EQ(amp.shape(), (nn::Shape{1, 4}));
  EXPECT_EQ(amp[0], 4.0);
  EXPECT_EQ(amp[1], 5.0);
  EXPECT_NEAR(amp[2], 5.0 / 3, 1e-15);
  EXPECT_ERROR_KIND(mil_pool(g, h, "AP", {}, {}), ErrorKind::kConfig);
  EXPECT_ERROR_KIND(mil_pool(g, h, "LSE", V, w), ErrorKind::kConfig);
}

TEST(Mil, PermutationInvarianceAndSimplex) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(1, 64)(rng);
    const int m = std::uniform_int_distribution<int>(4, 128)(rng);
    const auto f = random_features(n, m, rng);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    FeatureSequence p = f;
    for (int i = 0; i < n; ++i) std::copy_n(f.row(perm[i]), m, p.values.data() + static_cast<std::size_t>(i) * m);
    for (const std::string mode : {"MP", "AP", "AMP"}) {
      const ExamHead<float> head(mil(mode), m, trial);
      std::vector<float> attn;
      const auto z = head_logits(head, f, &attn);
      const auto zp = head_logits(head, p);
      for (int l = 0; l < data::kNumLabels; ++l) ASSERT_NEAR(z[l], zp[l], 1e-5) << mode << " n=" << n;
      if (mode != "MP") {
        double s = 0;
        for (float a : attn) {
          EXPECT_GE(a, 0.0f);
          s += a;
        }
        ASSERT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(Mil, AmpWithApHalfZeroedEqualsMp) {
  std::mt19937_64 rng(5);
  const int m = 6;
  const auto f = random_features(9, m, rng);
  ExamHead<float> amp(mil("AMP"), m, 1), mp(mil("MP"), m, 2);
  // Copy the MP half of the AMP classifier into the MP head; zero the AP half.
  auto& wa = amp.fc_weight().value;
  auto& wm = mp.fc_weight().value;
  for (int l = 0; l < data::kNumLabels; ++l)
    for (int c = 0; c < 2 * m; ++c) {
      if (c < m) wm[l * m + c] = wa[l * 2 * m + c];
      else wa[l * 2 * m + c] = 0;
    }
  mp.fc_bias().value = amp.fc_bias().value;
  const auto za = head_logits(amp, f), zm = head_logits(mp, f);
  for (int l = 0; l < data::kNumLabels; ++l) EXPECT_NEAR(za[l], zm[l], 1e-6);
}

TEST(Cc, ZeroWeightsGiveBias) {
  std::mt19937_64 rng(6);
  ExamHead<float> head(cc(12, 4), 5, 3);
  head.fc_weight().value.fill(0);
  for (int l = 0; l < data::kNumLabels; ++l) head.fc_bias().value[l] = 0.25f * l;
  for (int n : {1, 7, 30}) {
    const auto z = head_logits(head, random_features(n, 5, rng));
    for (int l = 0; l < data::kNumLabels; ++l) EXPECT_EQ(z[l], 0.25f * l);
  }
}

TEST(HeadsGrad, CcAndAttention) {
  std::mt19937_64 rng(7);
  nn::Tensor<double> c({1, data::kNumLabels});
  testkit::fill_normal(c, rng);
  for (const auto& cfg : {cc(6, 3), mil("AP", 4), mil("AMP", 4)}) {
    ExamHead<double> head(cfg, 5, 11);
    for (auto* p : head.store().params()) testkit::fill_normal(p->value, rng, 0.5);
    nn::Parameter<double> x{"x", nn::Tensor<double>({cfg.kind == "cc" ? 6 : 7, 5}), {}};
    testkit::fill_normal(x.value, rng);
    auto params = head.store().params();
    params.push_back(&x);
    const auto r = testkit::grad_check(params, [&](Graph<double>& g) {
      return nn::ops::dot_with(g, head.logits(g, g.parameter(x)), c);
    });
    EXPECT_LT(r.rel_norm, 1e-6) << cfg.kind << cfg.mode;
  }
}

TEST(Standardization, FittedOnTrainingRows) {
  ExamHead<float> head(mil("MP"), 2, 0);
  FeatureSequence a{"a", 2, 2, {1, 10, 3, 10}, "fp"}, b{"b", 2, 2, {5, 14, 7, 14}, "fp"};
  head.fit_standardization({&a, &b});
  const auto t = head.prepare(a);
  // Column 0: mean 4, std sqrt(5); column 1: mean 12, std 2.
  EXPECT_NEAR(t[0], (1 - 4) / std::sqrt(5.0), 1e-5);
  EXPECT_NEAR(t[1], (10 - 12) / 2.0, 1e-5);
  FeatureSequence wrong{"w", 1, 3, {0, 0, 0}, "fp"};
  EXPECT_ERROR_KIND(head.fit_standardization({&a, &wrong}), ErrorKind::kData);
}

TEST(Evaluate, PerLabelOracleAndUndefined) {
  std::mt19937_64 rng(8);
  std::vector<ExamSample> samples;
  std::vector<ExamPrediction> preds;
  std::uniform_real_distribution<double> u;
  for (int i = 0; i < 20; ++i) {
    ExamSample s;
    s.features = random_features(2, 3, rng, "e" + std::to_string(i));
    for (int l = 0; l < data::kNumLabels; ++l) s.labels.flags[l] = l == 1 ? 0 : (i + l) % 3 == 0;
    ExamPrediction p;
    p.exam_id = s.features.exam_id;
    for (auto& v : p.prob) v = u(rng);
    samples.push_back(s);
    preds.push_back(p);
  }
  const auto ev = evaluate_predictions(preds, samples);
  double sum = 0;
  for (int l = 0; l < data::kNumLabels; ++l) {
    if (l == 1) {
      EXPECT_TRUE(std::isnan(ev.auc[l]));
      continue;
    }
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (int i = 0; i < 20; ++i) {
      s.push_back(preds[i].prob[l]);
      y.push_back(samples[i].labels.flags[l]);
    }
    EXPECT_EQ(ev.auc[l], metrics::roc_auc(s, y));
    sum += ev.auc[l];
  }
  EXPECT_NEAR(ev.mean, sum / 8, 1e-15);
  ASSERT_EQ(ev.warnings.size(), 1u);
  EXPECT_NE(ev.warnings[0].find("indeterminate"), std::string::npos);
}

TEST(Training, LearnsSeparableBagsAndIsDeterministic) {
  // Label l is set when any instance has feature l above 2.
  std::mt19937_64 rng(9);
  auto make = [&](int count, const std::string& tag) {
    std::vector<ExamSample> out;
    for (int i = 0; i < count; ++i) {
      ExamSample s;
      s.features = random_features(std::uniform_int_distribution<int>(3, 8)(rng), data::kNumLabels, rng,
                                   tag + std::to_string(i));
      for (auto& v : s.features.values) v *= 0.5f;
      for (int l = 0; l < data::kNumLabels; ++l)
        if (rng() % 2) {
          s.features.values[(rng() % s.features.n) * data::kNumLabels + l] = 3.0f;
          s.labels.flags[l] = 1;
        }
      out.push_back(s);
    }
    return out;
  };
  const auto train = make(60, "t"), val = make(30, "v");
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 8;
  tc.lr = 1e-2;
  tc.patience = 30;
  for (const auto& cfg : {mil("MP"), mil("AMP"), cc(8, 8)}) {
    ExamHead<float> a(cfg, data::kNumLabels, 1), b(cfg, data::kNumLabels, 1);
    const auto ha = train_exam_classifier(a, train, val, tc);
    train_exam_classifier(b, train, val, tc);
    EXPECT_EQ(a.store().flatten(), b.store().flatten());
    const auto ev = evaluate_exam_level(a, val);
    EXPECT_NEAR(ev.mean, ha.val_auc[ha.best_epoch], 1e-12);
    EXPECT_GT(ev.mean, 0.9) << cfg.kind << cfg.mode;
  }
}

TEST(Io, PredsHeaderAndHeadRoundTrip) {
  const auto dir = testkit::scratch_dir("exam_io");
  std::mt19937_64 rng(10);
  ExamHead<float> head(mil("AP"), 4, 2);
  std::vector<ExamSample> s = {{random_features(3, 4, rng, "a"), {}}, {random_features(2, 4, rng, "b"), {}}};
  const auto preds = predict_exams(head, s);
  ASSERT_EQ(preds[0].attention.size(), 3u);
  write_exam_preds(preds, dir / "p.csv");
  const auto rows = io::read_csv(dir / "p.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].size(), 1u + data::kNumLabels + 3);
  EXPECT_EQ(rows[0][1], "negative_exam_for_pe");
  EXPECT_EQ(rows[0][11], "attn_1");
  EXPECT_EQ(rows[2][12], "");  // shorter bag leaves the column empty

  save_head(head, {}, dir / "head");
  ExamHead<float> back(mil("AP"), 4, 99);
  load_head_values(back, dir / "head");
  EXPECT_EQ(back.store().flatten(), head.store().flatten());
  ExamHead<float> other(mil("MP"), 4, 0);
  EXPECT_ERROR_KIND(load_head_values(other, dir / "head"), ErrorKind::kIncompatibleCheckpoint);
}

TEST(Training, MixedFeatureDimsRejected) {
  std::mt19937_64 rng(11);
  ExamHead<float> head(mil("MP"), 4, 0);
  std::vector<ExamSample> s = {{random_features(3, 4, rng, "a"), {}}, {random_features(2, 5, rng, "b"), {}}};
  EXPECT_ERROR_KIND(train_exam_classifier(head, s, {}, TrainConfig{}), ErrorKind::kData);
}
