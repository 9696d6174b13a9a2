#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pecad/metrics/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace pecad;
using metrics::roc_auc;

TEST(RocAuc, Examples) {
  EXPECT_EQ(roc_auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<std::uint8_t>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<std::uint8_t>{0, 0, 1, 1}), 0.75);
  EXPECT_EQ(roc_auc(std::vector<double>{3, 3, 3, 3, 3}, std::vector<std::uint8_t>{0, 1, 0, 1, 1}), 0.5);
}

TEST(RocAuc, Errors) {
  EXPECT_ERROR_KIND(roc_auc(std::vector<double>{1, 2}, std::vector<std::uint8_t>{1, 1}), ErrorKind::kUndefinedAuc);
  EXPECT_ERROR_KIND(roc_auc(std::vector<double>{1, 2, 3}, std::vector<std::uint8_t>{1, 0}), ErrorKind::kShape);
}

TEST(RocAuc, MatchesPairwiseOracleWithTies) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = std::uniform_int_distribution<int>(2, 200)(rng);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    std::uniform_int_distribution<int> coarse(0, 9);
    for (int i = 0; i < n; ++i) {
      s[i] = coarse(rng) / 10.0;  // heavy ties
      y[i] = static_cast<std::uint8_t>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_EQ(roc_auc(s, y), oracle::pairwise_auc(s, y));
  }
}

TEST(RocAuc, ComplementAndMonotoneInvariance) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(60), neg(60), mono(60);
    std::vector<std::uint8_t> y(60);
    for (int i = 0; i < 60; ++i) {
      s[i] = std::round(nd(rng) * 4) / 4;
      neg[i] = -s[i];
      mono[i] = std::exp(3 * s[i]) + 7;
      y[i] = i % 3 == 0;
    }
    const double a = roc_auc(s, y);
    EXPECT_NEAR(roc_auc(neg, y), 1 - a, 1e-12);
    EXPECT_EQ(roc_auc(mono, y), a);
  }
}

TEST(Aggregate, Examples) {
  auto a = metrics::aggregate_runs(std::vector<double>{0.5, 0.5, 0.5});
  EXPECT_EQ(a.mean, 0.5);
  EXPECT_EQ(a.std, 0.0);
  a = metrics::aggregate_runs(std::vector<double>{1, 2, 3});
  EXPECT_EQ(a.mean, 2.0);
  EXPECT_EQ(a.std, 1.0);
  EXPECT_EQ(a.n, 3);
  a = metrics::aggregate_runs(std::vector<double>{0.7});
  EXPECT_TRUE(std::isnan(a.std));
  EXPECT_ERROR_KIND(metrics::aggregate_runs(std::vector<double>{}), ErrorKind::kData);
}

TEST(Aggregate, TwoPassOracle) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.8, 1.0);
  std::vector<double> v(10);
  for (auto& x : v) x = u(rng);
  double mean = 0;
  for (double x : v) mean += x;
  mean /= 10;
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const auto a = metrics::aggregate_runs(v);
  EXPECT_NEAR(a.mean, mean, 1e-12);
  EXPECT_NEAR(a.std, std::sqrt(ss / 9), 1e-12);
}

TEST(Pearson, Examples) {
  const std::vector<double> x = {1, 2, 3, 4}, y = {2, 4, 5, 9};
  EXPECT_NEAR(metrics::pearson_r(x, x), 1.0, 1e-15);
  std::vector<double> negx = {-1, -2, -3, -4};
  EXPECT_NEAR(metrics::pearson_r(x, negx), -1.0, 1e-15);
  // Hand computation: mean x 2.5, mean y 5; Sxy = 11, Sxx = 5, Syy = 26.
  EXPECT_NEAR(metrics::pearson_r(x, y), 11.0 / std::sqrt(5.0 * 26.0), 1e-15);
  std::vector<double> ax(4), cy(4);
  for (int i = 0; i < 4; ++i) {
    ax[i] = 3.5 * x[i] - 2;
    cy[i] = 0.25 * y[i] + 10;
  }
  EXPECT_NEAR(metrics::pearson_r(ax, cy), metrics::pearson_r(x, y), 1e-12);
  EXPECT_ERROR_KIND(metrics::pearson_r(x, std::vector<double>{1, 1, 1, 1}), ErrorKind::kUndefinedCorrelation);
}

TEST(TTest, PublishedSummaryStatistics) {
  const auto r = metrics::ttest_from_summary(0.9634, 0.0009, 10, 0.9614, 0.0011, 10, true);
  const double sp = std::sqrt((9 * 0.0009 * 0.0009 + 9 * 0.0011 * 0.0011) / 18);
  EXPECT_NEAR(r.t, 0.002 / (sp * std::sqrt(0.2)), 1e-9);
  EXPECT_EQ(r.df, 18);
  EXPECT_NEAR(r.p, oracle::t_tail(r.t, 18), 1e-10);
  EXPECT_GE(r.p, 1.0e-4);
  EXPECT_LE(r.p, 3.0e-4);
}

TEST(TTest, ClosedFormDf2) {
  // n = 2 each: s_p = 0.1, t = 1 / (0.1 * sqrt(1)) = 10, df = 2, where
  // P(T >= t) = 1/2 - t / (2 sqrt(t^2 + 2)).
  const auto r = metrics::ttest_from_summary(1, 0.1, 2, 0, 0.1, 2, false);
  EXPECT_NEAR(r.t, 10.0, 1e-12);
  EXPECT_EQ(r.df, 2);
  EXPECT_NEAR(r.p, 2 * (0.5 - 10 / (2 * std::sqrt(102.0))), 1e-12);
}

TEST(TTest, SymmetryAndDegenerate) {
  const auto a = metrics::ttest_from_summary(0.9, 0.02, 5, 0.88, 0.03, 7, false);
  const auto b = metrics::ttest_from_summary(0.88, 0.03, 7, 0.9, 0.02, 5, false);
  EXPECT_NEAR(a.t, -b.t, 1e-12);
  EXPECT_NEAR(a.p, b.p, 1e-14);
  const auto z = metrics::ttest_from_summary(0.5, 0.1, 4, 0.5, 0.2, 4, false);
  EXPECT_EQ(z.t, 0.0);
  EXPECT_EQ(z.p, 1.0);
  for (int df : {3, 10, 40, 100}) {
    const auto r = metrics::ttest_from_summary(1.0, 0.5, df / 2 + 1, 0.7, 0.6, df - df / 2 + 1, true);
    EXPECT_NEAR(r.p, oracle::t_tail(r.t, r.df), 1e-10);
  }
  EXPECT_ERROR_KIND(metrics::ttest_from_summary(1, 0, 5, 0, 0, 5, true), ErrorKind::kDegenerateTest);
  EXPECT_ERROR_KIND(metrics::ttest_from_summary(1, 0.1, 1, 0, 0.1, 5, true), ErrorKind::kDegenerateTest);
}
