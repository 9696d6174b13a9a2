#pragma once

#include <cstdint>
#include <span>

#include "pecad/core/error.hpp"

namespace pecad::metrics {

// Mann-Whitney AUC, ties credited 1/2. O(n log n) via midranks.
// Throws kUndefinedAuc if either class is absent, kShape on length mismatch.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct RunAggregate {
  double mean = 0;
  double std = 0;  // sample (n-1); NaN when n == 1
  int n = 0;
};

RunAggregate aggregate_runs(std::span<const double> values);

// Product-moment correlation. Throws kUndefinedCorrelation on zero variance.
double pearson_r(std::span<const double> x, std::span<const double> y);

struct TTestResult {
  double t = 0;
  double df = 0;
  double p = 1;
  bool one_tailed = false;
};

// Pooled-variance two-sample t from summary statistics. One-tailed p is
// P(T >= t), i.e. the alternative is mean1 > mean2.
TTestResult ttest_from_summary(double m1, double s1, int n1, double m2, double s2, int n2, bool one_tailed);

}  // namespace pecad::metrics
