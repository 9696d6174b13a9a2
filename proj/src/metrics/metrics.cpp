#include "pecad/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "pecad/core/error.hpp"

namespace pecad::metrics {

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorKind::kShape, "roc_auc: " + std::to_string(scores.size()) + " scores vs " +
                                       std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (auto l : labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorKind::kUndefinedAuc, "roc_auc: only one class present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the positive rank sum keeps midranks integral, so the result is exact.
  std::uint64_t rank_sum2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t mid2 = i + j + 1;  // 2 * mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum2 += mid2;
    i = j;
  }
  const std::uint64_t u2 = rank_sum2 - n_pos * (n_pos + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

RunAggregate aggregate_runs(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorKind::kData, "aggregate_runs: no values");
  RunAggregate r;
  r.n = static_cast<int>(values.size());
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / r.n;
  if (r.n < 2) {
    r.std = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  double ss = 0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / (r.n - 1));
  return r;
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw Error(ErrorKind::kShape, "pearson_r: need equal lengths >= 2");
  }
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) throw Error(ErrorKind::kUndefinedCorrelation, "pearson_r: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

TTestResult ttest_from_summary(double m1, double s1, int n1, double m2, double s2, int n2, bool one_tailed) {
  if (n1 < 2 || n2 < 2) throw Error(ErrorKind::kDegenerateTest, "t-test needs n >= 2 per sample");
  if (s1 < 0 || s2 < 0) throw Error(ErrorKind::kDegenerateTest, "t-test: negative standard deviation");
  if (s1 == 0 && s2 == 0) throw Error(ErrorKind::kDegenerateTest, "t-test: both standard deviations are zero");
  TTestResult r;
  r.one_tailed = one_tailed;
  r.df = n1 + n2 - 2;
  const double sp2 = ((n1 - 1) * s1 * s1 + (n2 - 1) * s2 * s2) / r.df;
  r.t = (m1 - m2) / std::sqrt(sp2 * (1.0 / n1 + 1.0 / n2));
  const boost::math::students_t dist(r.df);
  if (one_tailed) {
    r.p = boost::math::cdf(boost::math::complement(dist, r.t));
  } else {
    r.p = std::min(1.0, 2 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  }
  return r;
}

}  // namespace pecad::metrics
