#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

namespace cpmerge::stats {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Wilson score interval for a binomial proportion (z = 1.96 by default).
inline Interval wilson_interval(std::size_t hits, std::size_t total, double z = 1.96) {
  if (total == 0) return {0.0, 1.0};
  const double n = static_cast<double>(total);
  const double p = static_cast<double>(hits) / n;
  const double z2 = z * z;
  const double center = (p + z2 / (2 * n)) / (1 + z2 / n);
  const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n);
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

inline double binomial_standard_error(double p, std::size_t n) {
  return n ? std::sqrt(p * (1 - p) / static_cast<double>(n)) : 0.0;
}

/// Ranks starting at 1; ties get the average of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

struct Correlation {
  double rho = 0.0;
  double p_value = 1.0;  // two-sided, Student-t approximation
};

inline Correlation spearman(std::span<const double> x, std::span<const double> y) {
  Correlation out;
  if (x.size() != y.size() || x.size() < 3) return out;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  out.rho = pearson(rx, ry);
  const double n = static_cast<double>(x.size());
  if (std::abs(out.rho) >= 1.0) {
    out.p_value = 0.0;
    return out;
  }
  const double t = out.rho * std::sqrt((n - 2) / (1 - out.rho * out.rho));
  boost::math::students_t dist(n - 2);
  out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  return out;
}

}  // namespace cpmerge::stats
