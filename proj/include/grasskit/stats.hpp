// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "grasskit/core.hpp"

namespace grasskit {

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
  return 0.5 * (v[mid - 1] + hi);
}

// Pearson correlation, population convention. Returns NaN when either side
// has zero variance; callers decide how to treat degenerate points.
inline double pearson(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("pearson: need two equal-length series");
  }
  const double xm = x.mean();
  const double ym = y.mean();
  const Eigen::VectorXd cx = x.array() - xm;
  const Eigen::VectorXd cy = y.array() - ym;
  const double sxx = cx.squaredNorm();
  const double syy = cy.squaredNorm();
  if (sxx == 0.0 || syy == 0.0) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return cx.dot(cy) / std::sqrt(sxx * syy);
}

// Ranks with ties replaced by their average rank (1-based).
inline Eigen::VectorXd average_ranks(const Eigen::VectorXd& x) {
  const Index n = x.size();
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::sort(order.begin(), order.end(),
            [&](Index a, Index b) { return x[a] < x[b]; });
  Eigen::VectorXd ranks(n);
  Index i = 0;
  while (i < n) {
    Index j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Index t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

namespace detail {

// Regularized incomplete gamma (series + continued fraction), good to ~1e-12
// over the range the chi-square tests exercise.
inline double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int n = 0; n < 500; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

// Upper tail P(X >= x) of the chi-square distribution with dof degrees of
// freedom (the p-value of a chi-square goodness-of-fit statistic).
inline double chi_square_sf(double stat, int dof) {
  if (dof <= 0) throw std::invalid_argument("chi_square_sf: dof must be > 0");
  if (stat <= 0.0) return 1.0;
  const double a = 0.5 * dof;
  const double x = 0.5 * stat;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_cf(a, x);
}

// Chi-square uniformity p-value for observed category counts.
inline double chi_square_uniform_pvalue(const std::vector<std::uint64_t>& counts) {
  if (counts.size() < 2) throw std::invalid_argument("need >= 2 categories");
  double total = 0;
  for (auto c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  if (expected <= 0) throw std::invalid_argument("empty sample");
  double stat = 0;
  for (auto c : counts) {
    const double d = static_cast<double>(c) - expected;
    stat += d * d / expected;
  }
  return chi_square_sf(stat, static_cast<int>(counts.size()) - 1);
}

}  // namespace grasskit
