#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include <boost/math/distributions/normal.hpp>

namespace mfd::stats {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Standard normal quantile, p in (0, 1).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal_quantile: p must be in (0,1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Linear-interpolation sample quantile (Hyndman-Fan type 7) of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double prob) {
  if (sorted.empty()) return std::nan("");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> v, double prob) {
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, prob);
}

}  // namespace mfd::stats
