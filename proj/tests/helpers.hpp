#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mfd/simulation.hpp"
#include "mfd/trial_data.hpp"

namespace mfd::test {

inline SubjectRecord count_record(std::string site, int z, int g, std::vector<double> x, double y) {
  SubjectRecord r;
  r.site = std::move(site);
  r.z = z;
  r.g = g;
  r.covariates = std::move(x);
  r.y = y;
  return r;
}

/// Count dataset with no covariates from per-cell outcome lists.
inline TrialDataset cells_dataset(const std::vector<double>& y11, const std::vector<double>& y10,
                                  const std::vector<double>& y01, const std::vector<double>& y00,
                                  const std::string& site = "1") {
  TrialDataset ds(OutcomeKind::count, 0);
  for (double y : y11) ds.add(count_record(site, 1, 1, {}, y));
  for (double y : y10) ds.add(count_record(site, 1, 0, {}, y));
  for (double y : y01) ds.add(count_record(site, 0, 1, {}, y));
  for (double y : y00) ds.add(count_record(site, 0, 0, {}, y));
  return ds;
}

/// Small random count dataset with d covariates; every cell of every site
/// is occupied.
inline TrialDataset random_dataset(std::size_t n, std::size_t sites, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  TrialDataset ds(OutcomeKind::count, d);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i % sites;
    const std::size_t k = i / sites;
    const int z = static_cast<int>(k % 2);
    const int g = k < 4 ? static_cast<int>((k / 2) % 2) : (std::uniform_real_distribution<double>()(rng) < 0.3);
    std::vector<double> x(d);
    for (auto& v : x) v = normal(rng);
    const double mu = std::exp(0.3 - 0.4 * z - 0.3 * g + (d ? 0.2 * x[0] : 0.0));
    std::poisson_distribution<int> pois(mu);
    ds.add(count_record("s" + std::to_string(j + 1), z, g, x, pois(rng)));
  }
  return ds;
}

/// One simulated count trial of the default scenario.
inline TrialDataset simulated_dataset(std::size_t n, std::uint64_t seed, std::size_t sites = 1, double tau = 0.5,
                                      double nu = 0.5, double s = 0.8) {
  ScenarioConfig c;
  c.n = n;
  c.sites = sites;
  c.tau = tau;
  c.nu = nu;
  c.s = s;
  c.seed = seed;
  return simulate_trial(c, calibrate_rates(c), 0).data;
}

inline double relative_difference(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace mfd::test
