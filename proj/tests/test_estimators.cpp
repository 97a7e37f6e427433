#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "mfd/estimators.hpp"

using namespace mfd;

namespace {

TrialDataset shifted(const TrialDataset& ds, double c) {
  TrialDataset out(ds.kind(), ds.num_covariates());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto r = ds.record(i);
    for (auto& v : r.covariates) v += c;
    out.add(r);
  }
  return out;
}

TrialDataset permuted(const TrialDataset& ds, std::uint64_t seed) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), std::mt19937_64(seed));
  TrialDataset out(ds.kind(), ds.num_covariates());
  for (auto i : idx) out.add(ds.record(i));
  return out;
}

EfficacyEstimate estimate(double tau, double se) {
  EfficacyEstimate e;
  e.tau_hat = tau;
  e.se = se;
  return e;
}

struct CellStats {
  double mean[2][2]{};
  int count[2][2]{};
};

CellStats cell_stats(const TrialDataset& ds) {
  CellStats s;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    s.mean[ds.z(i)][ds.g(i)] += ds.outcomes()[i];
    ++s.count[ds.z(i)][ds.g(i)];
  }
  for (int z = 0; z < 2; ++z)
    for (int g = 0; g < 2; ++g) s.mean[z][g] /= s.count[z][g];
  return s;
}

}  // namespace

TEST(Estimators, FigureTwoAlgebraGivesTau) {
  const double mu_nm = 0.8, mu_m = 1.0, tau = 0.5, nu = 0.5, eta = 0.0;
  CellValues c{};
  c[1][1] = mu_nm * (1 - eta) + mu_m * (1 - tau) * (1 - nu);
  c[1][0] = mu_nm * (1 - eta) + mu_m * (1 - tau);
  c[0][1] = mu_nm + mu_m * (1 - nu);
  c[0][0] = mu_nm + mu_m;
  const auto mu = MuEstimates::from_cells(c);
  EXPECT_EQ(mu.mu1, c[1][1] - c[1][0]);
  EXPECT_EQ(mu.mu0, c[0][1] - c[0][0]);
  EXPECT_NEAR(mfd_tau(mu), 0.5, 1e-15);
}

TEST(Estimators, MfdTauEdgeCases) {
  CellValues c{};
  c[1][1] = c[1][0] = 2.0;
  c[0][1] = 1.0;
  c[0][0] = 3.0;
  EXPECT_EQ(mfd_tau(MuEstimates::from_cells(c)), 1.0);
  c[1][1] = 1.0;
  c[1][0] = 3.0;
  EXPECT_EQ(mfd_tau(MuEstimates::from_cells(c)), 0.0);
  c[0][1] = c[0][0];
  EXPECT_THROW(mfd_tau(MuEstimates::from_cells(c)), EstimationError);
  EXPECT_TRUE(weak_denominator(1e-12, 1.5));
  EXPECT_FALSE(weak_denominator(1e-6, 1.5));
}

TEST(Estimators, SaturatedSingleSiteMatchesCellMeans) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    auto ds0 = test::simulated_dataset(800, seed);
    TrialDataset ds(OutcomeKind::count, 0);
    for (std::size_t i = 0; i < ds0.size(); ++i) ds.add(test::count_record("1", ds0.z(i), ds0.g(i), {}, ds0.outcomes()[i]));
    const auto est = estimate_count(ds);
    const auto cs = cell_stats(ds);
    for (int z = 0; z < 2; ++z)
      for (int g = 0; g < 2; ++g) EXPECT_NEAR(est.mu.cell[z][g], cs.mean[z][g], 1e-10);
    const double closed = 1.0 - (cs.mean[1][1] - cs.mean[1][0]) / (cs.mean[0][1] - cs.mean[0][0]);
    EXPECT_NEAR(est.mfd.tau_hat, closed, 1e-8);

    const double p = static_cast<double>(cs.count[0][1] + cs.count[1][1]) / ds.size();
    const double naive = 1.0 - (p * cs.mean[1][1] + (1 - p) * cs.mean[1][0]) / (p * cs.mean[0][1] + (1 - p) * cs.mean[0][0]);
    EXPECT_NEAR(est.naive.tau_hat, naive, 1e-8);
  }
}

TEST(Estimators, NaiveIsZeroWithoutEffect) {
  const auto ds = test::cells_dataset({1, 2}, {2, 1}, {0, 3}, {1, 1, 2, 2});
  EXPECT_NEAR(naive_tau(ds, fit_working_models(ds)), 0.0, 1e-12);
  EXPECT_THROW(estimate_count(ds), EstimationError);
}

TEST(Estimators, DuplicatedSitesMatchPooledEstimate) {
  const auto one = test::simulated_dataset(1000, 9);
  TrialDataset two(OutcomeKind::count, 1);
  for (const char* site : {"a", "b"})
    for (std::size_t i = 0; i < one.size(); ++i) {
      auto r = one.record(i);
      r.site = site;
      two.add(r);
    }
  const auto e1 = estimate_count(one);
  const auto e2 = estimate_count(two);
  ASSERT_TRUE(e2.model.targeted.has_value());
  EXPECT_NEAR(e1.mfd.tau_hat, e2.mfd.tau_hat, 1e-8);
  EXPECT_NEAR(e1.naive.tau_hat, e2.naive.tau_hat, 1e-8);
  // duplicating the data halves the variance
  EXPECT_NEAR(e1.mfd.se * e1.mfd.se / 2.0, e2.mfd.se * e2.mfd.se, 1e-8);
}

TEST(Estimators, CellMeansNearAnalyticValues) {
  ScenarioConfig c;
  c.n = 4000;
  c.seed = 31;
  const auto rates = calibrate_rates(c);
  const auto ds = simulate_trial(c, rates, 0).data;
  const auto truth = analytic_cell_means(c, rates);
  const auto model = fit_working_models(ds);
  const auto mu = estimate_mu(ds, model);
  const auto iv = influence_values(ds, model, mu);
  for (int z = 0; z < 2; ++z)
    for (int g = 0; g < 2; ++g) {
      double var = 0;
      for (Eigen::Index i = 0; i < iv.cell(z, g).size(); ++i)
        var += std::pow(iv.site_mass[static_cast<std::size_t>(i)] * iv.cell(z, g)[i], 2);
      EXPECT_NEAR(mu.cell[z][g], truth[z][g], 3.0 * std::sqrt(var)) << z << g;
    }
}

TEST(Estimators, InfluenceIndicatorStructure) {
  const auto ds = test::random_dataset(200, 1, 1, 12);
  const auto model = fit_working_models(ds);
  const auto mu = estimate_mu(ds, model);
  const auto iv = influence_values(ds, model, mu);
  const Eigen::VectorXd fitted00 = model.final_mean(ds, 0, 0);
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.z(i) == 1 && ds.g(i) == 1) {
      const auto r = static_cast<Eigen::Index>(i);
      EXPECT_DOUBLE_EQ(iv.cell(0, 0)[r], fitted00[r] - mu.cell[0][0]);
    }
}

TEST(Estimators, TwelveSubjectInfluenceByHand) {
  // Saturated single-site fit: mu1_hat(z,g,X) is the observed cell mean.
  const auto ds = test::cells_dataset({2, 0}, {1, 3, 2, 4}, {3, 1}, {5, 2, 4, 1});
  ASSERT_EQ(ds.size(), 12u);
  const auto model = fit_working_models(ds);
  const auto mu = estimate_mu(ds, model);
  const auto iv = influence_values(ds, model, mu);
  const double ybar[2][2] = {{3.0, 2.0}, {2.5, 1.0}};  // [z][g]
  const double p = 4.0 / 12.0;
  for (std::size_t i = 0; i < 12; ++i)
    for (int z = 0; z < 2; ++z)
      for (int g = 0; g < 2; ++g) {
        const double ind = ds.z(i) == z && ds.g(i) == g;
        const double qg = g ? p : 1 - p;
        const double want = ind * (ds.outcomes()[i] - ybar[z][g]) / (qg * 0.5);
        EXPECT_NEAR(iv.cell(z, g)[static_cast<Eigen::Index>(i)], want, 1e-10) << i << z << g;
      }
  const double m1 = ybar[1][1] - ybar[1][0], m0 = ybar[0][1] - ybar[0][0];
  double v = 0;
  for (std::size_t i = 0; i < 12; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double phi1 = iv.cell(1, 1)[r] - iv.cell(1, 0)[r];
    const double phi0 = iv.cell(0, 1)[r] - iv.cell(0, 0)[r];
    v += std::pow(phi0 * m1 / (m0 * m0) - phi1 / m0, 2);
  }
  EXPECT_NEAR(variance_mfd(iv, mu), v / 144.0, 1e-12);
}

TEST(Estimators, TargetingSolvesInfluenceEquations) {
  // Unequal sites with different prevalences.
  TrialDataset ds(OutcomeKind::count, 1);
  for (std::size_t j = 0; j < 3; ++j) {
    ScenarioConfig c;
    c.n = 400 + 300 * j;
    c.p_g = 0.15 + 0.05 * j;
    c.seed = 100 + j;
    const auto t = simulate_trial(c, calibrate_rates(c), 0).data;
    for (std::size_t i = 0; i < t.size(); ++i) {
      auto r = t.record(i);
      r.site = "site" + std::to_string(j);
      ds.add(r);
    }
  }
  const auto model = fit_working_models(ds);
  ASSERT_TRUE(model.targeted.has_value());
  const auto mu = estimate_mu(ds, model);
  const auto iv = influence_values(ds, model, mu);
  const double n = static_cast<double>(ds.size());
  for (int z = 0; z < 2; ++z)
    for (int g = 0; g < 2; ++g) {
      double pn = 0;
      for (Eigen::Index i = 0; i < iv.cell(z, g).size(); ++i)
        pn += iv.site_mass[static_cast<std::size_t>(i)] * iv.cell(z, g)[i];
      EXPECT_LT(std::abs(pn), 1e-6 * n) << z << g;
      EXPECT_LT(std::abs(pn), 1e-8) << z << g;
    }

  // Without targeting the influence equations fail to hold exactly.
  const auto untargeted = fit_working_models(ds, Targeting::never);
  const auto mu0 = estimate_mu(ds, untargeted);
  const auto iv0 = influence_values(ds, untargeted, mu0);
  double worst = 0;
  for (int k = 0; k < 4; ++k) {
    double pn = 0;
    for (Eigen::Index i = 0; i < iv0.phi[k].size(); ++i) pn += iv0.site_mass[static_cast<std::size_t>(i)] * iv0.phi[k][i];
    worst = std::max(worst, std::abs(pn));
  }
  EXPECT_GT(worst, 1e-6);
}

TEST(Estimators, SingleSiteInfluenceEquationsHoldWithoutTargeting) {
  const auto ds = test::simulated_dataset(2000, 14);
  const auto model = fit_working_models(ds);
  ASSERT_FALSE(model.targeted.has_value());
  const auto mu = estimate_mu(ds, model);
  const auto iv = influence_values(ds, model, mu);
  for (int k = 0; k < 4; ++k) EXPECT_LT(std::abs(iv.phi[k].mean()), 1e-6 * ds.size());
}

TEST(Estimators, CovariateTranslationInvariance) {
  for (std::size_t J : {1u, 3u}) {
    const auto ds = test::simulated_dataset(1500, 40 + J, J);
    const auto a = estimate_count(ds);
    const auto b = estimate_count(shifted(ds, 3.7));
    EXPECT_LT(std::abs(a.mfd.tau_hat - b.mfd.tau_hat), 1e-6);
    EXPECT_LT(std::abs(a.naive.tau_hat - b.naive.tau_hat), 1e-6);
    EXPECT_LT(std::abs(a.mfd.se - b.mfd.se), 1e-6);
  }
}

TEST(Estimators, PermutationInvariance) {
  const auto ds = test::simulated_dataset(1200, 52, 2);
  const auto a = estimate_count(ds);
  const auto b = estimate_count(permuted(ds, 5));
  EXPECT_NEAR(a.mfd.tau_hat, b.mfd.tau_hat, 1e-9);
  EXPECT_NEAR(a.mfd.se, b.mfd.se, 1e-9);
  EXPECT_NEAR(a.naive.se, b.naive.se, 1e-9);
}

TEST(Estimators, NaiveTracksSpecificityTimesTau) {
  const auto ds = test::simulated_dataset(40000, 61);
  const auto est = estimate_count(ds);
  EXPECT_NEAR(est.naive.tau_hat, 0.4, 0.03);
  EXPECT_NEAR(est.mfd.tau_hat, 0.5, 4 * est.mfd.se);
}

TEST(Wald, NormalQuantileOracle) {
  const auto ci = wald_ci(0.5, 0.01, 0.05);
  EXPECT_NEAR(ci.lower, 0.5 - 1.959964 * 0.1, 1e-6);
  EXPECT_NEAR(ci.upper, 0.5 + 1.959964 * 0.1, 1e-6);
  EXPECT_NEAR(ci.lower, 0.304, 5e-4);
  EXPECT_NEAR(ci.upper, 0.696, 5e-4);
  EXPECT_NEAR(lower_bound(0.0, 1.0, 0.001), -3.0902, 1e-4);
  const auto zero = wald_ci(0.3, 0.0, 0.05);
  EXPECT_EQ(zero.lower, 0.3);
  EXPECT_EQ(zero.upper, 0.3);
  EXPECT_EQ(lower_bound(0.3, 1.0, 0.0), -std::numeric_limits<double>::infinity());
}

TEST(Bounded, ClippingCases) {
  const auto naive = estimate(0.2, 0.0);  // L_{0, alpha_tilde} = 0.2
  EXPECT_EQ(bounded_tau(0.5, naive, 0.001).value, 0.5);
  EXPECT_FALSE(bounded_tau(0.5, naive, 0.001).clipped);
  EXPECT_EQ(bounded_tau(1.4, naive, 0.001).value, 1.0);
  EXPECT_EQ(bounded_tau(-2.0, naive, 0.001).value, 0.2);
  EXPECT_TRUE(bounded_tau(-2.0, naive, 0.001).clipped);
}

TEST(Bounded, IntervalStructure) {
  const auto mfd = estimate(0.5, 0.2);
  // alpha0 = 0: the clipped two-sided MFD interval
  const auto ci0 = bounded_ci(mfd, estimate(0.3, 0.05), 0.05, 0.0);
  const auto wald = wald_ci(0.5, 0.04, 0.05);
  EXPECT_DOUBLE_EQ(ci0.lower, wald.lower);
  EXPECT_DOUBLE_EQ(ci0.upper, std::min(1.0, wald.upper));
  // a tight naive estimate lifts the lower endpoint
  const auto naive = estimate(0.45, 0.01);
  const auto ci = bounded_ci(mfd, naive, 0.05, 0.001);
  EXPECT_DOUBLE_EQ(ci.lower, lower_bound(0.45, 0.01, 0.001));
  EXPECT_GT(ci.lower, lower_bound(0.5, 0.2, 0.024));
  EXPECT_DOUBLE_EQ(ci.upper, upper_bound(0.5, 0.2, 0.025));
  EXPECT_THROW(bounded_ci(mfd, naive, 0.05, 0.03), ParameterError);
}

TEST(Bounded, RandomisedInvariants) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-3, 3), se(0.001, 2);
  InferenceOptions opt;
  opt.alpha_tilde = opt.alpha0;
  for (int k = 0; k < 2000; ++k) {
    const auto mfd = estimate(u(rng), se(rng));
    const auto naive = estimate(0.3 * u(rng), 0.1 * se(rng));
    const double lo = lower_bound(naive.tau_hat, naive.se, opt.alpha_tilde);
    const auto t = bounded_tau(mfd.tau_hat, naive, opt.alpha_tilde);
    EXPECT_LE(t.value, 1.0);
    EXPECT_GE(t.value, std::min(lo, 1.0));
    if (mfd.tau_hat >= lo && mfd.tau_hat <= 1.0) {
      EXPECT_EQ(t.value, mfd.tau_hat);
    }
    const auto b = bounded_estimate(mfd, naive, opt);
    EXPECT_LE(b.ci.lower, b.ci.upper);
    if (!b.flags.clipped_at_bound || b.ci.lower < b.ci.upper) {
      EXPECT_LE(b.ci.lower, b.tau_hat + 1e-12);
      EXPECT_GE(b.ci.upper, b.tau_hat - 1e-12);
    }
  }
}

TEST(SCorrected, KnownSpecificity) {
  const auto naive = estimate(0.40, 0.05);
  const auto e = s_corrected(naive, 0.8, 0.05);
  EXPECT_DOUBLE_EQ(e.tau_hat, 0.5);
  EXPECT_DOUBLE_EQ(e.se, 0.0625);
  const auto same = s_corrected(naive, 1.0, 0.05);
  const auto wald = wald_ci(0.40, 0.0025, 0.05);
  EXPECT_EQ(same.tau_hat, naive.tau_hat);
  EXPECT_EQ(same.ci.lower, wald.lower);
  EXPECT_EQ(same.ci.upper, wald.upper);
  EXPECT_THROW(s_corrected(naive, 0.0, 0.05), ParameterError);
  EXPECT_THROW(s_corrected(naive, 1.2, 0.05), ParameterError);
}

TEST(SCorrected, IntervalUnionMatchesGrid) {
  for (double t0 : {0.40, -0.05}) {
    const auto naive = estimate(t0, 0.06);
    const auto e = s_corrected(naive, Interval{0.7, 0.9}, 0.05, 0.05);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int k = 0; k <= 200; ++k) {
      const double s = 0.7 + 0.001 * k;
      const auto ci = s_corrected(naive, s, 0.10).ci;
      lo = std::min(lo, ci.lower);
      hi = std::max(hi, ci.upper);
    }
    EXPECT_NEAR(e.ci.lower, lo, 1e-12);
    EXPECT_NEAR(e.ci.upper, hi, 1e-12);
  }
  const auto naive = estimate(0.40, 0.06);
  const auto wide = s_corrected(naive, Interval{0.7, 0.9}, 0.05, 0.05).ci;
  const auto at08 = s_corrected(naive, 0.8, 0.05).ci;
  EXPECT_LT(wide.lower, at08.lower);
  EXPECT_GT(wide.upper, at08.upper);
  EXPECT_THROW(s_corrected(naive, Interval{0.9, 0.7}, 0.05), ParameterError);
}
