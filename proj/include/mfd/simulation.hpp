#pragma once

// Monte Carlo study of the count-outcome estimators. Each subject carries
// dependent negative-binomial counts of malaria-attributable and
// non-malaria fevers (Gaussian copula); estimators only see their sum.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "mfd/config.hpp"
#include "mfd/errors.hpp"
#include "mfd/estimators.hpp"
#include "mfd/rng.hpp"
#include "mfd/stats.hpp"
#include "mfd/survival.hpp"
#include "mfd/trial_data.hpp"

namespace mfd {

struct ScenarioConfig {
  std::string name = "scenario";
  std::size_t n = 2000;  // split equally across arms
  std::size_t sites = 1;
  double tau = 0.5;
  double nu = 0.5;
  double eta = 0.0;
  double s = 0.8;
  double p_g = 0.2;
  double rho = -0.1;
  double r = 10.0;
  double total_mean = 1.5;  // any-cause fevers per child-year, placebo arm
  double effi_sd = 0.05;    // log-sd of individual efficacies
  double noise_sd = 0.05;   // log-sd of the heterogeneity terms
  double x_coef_m = 0.05;   // covariate loading, malaria mean
  double x_coef_nm = 0.075; // covariate loading, non-malaria mean
  std::size_t n_sim = 500;
  std::uint64_t seed = 20240601;
  double alpha = 0.05;
  double alpha0 = 0.001;
  double alpha_tilde = 0.001;

  /// Throws ValidationError on any violated invariant.
  void check() const {
    auto fail = [](const std::string& m) { throw ValidationError("scenario: " + m); };
    if (n < 8 || n % 2 != 0) fail("n must be an even number >= 8");
    if (sites < 1) fail("J must be >= 1");
    if (!(s > 0.0 && s <= 1.0)) fail("s must lie in (0, 1]");
    if (!(p_g > 0.0 && p_g < 1.0)) fail("p_g must lie in (0, 1)");
    if (!(rho > -1.0 && rho < 1.0)) fail("rho must lie in (-1, 1)");
    if (!(r > 0.0)) fail("r must be > 0");
    if (!(tau < 1.0 && nu < 1.0 && eta < 1.0)) fail("tau, nu and eta must be < 1");
    if (!(total_mean > 0.0)) fail("total_mean must be > 0");
    if (effi_sd < 0.0 || noise_sd < 0.0) fail("standard deviations must be >= 0");
    if (n_sim < 1) fail("n_sim must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) fail("alpha must lie in (0, 1)");
    if (!(alpha0 >= 0.0 && alpha0 <= alpha / 2.0)) fail("alpha0 must lie in [0, alpha/2]");
    if (!(alpha_tilde > 0.0 && alpha_tilde < 1.0)) fail("alpha_tilde must lie in (0, 1)");
  }

  InferenceOptions inference() const {
    InferenceOptions o;
    o.alpha = alpha;
    o.alpha0 = alpha0;
    o.alpha_tilde = alpha_tilde;
    return o;
  }
};

inline ScenarioConfig parse_scenario(const KeyValues& kv) {
  kv.restrict_to({"outcome", "name", "n", "J", "tau", "nu", "eta", "s", "p_g", "rho", "r", "total_mean", "effi_sd",
                  "noise_sd", "x_coef_m", "x_coef_nm", "n_sim", "seed", "alpha", "alpha0", "alpha_tilde"});
  ScenarioConfig c;
  kv.read("name", c.name);
  kv.read("n", c.n);
  kv.read("J", c.sites);
  kv.read("tau", c.tau);
  kv.read("nu", c.nu);
  kv.read("eta", c.eta);
  kv.read("s", c.s);
  kv.read("p_g", c.p_g);
  kv.read("rho", c.rho);
  kv.read("r", c.r);
  kv.read("total_mean", c.total_mean);
  kv.read("effi_sd", c.effi_sd);
  kv.read("noise_sd", c.noise_sd);
  kv.read("x_coef_m", c.x_coef_m);
  kv.read("x_coef_nm", c.x_coef_nm);
  kv.read("n_sim", c.n_sim);
  kv.read("seed", c.seed);
  kv.read("alpha", c.alpha);
  kv.read("alpha0", c.alpha0);
  kv.read("alpha_tilde", c.alpha_tilde);
  if (c.name.find(',') != std::string::npos) throw ValidationError("scenario: name must not contain commas");
  c.check();
  return c;
}

inline ScenarioConfig parse_scenario(std::istream& in) { return parse_scenario(KeyValues::parse(in)); }

inline void write_scenario(const ScenarioConfig& c, std::ostream& out) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "name = " << c.name << "\n"
      << "n = " << c.n << "\n"
      << "J = " << c.sites << "\n"
      << "tau = " << num(c.tau) << "\n"
      << "nu = " << num(c.nu) << "\n"
      << "eta = " << num(c.eta) << "\n"
      << "s = " << num(c.s) << "\n"
      << "p_g = " << num(c.p_g) << "\n"
      << "rho = " << num(c.rho) << "\n"
      << "r = " << num(c.r) << "\n"
      << "total_mean = " << num(c.total_mean) << "\n"
      << "effi_sd = " << num(c.effi_sd) << "\n"
      << "noise_sd = " << num(c.noise_sd) << "\n"
      << "x_coef_m = " << num(c.x_coef_m) << "\n"
      << "x_coef_nm = " << num(c.x_coef_nm) << "\n"
      << "n_sim = " << c.n_sim << "\n"
      << "seed = " << c.seed << "\n"
      << "alpha = " << num(c.alpha) << "\n"
      << "alpha0 = " << num(c.alpha0) << "\n"
      << "alpha_tilde = " << num(c.alpha_tilde) << "\n";
}

// ---------------------------------------------------------------------------
// Calibration

struct Rates {
  double kappa = 0.0;  // placebo, g = 0 malaria-attributable mean
  double phi = 0.0;    // placebo non-malaria mean
};

/// Solves placebo total mean = total_mean and placebo malaria share = s:
/// kappa = s total_mean / (1 - p_g nu), phi = (1 - s) total_mean.
inline Rates calibrate_rates(const ScenarioConfig& c) {
  const double denom = 1.0 - c.p_g * c.nu;
  if (!(denom > 0.0)) throw ParameterError("calibration: 1 - p_g nu must be positive");
  return {c.s * c.total_mean / denom, (1.0 - c.s) * c.total_mean};
}

/// Expected cell means mu_zg for the calibrated model (all lognormal and
/// covariate terms have mean one).
inline CellValues analytic_cell_means(const ScenarioConfig& c, const Rates& rates) {
  CellValues m{};
  for (int z = 0; z < 2; ++z)
    for (int g = 0; g < 2; ++g)
      m[z][g] = rates.kappa * std::pow(1.0 - c.tau, z) * std::pow(1.0 - c.nu, g) +
                rates.phi * std::pow(1.0 - c.eta, z);
  return m;
}

// ---------------------------------------------------------------------------
// Negative binomial via Gaussian copula

inline constexpr double kQuantileCap = 1.0 - 1e-12;

/// Smallest k with F(k) >= u for NB(mean mu, size r), variance mu + mu^2/r,
/// found by accumulating the pmf. u beyond the cap returns the cap quantile.
inline int nb_quantile(double u, double mu, double r) {
  if (mu <= 0.0) return 0;
  const double target = std::min(u, kQuantileCap);
  const double q = mu / (r + mu);
  double pmf = std::exp(r * std::log(r / (r + mu)));
  double cdf = pmf;
  int k = 0;
  while (cdf < target) {
    pmf *= (k + r) / (k + 1.0) * q;
    ++k;
    cdf += pmf;
    if (pmf == 0.0 && cdf < target) break;  // cdf saturated below target in floating point
  }
  return k;
}

struct CountPair {
  int malaria = 0;
  int other = 0;
};

/// Correlated standard normals (rho) mapped through Phi and the NB quantiles.
template <typename Rng>
CountPair nb_copula_pair(double mu_m, double mu_nm, double r, double rho, Rng& rng) {
  std::normal_distribution<double> normal;
  const double z1 = normal(rng);
  const double e = normal(rng);
  const double z2 = rho * z1 + std::sqrt(1.0 - rho * rho) * e;
  return {nb_quantile(stats::normal_cdf(z1), mu_m, r), nb_quantile(stats::normal_cdf(z2), mu_nm, r)};
}

// ---------------------------------------------------------------------------
// Subjects and trials

namespace tag {
inline constexpr std::uint64_t g = 1, x = 2, nu = 3, tau = 4, eps_m = 5, eps_nm = 6, copula = 7;
}

struct SimulatedSubject {
  SubjectRecord record;
  double mu_m = 0.0;
  double mu_nm = 0.0;
  int y_m = 0;
  int y_nm = 0;
};

/// Draws one subject in arm z. Every random quantity comes from its own
/// stream keyed by (seed, replication, subject, tag).
inline SimulatedSubject draw_subject(const ScenarioConfig& c, const Rates& rates, int z, std::uint64_t replication,
                                     std::uint64_t subject) {
  auto stream = [&](std::uint64_t t) { return make_stream(c.seed, replication, subject, t); };
  auto mean_one_lognormal = [&](std::uint64_t t, double sd) {
    auto rng = stream(t);
    std::normal_distribution<double> normal;
    return std::exp(sd * normal(rng) - 0.5 * sd * sd);
  };

  SimulatedSubject s;
  s.record.z = z;
  auto rg = stream(tag::g);
  s.record.g = rg.uniform_open() < c.p_g ? 1 : 0;
  auto rx = stream(tag::x);
  std::normal_distribution<double> normal;
  const double x = normal(rx);
  s.record.covariates = {x};

  const double one_minus_nu = (1.0 - c.nu) * mean_one_lognormal(tag::nu, c.effi_sd);
  const double one_minus_tau = (1.0 - c.tau) * mean_one_lognormal(tag::tau, c.effi_sd);
  const double xm = std::exp(c.x_coef_m * x - 0.5 * c.x_coef_m * c.x_coef_m);
  const double xnm = std::exp(c.x_coef_nm * x - 0.5 * c.x_coef_nm * c.x_coef_nm);
  const double eps_m = mean_one_lognormal(tag::eps_m, c.noise_sd);
  const double eps_nm = mean_one_lognormal(tag::eps_nm, c.noise_sd);

  s.mu_m = rates.kappa * (s.record.g ? one_minus_nu : 1.0) * (z ? one_minus_tau : 1.0) * xm * eps_m;
  s.mu_nm = rates.phi * (z ? 1.0 - c.eta : 1.0) * xnm * eps_nm;
  auto rc = stream(tag::copula);
  const auto pair = nb_copula_pair(s.mu_m, s.mu_nm, c.r, c.rho, rc);
  s.y_m = pair.malaria;
  s.y_nm = pair.other;
  s.record.y = static_cast<double>(s.y_m + s.y_nm);
  return s;
}

struct SimulatedTrial {
  TrialDataset data;
  std::vector<int> y_m;   // latent, never passed to estimators
  std::vector<int> y_nm;  // latent
};

/// Subject i is in arm i % 2 and site (i / 2) % sites.
inline SimulatedTrial simulate_trial(const ScenarioConfig& c, const Rates& rates, std::uint64_t replication) {
  SimulatedTrial t{TrialDataset(OutcomeKind::count, 1), {}, {}};
  t.data.reserve(c.n);
  t.y_m.reserve(c.n);
  t.y_nm.reserve(c.n);
  for (std::size_t i = 0; i < c.n; ++i) {
    auto s = draw_subject(c, rates, static_cast<int>(i % 2), replication, i);
    s.record.site = std::to_string((i / 2) % c.sites + 1);
    t.data.add(s.record);
    t.y_m.push_back(s.y_m);
    t.y_nm.push_back(s.y_nm);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Replications and study summaries

inline constexpr std::array<Method, 3> kStudyMethods{Method::mfd, Method::naive, Method::bounded};

struct ReplicationResult {
  std::size_t index = 0;
  bool failed = false;
  std::string failure;
  std::array<EfficacyEstimate, 3> estimates;  // in kStudyMethods order
};

inline ReplicationResult run_replication(const ScenarioConfig& c, const Rates& rates, std::size_t index) {
  ReplicationResult res;
  res.index = index;
  for (std::size_t k = 0; k < kStudyMethods.size(); ++k) res.estimates[k].method = kStudyMethods[k];
  try {
    const auto trial = simulate_trial(c, rates, index);
    const auto est = estimate_count(trial.data, c.inference());
    res.estimates = {est.mfd, est.naive, est.bounded};
  } catch (const ValidationError& e) {
    res.failed = true;
    res.failure = e.what();
  } catch (const EstimationError& e) {
    res.failed = true;
    res.failure = e.what();
  }
  return res;
}

struct EstimatorSummary {
  Method method = Method::mfd;
  std::size_t used = 0;
  double mean = 0.0;
  double median = 0.0;
  double bias = 0.0;           // mean - tau
  double prop_abs_bias = 0.0;  // |mean - tau| / |tau|, NaN when tau = 0
  double rmse = 0.0;
  double rmse_trimmed = 0.0;   // central 95% of estimates
  double coverage = 0.0;
  double power = 0.0;          // CI excludes 0
};

struct SimSummary {
  std::size_t replications = 0;
  std::size_t failed = 0;
  std::vector<EstimatorSummary> estimators;
};

/// Aggregates successful replications against the true value tau.
inline SimSummary summarize(const std::vector<ReplicationResult>& reps, double tau,
                            const std::array<Method, 3>& methods = kStudyMethods) {
  SimSummary out;
  out.replications = reps.size();
  for (const auto& r : reps) out.failed += r.failed;
  if (out.failed == out.replications) throw EstimationError("every replication failed");
  for (std::size_t k = 0; k < methods.size(); ++k) {
    EstimatorSummary e;
    e.method = methods[k];
    std::vector<double> est;
    double sq = 0.0;
    std::size_t covered = 0, rejected = 0;
    for (const auto& r : reps) {
      if (r.failed) continue;
      const auto& x = r.estimates[k];
      est.push_back(x.tau_hat);
      sq += (x.tau_hat - tau) * (x.tau_hat - tau);
      covered += x.ci.contains(tau);
      rejected += x.ci.excludes(0.0);
    }
    e.used = est.size();
    const double m = static_cast<double>(e.used);
    e.mean = stats::mean(est);
    e.bias = e.mean - tau;
    e.prop_abs_bias = tau != 0.0 ? std::abs(e.bias) / std::abs(tau) : std::nan("");
    e.rmse = std::sqrt(sq / m);
    e.coverage = static_cast<double>(covered) / m;
    e.power = static_cast<double>(rejected) / m;
    std::sort(est.begin(), est.end());
    e.median = stats::quantile_sorted(est, 0.5);
    const auto trim = static_cast<std::size_t>(std::floor(0.025 * m));
    double tsq = 0.0;
    for (std::size_t i = trim; i < est.size() - trim; ++i) tsq += (est[i] - tau) * (est[i] - tau);
    e.rmse_trimmed = std::sqrt(tsq / static_cast<double>(est.size() - 2 * trim));
    out.estimators.push_back(e);
  }
  return out;
}

/// Evaluates fn(0..count-1) on up to `jobs` threads; slot i always holds
/// fn(i), so the result does not depend on scheduling.
template <typename Fn>
auto run_parallel(std::size_t count, unsigned jobs, Fn fn) {
  std::vector<decltype(fn(std::size_t{0}))> out(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) out[i] = fn(i);
  };
  jobs = static_cast<unsigned>(std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(count, 1)));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < jobs; ++t) pool.emplace_back(worker);
  }
  return out;
}

struct StudyResult {
  ScenarioConfig config;
  Rates rates;
  std::vector<ReplicationResult> replications;  // ordered by index
  SimSummary summary;
};

/// Runs n_sim replications on `jobs` threads. Results depend only on the
/// configuration, not on the thread count.
inline StudyResult run_study(const ScenarioConfig& c, unsigned jobs = 1) {
  c.check();
  StudyResult out;
  out.config = c;
  out.rates = calibrate_rates(c);
  out.replications = run_parallel(c.n_sim, jobs, [&](std::size_t i) { return run_replication(c, out.rates, i); });
  out.summary = summarize(out.replications, c.tau);
  return out;
}

// ---------------------------------------------------------------------------
// Output tables

inline std::string format_value(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline constexpr const char* kSummaryHeader =
    "scenario,estimator,n,J,nu,s,tau,eta,n_sim,n_used,n_failed,mean,median,bias,prop_abs_bias,rmse,"
    "rmse_trimmed,coverage,power";

inline void write_summary_rows(const StudyResult& st, std::ostream& out) {
  const auto& c = st.config;
  for (const auto& e : st.summary.estimators) {
    out << c.name << ',' << to_string(e.method) << ',' << c.n << ',' << c.sites << ',' << format_value(c.nu) << ','
        << format_value(c.s) << ',' << format_value(c.tau) << ',' << format_value(c.eta) << ','
        << st.summary.replications << ',' << e.used << ',' << st.summary.failed << ',' << format_value(e.mean)
        << ',' << format_value(e.median) << ',' << format_value(e.bias) << ',' << format_value(e.prop_abs_bias)
        << ',' << format_value(e.rmse) << ',' << format_value(e.rmse_trimmed) << ',' << format_value(e.coverage)
        << ',' << format_value(e.power) << '\n';
  }
}

inline void write_summary_csv(const StudyResult& st, std::ostream& out) {
  out << kSummaryHeader << '\n';
  write_summary_rows(st, out);
}

inline constexpr const char* kReplicationHeader =
    "scenario,replication,estimator,status,tau_hat,se,ci_lower,ci_upper,flags";

inline void write_replication_rows(const std::string& name, const std::vector<ReplicationResult>& reps,
                                   std::ostream& out) {
  for (const auto& r : reps)
    for (const auto& e : r.estimates) {
      out << name << ',' << r.index << ',' << to_string(e.method) << ',';
      if (r.failed) {
        out << "failed,NA,NA,NA,NA,\n";
        continue;
      }
      out << "ok," << format_value(e.tau_hat) << ',' << format_value(e.se) << ',' << format_value(e.ci.lower) << ','
          << format_value(e.ci.upper) << ',' << e.flags.to_string() << '\n';
    }
}

inline void write_replications_csv(const StudyResult& st, std::ostream& out) {
  out << kReplicationHeader << '\n';
  write_replication_rows(st.config.name, st.replications, out);
}

// ---------------------------------------------------------------------------
// Time-to-first-fever studies

struct SurvivalStudyConfig {
  std::string name = "survival";
  SurvivalScenario scenario;
  std::size_t n_sim = 200;
  double alpha = 0.05;
  double alpha0 = 0.001;
  double alpha_tilde = 0.001;

  InferenceOptions inference() const {
    InferenceOptions o;
    o.alpha = alpha;
    o.alpha0 = alpha0;
    o.alpha_tilde = alpha_tilde;
    return o;
  }
};

inline SurvivalStudyConfig parse_survival_scenario(const KeyValues& kv) {
  kv.restrict_to({"outcome", "name", "baseline_hazard", "kappa", "phi", "tau", "nu", "eta", "horizon", "p_g",
                  "beta_x", "n", "seed", "n_sim", "alpha", "alpha0", "alpha_tilde"});
  SurvivalStudyConfig c;
  auto& s = c.scenario;
  kv.read("name", c.name);
  kv.read("baseline_hazard", s.baseline_hazard);
  kv.read("kappa", s.kappa);
  kv.read("phi", s.phi);
  kv.read("tau", s.tau);
  kv.read("nu", s.nu);
  kv.read("eta", s.eta);
  kv.read("horizon", s.horizon);
  kv.read("p_g", s.p_g);
  kv.read("beta_x", s.beta_x);
  kv.read("n", s.n);
  kv.read("seed", s.seed);
  kv.read("n_sim", c.n_sim);
  kv.read("alpha", c.alpha);
  kv.read("alpha0", c.alpha0);
  kv.read("alpha_tilde", c.alpha_tilde);
  if (c.name.find(',') != std::string::npos) throw ValidationError("scenario: name must not contain commas");
  if (c.n_sim < 1) throw ValidationError("scenario: n_sim must be >= 1");
  try {
    s.check();
    check_level(c.alpha, "alpha");
    check_level(c.alpha_tilde, "alpha_tilde");
    if (!(c.alpha0 >= 0.0 && c.alpha0 <= c.alpha / 2.0)) throw ParameterError("alpha0 must lie in [0, alpha/2]");
  } catch (const ParameterError& e) {
    throw ValidationError(std::string("scenario: ") + e.what());
  }
  return c;
}

inline constexpr std::array<Method, 3> kSurvivalMethods{Method::cox_mfd, Method::cox_naive, Method::cox_bounded};

inline ReplicationResult run_survival_replication(const SurvivalStudyConfig& c, std::size_t index) {
  ReplicationResult res;
  res.index = index;
  for (std::size_t k = 0; k < kSurvivalMethods.size(); ++k) res.estimates[k].method = kSurvivalMethods[k];
  try {
    const auto est = estimate_survival(simulate_survival(c.scenario, index), c.inference());
    res.estimates = {est.mfd, est.naive, est.bounded};
  } catch (const ValidationError& e) {
    res.failed = true;
    res.failure = e.what();
  } catch (const EstimationError& e) {
    res.failed = true;
    res.failure = e.what();
  }
  return res;
}

struct SurvivalStudyResult {
  SurvivalStudyConfig config;
  std::vector<ReplicationResult> replications;
  SimSummary summary;
};

inline SurvivalStudyResult run_survival_study(const SurvivalStudyConfig& c, unsigned jobs = 1) {
  SurvivalStudyResult out;
  out.config = c;
  out.replications = run_parallel(c.n_sim, jobs, [&](std::size_t i) { return run_survival_replication(c, i); });
  out.summary = summarize(out.replications, c.scenario.tau, kSurvivalMethods);
  return out;
}

/// Same columns as the count summary; J is 1 and s is not defined.
inline void write_summary_csv(const SurvivalStudyResult& st, std::ostream& out) {
  out << kSummaryHeader << '\n';
  const auto& c = st.config;
  for (const auto& e : st.summary.estimators) {
    out << c.name << ',' << to_string(e.method) << ',' << c.scenario.n << ",1," << format_value(c.scenario.nu)
        << ",NA," << format_value(c.scenario.tau) << ',' << format_value(c.scenario.eta) << ','
        << st.summary.replications << ',' << e.used << ',' << st.summary.failed << ',' << format_value(e.mean)
        << ',' << format_value(e.median) << ',' << format_value(e.bias) << ',' << format_value(e.prop_abs_bias)
        << ',' << format_value(e.rmse) << ',' << format_value(e.rmse_trimmed) << ',' << format_value(e.coverage)
        << ',' << format_value(e.power) << '\n';
  }
}

inline void write_replications_csv(const SurvivalStudyResult& st, std::ostream& out) {
  out << kReplicationHeader << '\n';
  write_replication_rows(st.config.name, st.replications, out);
}

}  // namespace mfd
