#pragma once

// Time to first fever under proportional hazards. The any-cause hazard is
// lambda(t) exp{alpha + omega z + gamma g + iota z*g + beta'X}; efficacy is
// recovered from (omega, gamma, iota) and its variance by the delta method.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "mfd/errors.hpp"
#include "mfd/estimators.hpp"
#include "mfd/rng.hpp"
#include "mfd/trial_data.hpp"

namespace mfd {

struct CoxOptions {
  int max_iterations = 50;
  double score_tolerance = 1e-9;  // multiplied by the number of events
  int max_step_halvings = 30;
};

struct CoxFit {
  double omega = 0.0;  // Z
  double gamma = 0.0;  // G
  double iota = 0.0;   // Z x G
  Eigen::VectorXd beta_x;
  Eigen::VectorXd coefficients;  // (omega, gamma, iota, beta_x...)
  Eigen::MatrixXd info;          // observed information of the partial likelihood
  double log_partial_likelihood = 0.0;
  double max_abs_score = 0.0;
  std::size_t events = 0;
  int iterations = 0;
  bool converged = false;
  bool monotone_likelihood = false;  // some (z,g) cell has no events
};

/// Row of the Cox design: z, g, z*g, x_1..x_d.
inline Eigen::MatrixXd cox_design(const TrialDataset& ds) {
  const auto n = static_cast<Eigen::Index>(ds.size());
  const auto d = static_cast<Eigen::Index>(ds.num_covariates());
  Eigen::MatrixXd x(n, 3 + d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    x(i, 0) = ds.z(ui);
    x(i, 1) = ds.g(ui);
    x(i, 2) = ds.z(ui) * ds.g(ui);
    for (Eigen::Index k = 0; k < d; ++k) x(i, 3 + k) = ds.covariate(ui, static_cast<std::size_t>(k));
  }
  return x;
}

struct PartialLikelihood {
  double value = 0.0;
  Eigen::VectorXd score;
  Eigen::MatrixXd info;
};

/// Breslow log partial likelihood, score and observed information. Subjects
/// tied at an event time share one risk set.
inline PartialLikelihood breslow_partial_likelihood(const Eigen::MatrixXd& x, std::span<const double> time,
                                                    std::span<const int> event, const Eigen::VectorXd& beta,
                                                    bool with_derivatives = true) {
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return time[static_cast<std::size_t>(a)] > time[static_cast<std::size_t>(b)];
  });

  const Eigen::VectorXd eta = x * beta;
  const double shift = n > 0 ? eta.maxCoeff() : 0.0;

  PartialLikelihood pl;
  pl.score = Eigen::VectorXd::Zero(p);
  pl.info = Eigen::MatrixXd::Zero(p, p);
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);

  std::size_t k = 0;
  while (k < order.size()) {
    const double t = time[static_cast<std::size_t>(order[k])];
    std::size_t end = k;
    double n_events = 0.0;
    Eigen::VectorXd x_events = Eigen::VectorXd::Zero(p);
    double eta_events = 0.0;
    while (end < order.size() && time[static_cast<std::size_t>(order[end])] == t) {
      const Eigen::Index i = order[end];
      const double r = std::exp(eta[i] - shift);
      s0 += r;
      if (with_derivatives) {
        s1.noalias() += r * x.row(i).transpose();
        s2.noalias() += r * x.row(i).transpose() * x.row(i);
      }
      if (event[static_cast<std::size_t>(i)] == 1) {
        n_events += 1.0;
        eta_events += eta[i];
        if (with_derivatives) x_events += x.row(i).transpose();
      }
      ++end;
    }
    if (n_events > 0.0) {
      pl.value += eta_events - n_events * (shift + std::log(s0));
      if (with_derivatives) {
        const Eigen::VectorXd xbar = s1 / s0;
        pl.score += x_events - n_events * xbar;
        pl.info += n_events * (s2 / s0 - xbar * xbar.transpose());
      }
    }
    k = end;
  }
  return pl;
}

/// Maximum partial likelihood by Newton-Raphson with step halving.
inline CoxFit fit_cox(const TrialDataset& ds, const CoxOptions& opt = {}) {
  if (ds.kind() != OutcomeKind::survival) throw ValidationError("fit_cox needs a survival outcome");
  require_positivity(ds);
  const Eigen::MatrixXd x = cox_design(ds);
  const auto time = ds.times();
  const auto event = ds.events();

  CoxFit fit;
  std::array<std::array<std::size_t, 2>, 2> cell_events{};
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (event[i] == 1) {
      ++fit.events;
      ++cell_events[ds.z(i)][ds.g(i)];
    }
  if (fit.events == 0) throw EstimationError("fit_cox: no events");
  for (const auto& row : cell_events)
    for (auto c : row) fit.monotone_likelihood |= (c == 0);

  const double tol = opt.score_tolerance * static_cast<double>(fit.events);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.cols());
  PartialLikelihood pl = breslow_partial_likelihood(x, time, event, beta);
  for (int it = 1; it <= opt.max_iterations; ++it) {
    fit.iterations = it;
    fit.max_abs_score = pl.score.cwiseAbs().maxCoeff();
    if (fit.max_abs_score < tol) {
      fit.converged = true;
      break;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(pl.info);
    if (ldlt.info() != Eigen::Success) break;
    Eigen::VectorXd step = ldlt.solve(pl.score);
    if (!step.allFinite()) break;
    Eigen::VectorXd candidate = beta + step;
    PartialLikelihood next = breslow_partial_likelihood(x, time, event, candidate);
    // rounding slack: near the maximum the gain is below the resolution of the sum
    const double floor = pl.value - 1e-12 * (std::abs(pl.value) + 1.0);
    for (int h = 0; h < opt.max_step_halvings && !(std::isfinite(next.value) && next.value >= floor); ++h) {
      step *= 0.5;
      candidate = beta + step;
      next = breslow_partial_likelihood(x, time, event, candidate);
    }
    if (!(std::isfinite(next.value) && next.value >= floor)) break;
    beta = candidate;
    pl = std::move(next);
  }
  fit.max_abs_score = pl.score.cwiseAbs().maxCoeff();
  if (!fit.converged && fit.max_abs_score < tol) fit.converged = true;

  fit.coefficients = beta;
  fit.omega = beta[0];
  fit.gamma = beta[1];
  fit.iota = beta[2];
  fit.beta_x = beta.tail(beta.size() - 3);
  fit.info = pl.info;
  fit.log_partial_likelihood = pl.value;
  return fit;
}

// ---------------------------------------------------------------------------
// Efficacy from hazard coefficients

inline constexpr double kCoxWeakFactorGuard = 1e-6;

/// 1 - (e^{omega+gamma+iota} - e^omega) / (e^gamma - 1).
inline double cox_mfd_tau(double omega, double gamma, double iota) {
  const double denom = std::expm1(gamma);
  if (denom == 0.0) throw EstimationError("cox_mfd: gamma is zero, Mendelian factor carries no information");
  return 1.0 - std::exp(omega) * std::expm1(gamma + iota) / denom;
}

inline double cox_mfd_tau(const CoxFit& fit) { return cox_mfd_tau(fit.omega, fit.gamma, fit.iota); }

inline bool cox_weak_factor(const CoxFit& fit) { return std::abs(std::expm1(fit.gamma)) <= kCoxWeakFactorGuard; }

/// Analytic gradient of tau with respect to (omega, gamma, iota).
inline Eigen::Vector3d cox_tau_gradient(double omega, double gamma, double iota) {
  const double d = std::expm1(gamma);
  const double num = std::exp(omega) * std::expm1(gamma + iota);
  const double top = std::exp(omega + gamma + iota);
  return {-num / d, -(top * d - num * std::exp(gamma)) / (d * d), -top / d};
}

namespace detail {
inline Eigen::MatrixXd inverse_information(const Eigen::MatrixXd& info) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(info);
  if (!lu.isInvertible()) throw EstimationError("partial-likelihood information is singular");
  return lu.inverse();
}
}  // namespace detail

/// grad' V grad with V the (omega, gamma, iota) block of the inverse information.
inline double cox_mfd_variance(const CoxFit& fit) {
  if (!fit.converged) throw EstimationError("cox_mfd_variance: fit did not converge");
  const Eigen::Matrix3d v = detail::inverse_information(fit.info).topLeftCorner<3, 3>();
  const Eigen::Vector3d g = cox_tau_gradient(fit.omega, fit.gamma, fit.iota);
  return std::max(0.0, g.dot(v * g));
}

/// 1 - e^omega; consistent for a convex combination of tau and eta.
inline double cox_naive_tau(const CoxFit& fit) { return -std::expm1(fit.omega); }

inline double cox_naive_variance(const CoxFit& fit) {
  const double v = detail::inverse_information(fit.info)(0, 0);
  return std::exp(2.0 * fit.omega) * v;
}

inline EfficacyEstimate cox_bounded(const EfficacyEstimate& mfd_est, const EfficacyEstimate& naive_est, double alpha,
                                    double alpha0, double alpha_tilde) {
  InferenceOptions opt;
  opt.alpha = alpha;
  opt.alpha0 = alpha0;
  opt.alpha_tilde = alpha_tilde;
  return bounded_estimate(mfd_est, naive_est, opt, Method::cox_bounded);
}

struct SurvivalEstimates {
  CoxFit fit;
  EfficacyEstimate mfd;
  EfficacyEstimate naive;
  EfficacyEstimate bounded;
};

inline SurvivalEstimates estimate_survival(const TrialDataset& ds, const InferenceOptions& opt = {}) {
  check_level(opt.alpha, "alpha");
  SurvivalEstimates out;
  out.fit = fit_cox(ds);
  if (!out.fit.converged && !opt.allow_nonconverged) throw EstimationError("Cox fit did not converge");
  Flags base;
  base.nonconverged_glm = !out.fit.converged;

  out.mfd.method = Method::cox_mfd;
  out.mfd.flags = base;
  out.mfd.flags.weak_denominator = cox_weak_factor(out.fit);
  out.mfd.tau_hat = cox_mfd_tau(out.fit);
  const Eigen::Matrix3d v = detail::inverse_information(out.fit.info).topLeftCorner<3, 3>();
  const Eigen::Vector3d g = cox_tau_gradient(out.fit.omega, out.fit.gamma, out.fit.iota);
  const double var = std::max(0.0, g.dot(v * g));
  out.mfd.se = std::sqrt(var);
  out.mfd.ci = wald_ci(out.mfd.tau_hat, var, opt.alpha);

  out.naive.method = Method::cox_naive;
  out.naive.flags = base;
  out.naive.tau_hat = cox_naive_tau(out.fit);
  const double var0 = cox_naive_variance(out.fit);
  out.naive.se = std::sqrt(var0);
  out.naive.ci = wald_ci(out.naive.tau_hat, var0, opt.alpha);

  out.bounded = cox_bounded(out.mfd, out.naive, opt.alpha, opt.alpha0, opt.alpha_tilde);
  return out;
}

// ---------------------------------------------------------------------------
// Scenario generation

struct CoxParameters {
  double alpha, omega, gamma, iota;
};

/// Maps cause-specific rates and efficacies onto the any-cause hazard
/// coefficients: e^alpha = kappa + phi, e^{alpha+omega} = kappa(1-tau) +
/// phi(1-eta), e^{alpha+gamma} = kappa(1-nu) + phi, e^{alpha+omega+gamma+iota}
/// = kappa(1-tau)(1-nu) + phi(1-eta).
inline CoxParameters cox_reparameterize(double kappa, double phi, double tau, double nu, double eta) {
  const double h00 = kappa + phi;
  const double h10 = kappa * (1.0 - tau) + phi * (1.0 - eta);
  const double h01 = kappa * (1.0 - nu) + phi;
  const double h11 = kappa * (1.0 - tau) * (1.0 - nu) + phi * (1.0 - eta);
  CoxParameters c;
  c.alpha = std::log(h00);
  c.omega = std::log(h10 / h00);
  c.gamma = std::log(h01 / h00);
  c.iota = std::log(h11 * h00 / (h10 * h01));
  return c;
}

struct SurvivalScenario {
  double baseline_hazard = 1.0;  // exponential rate, per year
  double kappa = 1.2;
  double phi = 0.3;
  double tau = 0.5;
  double nu = 0.5;
  double eta = 0.0;
  double horizon = 1.0;  // years of follow-up; administrative censoring
  double p_g = 0.2;
  double beta_x = 0.1;   // shared covariate log-hazard ratio
  std::size_t n = 10000;
  std::uint64_t seed = 1;

  void check() const {
    if (!(baseline_hazard > 0 && kappa > 0 && phi >= 0 && horizon > 0))
      throw ParameterError("survival scenario: rates and horizon must be positive");
    if (!(tau < 1 && nu < 1 && eta < 1)) throw ParameterError("survival scenario: efficacies must be < 1");
    if (!(p_g > 0 && p_g < 1)) throw ParameterError("survival scenario: p_g must lie in (0,1)");
    if (n < 4) throw ParameterError("survival scenario: n must be >= 4");
  }
};

namespace tag {
inline constexpr std::uint64_t surv_g = 101, surv_x = 102, surv_malaria = 103, surv_other = 104;
}

/// Latent isolated-cause times are independent exponentials given X with a
/// shared baseline; the observed time is the earliest of the two or the
/// horizon. Arms alternate so each holds n/2 subjects.
inline TrialDataset simulate_survival(const SurvivalScenario& s, std::uint64_t replication) {
  s.check();
  TrialDataset ds(OutcomeKind::survival, 1);
  ds.reserve(s.n);
  SubjectRecord rec;
  rec.site = "1";
  rec.covariates.resize(1);
  for (std::size_t i = 0; i < s.n; ++i) {
    rec.z = static_cast<int>(i % 2);
    auto rg = make_stream(s.seed, replication, i, tag::surv_g);
    rec.g = rg.uniform_open() < s.p_g ? 1 : 0;
    auto rx = make_stream(s.seed, replication, i, tag::surv_x);
    std::normal_distribution<double> normal;
    const double x = normal(rx);
    rec.covariates[0] = x;
    const double shared = s.baseline_hazard * std::exp(s.beta_x * x);
    const double rate_m = shared * s.kappa * std::pow(1.0 - s.tau, rec.z) * std::pow(1.0 - s.nu, rec.g);
    const double rate_nm = shared * s.phi * std::pow(1.0 - s.eta, rec.z);
    auto rm = make_stream(s.seed, replication, i, tag::surv_malaria);
    auto ro = make_stream(s.seed, replication, i, tag::surv_other);
    const double t_m = -std::log(rm.uniform_open()) / rate_m;
    const double t_nm = rate_nm > 0 ? -std::log(ro.uniform_open()) / rate_nm : std::numeric_limits<double>::infinity();
    const double t = std::min(t_m, t_nm);
    rec.event = t < s.horizon ? 1 : 0;
    rec.time = std::min(t, s.horizon);
    ds.add(rec);
  }
  return ds;
}

}  // namespace mfd
