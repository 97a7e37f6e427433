#pragma once

// Efficacy estimators for count outcomes: the targeted substitution (MFD)
// estimator with influence-function inference, the naive ratio estimator,
// the s-corrected naive estimator and the bounded combination of both.

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "mfd/errors.hpp"
#include "mfd/glm.hpp"
#include "mfd/stats.hpp"
#include "mfd/trial_data.hpp"

namespace mfd {

enum class Method { mfd, naive, s_corrected, bounded, cox_mfd, cox_naive, cox_bounded };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::mfd: return "mfd";
    case Method::naive: return "naive";
    case Method::s_corrected: return "s_corrected";
    case Method::bounded: return "bounded";
    case Method::cox_mfd: return "cox_mfd";
    case Method::cox_naive: return "cox_naive";
    case Method::cox_bounded: return "cox_bounded";
  }
  return "unknown";
}

struct Flags {
  bool weak_denominator = false;
  bool nonconverged_glm = false;
  bool clipped_at_bound = false;

  bool any() const noexcept { return weak_denominator || nonconverged_glm || clipped_at_bound; }

  /// Pipe-separated flag names, empty when none is set.
  std::string to_string() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += '|';
      s += name;
    };
    add(weak_denominator, "weak_denominator");
    add(nonconverged_glm, "nonconverged_glm");
    add(clipped_at_bound, "clipped_at_bound");
    return s;
  }

  Flags& operator|=(const Flags& o) noexcept {
    weak_denominator |= o.weak_denominator;
    nonconverged_glm |= o.nonconverged_glm;
    clipped_at_bound |= o.clipped_at_bound;
    return *this;
  }
};

struct Interval {
  double lower = 0.0;
  double upper = 0.0;

  bool contains(double v) const noexcept { return lower <= v && v <= upper; }
  /// Two-sided test of the null value is rejected when it lies outside.
  bool excludes(double v) const noexcept { return v < lower || v > upper; }
};

struct EfficacyEstimate {
  Method method = Method::mfd;
  double tau_hat = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  Interval ci;
  Flags flags;
};

struct InferenceOptions {
  double pz = 0.5;  // p(Z=1), known by design
  double alpha = 0.05;
  double alpha0 = 0.001;
  double alpha_tilde = 0.001;
  bool allow_nonconverged = false;  // compute anyway and flag, instead of throwing
};

inline void check_level(double a, const char* name) {
  if (!(a > 0.0 && a < 1.0)) throw ParameterError(std::string(name) + " must lie in (0,1)");
}

// ---------------------------------------------------------------------------
// Wald-type bounds

/// One-sided lower bound L_a = tau - z_{1-a} se; a = 0 gives -inf.
inline double lower_bound(double tau, double se, double a) {
  if (a <= 0.0) return -std::numeric_limits<double>::infinity();
  return tau - stats::normal_quantile(1.0 - a) * se;
}

inline double upper_bound(double tau, double se, double a) {
  if (a <= 0.0) return std::numeric_limits<double>::infinity();
  return tau + stats::normal_quantile(1.0 - a) * se;
}

/// Two-sided interval with alpha/2 in each tail.
inline Interval wald_ci(double tau, double var, double alpha) {
  if (!(var >= 0.0)) throw ParameterError("wald_ci: variance must be >= 0");
  check_level(alpha, "alpha");
  const double se = std::sqrt(var);
  return {lower_bound(tau, se, alpha / 2.0), upper_bound(tau, se, alpha / 2.0)};
}

// ---------------------------------------------------------------------------
// Working models

enum class Targeting { automatic, always, never };

/// Step-one fit mu0_hat and, for multi-site trials, the targeted update
/// mu1_hat. Evaluates both at counterfactual cells.
struct WorkingModel {
  GlmFit initial;
  std::optional<GlmFit> targeted;
  std::vector<double> prevalence;   // per site
  std::vector<double> weight;       // w = n / I_j per subject
  std::vector<double> site_mass;    // 1 / (J I_j) per subject, sums to 1

  bool converged() const { return initial.converged && (!targeted || targeted->converged); }

  /// mu0_hat(z, g, X_i) for every subject.
  Eigen::VectorXd initial_mean(const TrialDataset& ds, int z, int g) const {
    return predict_means(initial, build_design_counterfactual(ds, z, g));
  }

  /// mu0_hat(z, G_i, X_i): observed Mendelian factor, counterfactual arm.
  Eigen::VectorXd initial_mean_observed_g(const TrialDataset& ds, int z) const {
    DesignMatrix dm = build_design_initial(ds);
    std::vector<double> row(static_cast<std::size_t>(dm.cols()));
    for (Eigen::Index i = 0; i < dm.rows(); ++i) {
      const auto ui = static_cast<std::size_t>(i);
      initial_design_row(ds.covariates(ui), z, ds.g(ui), row);
      for (Eigen::Index c = 0; c < dm.cols(); ++c) dm.x(i, c) = row[static_cast<std::size_t>(c)];
    }
    return predict_means(initial, dm);
  }

  /// mu1_hat(z, g, X_i): the step-one model at (z, g) feeds the offset of
  /// the targeted model, whose clever covariates are evaluated at (z, g).
  Eigen::VectorXd final_mean(const TrialDataset& ds, int z, int g) const {
    if (!targeted) return initial_mean(ds, z, g);
    const Eigen::VectorXd eta0 = linear_predictor(initial, build_design_counterfactual(ds, z, g));
    const auto J = static_cast<Eigen::Index>(ds.num_sites());
    const double coef = targeted->beta[J + clever_index(z, g)];
    Eigen::VectorXd out(eta0.size());
    for (Eigen::Index i = 0; i < eta0.size(); ++i) {
      const auto ui = static_cast<std::size_t>(i);
      const auto j = ds.site(ui);
      const double h = clever_covariate(z, g, z, g, weight[ui], prevalence[j]);
      const double eta = eta0[i] + targeted->beta[static_cast<Eigen::Index>(j)] + coef * h;
      out[i] = std::exp(clamp_eta(eta, targeted->eta_bound));
    }
    return out;
  }
};

inline std::vector<double> site_mass(const TrialDataset& ds) {
  std::vector<double> m(ds.size());
  const double J = static_cast<double>(ds.num_sites());
  for (std::size_t i = 0; i < ds.size(); ++i) m[i] = 1.0 / (J * static_cast<double>(ds.site_sizes()[ds.site(i)]));
  return m;
}

/// Equally-site-weighted empirical mean (1/J) sum_j (1/I_j) sum_i v_ij.
inline double site_average(const std::vector<double>& mass, const Eigen::VectorXd& v) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += mass[static_cast<std::size_t>(i)] * v[i];
  return s;
}

/// Steps one and two. Step two runs iff there is more than one site, unless
/// overridden.
inline WorkingModel fit_working_models(const TrialDataset& ds, Targeting targeting = Targeting::automatic,
                                       const GlmOptions& glm = {}) {
  if (ds.kind() != OutcomeKind::count) throw ValidationError("count estimators need a count outcome");
  require_positivity(ds);
  WorkingModel m;
  m.prevalence = ds.site_prevalence();
  m.weight = site_weights(ds);
  m.site_mass = site_mass(ds);
  m.initial = fit_poisson_glm(build_design_initial(ds), ds.outcomes(), glm);
  const bool run_step2 =
      targeting == Targeting::always || (targeting == Targeting::automatic && ds.num_sites() > 1);
  if (run_step2 && m.initial.converged)
    m.targeted = fit_poisson_glm(build_design_targeting(ds, m.initial), ds.outcomes(), glm);
  return m;
}

// ---------------------------------------------------------------------------
// Cell means and point estimates

struct MuEstimates {
  CellValues cell{};  // mu_zg(P_n), [z][g]
  double mu1 = 0.0;   // mu_11 - mu_10
  double mu0 = 0.0;   // mu_01 - mu_00

  static MuEstimates from_cells(const CellValues& c) {
    return {c, c[1][1] - c[1][0], c[0][1] - c[0][0]};
  }
};

inline MuEstimates estimate_mu(const TrialDataset& ds, const WorkingModel& model) {
  if (!model.converged()) throw EstimationError("working model did not converge");
  CellValues c{};
  for (int z = 0; z < 2; ++z)
    for (int g = 0; g < 2; ++g) c[z][g] = site_average(model.site_mass, model.final_mean(ds, z, g));
  return MuEstimates::from_cells(c);
}

/// 1 - mu1 / mu0. Throws when mu0 is exactly zero.
inline double mfd_tau(const MuEstimates& mu) {
  if (mu.mu0 == 0.0) throw EstimationError("mfd: denominator mu_01 - mu_00 is zero");
  return 1.0 - mu.mu1 / mu.mu0;
}

/// Denominator guard: |mu0| below 1e-8 times the mean outcome.
inline bool weak_denominator(double denominator, double mean_outcome) {
  return std::abs(denominator) < 1e-8 * mean_outcome;
}

struct NaiveMeans {
  double m1 = 0.0;  // P_n mu0_hat(1, G, X)
  double m0 = 0.0;  // P_n mu0_hat(0, G, X)
};

inline NaiveMeans naive_means(const TrialDataset& ds, const WorkingModel& model) {
  if (!model.initial.converged) throw EstimationError("initial working model did not converge");
  return {site_average(model.site_mass, model.initial_mean_observed_g(ds, 1)),
          site_average(model.site_mass, model.initial_mean_observed_g(ds, 0))};
}

inline double naive_tau(const NaiveMeans& m) {
  if (m.m0 == 0.0) throw EstimationError("naive: placebo-arm mean is zero");
  return 1.0 - m.m1 / m.m0;
}

inline double naive_tau(const TrialDataset& ds, const WorkingModel& model) {
  return naive_tau(naive_means(ds, model));
}

// ---------------------------------------------------------------------------
// Influence functions and variances

struct InfluenceValues {
  std::array<Eigen::VectorXd, 4> phi;  // index 2*z + g
  std::vector<double> site_mass;       // 1 / (J I_j)

  const Eigen::VectorXd& cell(int z, int g) const { return phi[static_cast<std::size_t>(2 * z + g)]; }
  Eigen::VectorXd& cell(int z, int g) { return phi[static_cast<std::size_t>(2 * z + g)]; }
  Eigen::VectorXd phi_z(int z) const { return cell(z, 1) - cell(z, 0); }
};

/// phi_zg(O) = 1(Z=z)1(G=g)(Y - mu1_hat(z,g,X)) / (q_j(g) q(z)) + mu1_hat(z,g,X) - mu_zg.
inline InfluenceValues influence_values(const TrialDataset& ds, const WorkingModel& model, const MuEstimates& mu,
                                        double pz = 0.5) {
  check_level(pz, "p(Z=1)");
  const auto prev = ds.site_prevalence();
  for (std::size_t j = 0; j < prev.size(); ++j)
    if (prev[j] <= 0.0 || prev[j] >= 1.0)
      throw ValidationError("positivity violated: site '" + ds.site_label(j) + "' prevalence is 0 or 1");
  InfluenceValues iv;
  iv.site_mass = model.site_mass;
  const auto n = static_cast<Eigen::Index>(ds.size());
  for (int z = 0; z < 2; ++z)
    for (int g = 0; g < 2; ++g) {
      const Eigen::VectorXd fitted = model.final_mean(ds, z, g);
      const double qz = z == 1 ? pz : 1.0 - pz;
      Eigen::VectorXd& phi = iv.cell(z, g);
      phi.resize(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const double qg = g == 1 ? prev[ds.site(ui)] : 1.0 - prev[ds.site(ui)];
        const double ind = (ds.z(ui) == z && ds.g(ui) == g) ? 1.0 : 0.0;
        phi[i] = ind * (ds.outcomes()[ui] - fitted[i]) / (qg * qz) + fitted[i] - mu.cell[z][g];
      }
    }
  return iv;
}

namespace detail {
/// Delta-method variance of 1 - a/b from influence values of a and b,
/// sum_i mass_i^2 {psi_b mu_a/mu_b^2 - psi_a/mu_b}^2.
inline double ratio_variance(const std::vector<double>& mass, const Eigen::VectorXd& psi_a,
                             const Eigen::VectorXd& psi_b, double a, double b) {
  double v = 0.0;
  for (Eigen::Index i = 0; i < psi_a.size(); ++i) {
    const double m = mass[static_cast<std::size_t>(i)];
    const double t = psi_b[i] * a / (b * b) - psi_a[i] / b;
    v += m * m * t * t;
  }
  return v;
}
}  // namespace detail

/// Plug-in variance of tau_hat. For a single site (or equal site sizes) this
/// is (1/n^2) sum_i {phi_0 mu1/mu0^2 - phi_1/mu0}^2.
inline double variance_mfd(const InfluenceValues& iv, const MuEstimates& mu) {
  if (mu.mu0 == 0.0) throw EstimationError("variance: mu0 is zero");
  return detail::ratio_variance(iv.site_mass, iv.phi_z(1), iv.phi_z(0), mu.mu1, mu.mu0);
}

/// Variance of the naive estimator, treating G as a covariate: influence
/// values of m_z = P_n mu0_hat(z,G,X), centred, through the ratio delta method.
inline double variance_naive(const TrialDataset& ds, const WorkingModel& model, const NaiveMeans& m, double pz = 0.5) {
  check_level(pz, "p(Z=1)");
  std::array<Eigen::VectorXd, 2> psi;
  const double mz[2] = {m.m0, m.m1};
  for (int z = 0; z < 2; ++z) {
    const Eigen::VectorXd fitted = model.initial_mean_observed_g(ds, z);
    const double qz = z == 1 ? pz : 1.0 - pz;
    psi[z].resize(fitted.size());
    for (Eigen::Index i = 0; i < fitted.size(); ++i) {
      const auto ui = static_cast<std::size_t>(i);
      const double ind = ds.z(ui) == z ? 1.0 : 0.0;
      psi[z][i] = ind * (ds.outcomes()[ui] - fitted[i]) / qz + fitted[i] - mz[z];
    }
    psi[z].array() -= site_average(model.site_mass, psi[z]);
  }
  if (m.m0 == 0.0) throw EstimationError("naive variance: placebo-arm mean is zero");
  return detail::ratio_variance(model.site_mass, psi[1], psi[0], m.m1, m.m0);
}

// ---------------------------------------------------------------------------
// Bounded estimator

struct BoundedTau {
  double value = 0.0;
  bool clipped = false;
};

/// min(1, max(tau_hat, L_{0, alpha_tilde})).
inline BoundedTau bounded_tau(double tau_mfd, const EfficacyEstimate& naive, double alpha_tilde) {
  check_level(alpha_tilde, "alpha_tilde");
  const double lower = lower_bound(naive.tau_hat, naive.se, alpha_tilde);
  const double v = std::min(1.0, std::max(tau_mfd, lower));
  return {v, v != tau_mfd};
}

struct BoundedInterval {
  Interval ci;
  bool collapsed = false;  // the intersection was empty
};

/// [max{L_{alpha/2 - alpha0}, L_{0, alpha0}}, min{1, U_{alpha/2}}]. An empty
/// intersection collapses to the point min(lower, 1).
inline BoundedInterval bounded_interval(const EfficacyEstimate& mfd, const EfficacyEstimate& naive, double alpha,
                                        double alpha0) {
  check_level(alpha, "alpha");
  if (alpha0 < 0.0 || alpha0 > alpha / 2.0) throw ParameterError("alpha0 must lie in [0, alpha/2]");
  const double lo_mfd = lower_bound(mfd.tau_hat, mfd.se, alpha / 2.0 - alpha0);
  const double lo_naive = lower_bound(naive.tau_hat, naive.se, alpha0);
  BoundedInterval out;
  out.ci = {std::max(lo_mfd, lo_naive), std::min(1.0, upper_bound(mfd.tau_hat, mfd.se, alpha / 2.0))};
  if (out.ci.lower > out.ci.upper) {
    out.collapsed = true;
    out.ci.lower = out.ci.upper = std::min(out.ci.lower, 1.0);
  }
  return out;
}

inline Interval bounded_ci(const EfficacyEstimate& mfd, const EfficacyEstimate& naive, double alpha, double alpha0) {
  return bounded_interval(mfd, naive, alpha, alpha0).ci;
}

inline EfficacyEstimate bounded_estimate(const EfficacyEstimate& mfd, const EfficacyEstimate& naive,
                                         const InferenceOptions& opt, Method method = Method::bounded) {
  EfficacyEstimate out;
  out.method = method;
  const auto t = bounded_tau(mfd.tau_hat, naive, opt.alpha_tilde);
  const auto ci = bounded_interval(mfd, naive, opt.alpha, opt.alpha0);
  out.tau_hat = t.value;
  out.se = mfd.se;
  out.ci = ci.ci;
  out.flags = mfd.flags;
  out.flags |= naive.flags;
  out.flags.clipped_at_bound = t.clipped || ci.collapsed;
  return out;
}

// ---------------------------------------------------------------------------
// s-corrected estimator

/// Known specificity or a (1 - beta) confidence interval for it.
using Specificity = std::variant<double, Interval>;

inline EfficacyEstimate s_corrected(const EfficacyEstimate& naive, const Specificity& s, double alpha,
                                    double beta = 0.05) {
  check_level(alpha, "alpha");
  EfficacyEstimate out;
  out.method = Method::s_corrected;
  out.flags = naive.flags;
  auto check_s = [](double v) {
    if (!(v > 0.0 && v <= 1.0)) throw ParameterError("specificity must lie in (0, 1]");
  };
  if (const double* known = std::get_if<double>(&s)) {
    check_s(*known);
    out.tau_hat = naive.tau_hat / *known;
    out.se = naive.se / *known;
    const Interval base = wald_ci(naive.tau_hat, naive.se * naive.se, alpha);
    out.ci = {base.lower / *known, base.upper / *known};
    return out;
  }
  const Interval set = std::get<Interval>(s);
  check_s(set.lower);
  check_s(set.upper);
  if (set.lower > set.upper) throw ParameterError("specificity interval must have lower <= upper");
  check_level(beta, "beta");
  if (alpha + beta >= 1.0) throw ParameterError("alpha + beta must be below 1");
  const double mid = 0.5 * (set.lower + set.upper);
  out.tau_hat = naive.tau_hat / mid;
  out.se = naive.se / mid;
  // Endpoints L/s and U/s are monotone in s, so the union over the set is
  // spanned by its extremes.
  const Interval base = wald_ci(naive.tau_hat, naive.se * naive.se, alpha + beta);
  out.ci = {std::min(base.lower / set.lower, base.lower / set.upper),
            std::max(base.upper / set.lower, base.upper / set.upper)};
  return out;
}

// ---------------------------------------------------------------------------
// Full count-outcome pipeline

struct CountEstimates {
  WorkingModel model;
  MuEstimates mu;
  NaiveMeans naive_means;
  EfficacyEstimate mfd;
  EfficacyEstimate naive;
  EfficacyEstimate bounded;
};

inline CountEstimates estimate_count(const TrialDataset& ds, const InferenceOptions& opt = {},
                                     Targeting targeting = Targeting::automatic) {
  check_level(opt.alpha, "alpha");
  CountEstimates out;
  out.model = fit_working_models(ds, targeting);
  Flags base;
  if (!out.model.converged()) {
    if (!opt.allow_nonconverged) throw EstimationError("Poisson working model did not converge");
    base.nonconverged_glm = true;
    out.model.initial.converged = true;  // evaluate the last iterate
    if (out.model.targeted) out.model.targeted->converged = true;
  }
  const double mean_y = stats::mean(ds.outcomes());

  out.mu = estimate_mu(ds, out.model);
  out.mfd.method = Method::mfd;
  out.mfd.flags = base;
  out.mfd.flags.weak_denominator = weak_denominator(out.mu.mu0, mean_y);
  out.mfd.tau_hat = mfd_tau(out.mu);
  const auto iv = influence_values(ds, out.model, out.mu, opt.pz);
  const double var = variance_mfd(iv, out.mu);
  out.mfd.se = std::sqrt(var);
  out.mfd.ci = wald_ci(out.mfd.tau_hat, var, opt.alpha);

  out.naive_means = naive_means(ds, out.model);
  out.naive.method = Method::naive;
  out.naive.flags = base;
  out.naive.flags.weak_denominator = weak_denominator(out.naive_means.m0, mean_y);
  out.naive.tau_hat = naive_tau(out.naive_means);
  const double var0 = variance_naive(ds, out.model, out.naive_means, opt.pz);
  out.naive.se = std::sqrt(var0);
  out.naive.ci = wald_ci(out.naive.tau_hat, var0, opt.alpha);

  out.bounded = bounded_estimate(out.mfd, out.naive, opt);
  return out;
}

}  // namespace mfd
