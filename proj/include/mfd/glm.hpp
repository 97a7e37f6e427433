#pragma once

// Weighted Poisson regression with log link and offsets, fitted by
// iteratively reweighted least squares, plus the two working-model designs
// used by the targeted estimator (full Z*G*X expansion, and the site +
// clever-covariate update).

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mfd/errors.hpp"
#include "mfd/trial_data.hpp"

namespace mfd {

struct DesignMatrix {
  Eigen::MatrixXd x;
  std::vector<std::string> labels;
  Eigen::VectorXd weights;
  Eigen::VectorXd offset;  // log scale

  Eigen::Index rows() const noexcept { return x.rows(); }
  Eigen::Index cols() const noexcept { return x.cols(); }

  /// Throws ValidationError when the invariants do not hold.
  void check() const {
    if (static_cast<Eigen::Index>(labels.size()) != x.cols())
      throw ValidationError("design: one label per column required");
    if (std::set<std::string>(labels.begin(), labels.end()).size() != labels.size())
      throw ValidationError("design: column labels must be unique");
    if (weights.size() != x.rows() || offset.size() != x.rows())
      throw ValidationError("design: weights/offset length mismatch");
    if (!x.allFinite() || !offset.allFinite()) throw ValidationError("design: non-finite entry");
    if ((weights.array() <= 0.0).any() || !weights.allFinite())
      throw ValidationError("design: weights must be positive");
  }
};

// ---------------------------------------------------------------------------
// Designs

/// Writes one row of the full expansion {1, x_1..x_d} x {1, g, z, g*z}:
/// 1, x.., g, z, x..*g, x..*z, g*z, x..*g*z.
inline void initial_design_row(std::span<const double> x, int z, int g, std::span<double> row) {
  const std::size_t d = x.size();
  std::size_t c = 0;
  row[c++] = 1.0;
  for (std::size_t k = 0; k < d; ++k) row[c++] = x[k];
  row[c++] = g;
  row[c++] = z;
  for (std::size_t k = 0; k < d; ++k) row[c++] = x[k] * g;
  for (std::size_t k = 0; k < d; ++k) row[c++] = x[k] * z;
  row[c++] = static_cast<double>(g * z);
  for (std::size_t k = 0; k < d; ++k) row[c++] = x[k] * g * z;
}

inline std::vector<std::string> initial_design_labels(std::size_t d) {
  std::vector<std::string> l;
  auto xk = [](std::size_t k) { return "x" + std::to_string(k + 1); };
  l.push_back("(intercept)");
  for (std::size_t k = 0; k < d; ++k) l.push_back(xk(k));
  l.push_back("g");
  l.push_back("z");
  for (std::size_t k = 0; k < d; ++k) l.push_back(xk(k) + ":g");
  for (std::size_t k = 0; k < d; ++k) l.push_back(xk(k) + ":z");
  l.push_back("g:z");
  for (std::size_t k = 0; k < d; ++k) l.push_back(xk(k) + ":g:z");
  return l;
}

namespace detail {
inline DesignMatrix initial_design(const TrialDataset& ds, int z_override, int g_override) {
  const std::size_t d = ds.num_covariates();
  const auto n = static_cast<Eigen::Index>(ds.size());
  const auto p = static_cast<Eigen::Index>(4 * (d + 1));
  DesignMatrix dm;
  dm.x.resize(n, p);
  dm.labels = initial_design_labels(d);
  dm.weights = Eigen::VectorXd::Ones(n);
  dm.offset = Eigen::VectorXd::Zero(n);
  std::vector<double> row(static_cast<std::size_t>(p));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const int z = z_override < 0 ? ds.z(ui) : z_override;
    const int g = g_override < 0 ? ds.g(ui) : g_override;
    initial_design_row(ds.covariates(ui), z, g, row);
    for (Eigen::Index c = 0; c < p; ++c) dm.x(i, c) = row[static_cast<std::size_t>(c)];
  }
  return dm;
}
}  // namespace detail

/// Step-one design: 4(d+1) columns, unit weights, zero offsets.
inline DesignMatrix build_design_initial(const TrialDataset& ds) { return detail::initial_design(ds, -1, -1); }

/// Step-one design with every subject's (z, g) set to the given cell.
inline DesignMatrix build_design_counterfactual(const TrialDataset& ds, int z, int g) {
  return detail::initial_design(ds, z, g);
}

/// Site weight w = n / I_j for every subject.
inline std::vector<double> site_weights(const TrialDataset& ds) {
  std::vector<double> w(ds.size());
  const double n = static_cast<double>(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) w[i] = n / static_cast<double>(ds.site_sizes()[ds.site(i)]);
  return w;
}

/// Clever covariate for cell (cz, cg) evaluated at a subject with (z, g):
/// w * 1(z=cz) 1(g=cg) / p_j(G=cg).
inline double clever_covariate(int cz, int cg, int z, int g, double w, double prevalence) {
  if (z != cz || g != cg) return 0.0;
  return w / (cg == 1 ? prevalence : 1.0 - prevalence);
}

/// Index of cell (z, g) among the four clever covariates h11, h10, h01, h00.
constexpr int clever_index(int z, int g) noexcept { return 2 * (1 - z) + (1 - g); }

struct GlmFit;
inline Eigen::VectorXd linear_predictor(const GlmFit& fit, const DesignMatrix& dm);

/// Step-two design: offset log mu0_hat(Z,G,X), site indicators (no
/// intercept) and the four clever covariates.
inline DesignMatrix build_design_targeting(const TrialDataset& ds, const GlmFit& fit0);

// ---------------------------------------------------------------------------
// Fitting

struct GlmOptions {
  int max_iterations = 100;
  double relative_deviance_tolerance = 1e-12;
  double score_tolerance = 1e-12;  // multiplied by n
  double eta_bound = 30.0;        // |linear predictor| clamp
  double alias_tolerance = 1e-7;  // relative residual norm in pivoting
  int max_step_halvings = 30;
  double step_tolerance = 1e-12;  // relative coefficient change
};

inline constexpr double kSeparationMean = 1e-10;

struct GlmFit {
  std::vector<std::string> labels;
  Eigen::VectorXd beta;               // aliased columns hold 0
  std::vector<std::size_t> aliased;   // dropped column indices
  double deviance = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  bool separation = false;
  int iterations = 0;
  double max_abs_score = std::numeric_limits<double>::quiet_NaN();
  Eigen::MatrixXd fisher_information;  // X' diag(w mu) X over all columns
  std::vector<double> deviance_trace;  // one entry per accepted iterate
  double eta_bound = 30.0;

  bool is_aliased(std::size_t column) const {
    return std::find(aliased.begin(), aliased.end(), column) != aliased.end();
  }
};

inline double clamp_eta(double eta, double bound) { return std::clamp(eta, -bound, bound); }

inline double poisson_deviance(std::span<const double> y, const Eigen::VectorXd& mu, const Eigen::VectorXd& w) {
  double dev = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    const double yi = y[static_cast<std::size_t>(i)];
    const double term = yi > 0.0 ? yi * std::log(yi / mu[i]) - (yi - mu[i]) : mu[i];
    dev += w[i] * term;
  }
  return 2.0 * dev;
}

/// Weighted Poisson log-likelihood at beta (no clamping).
inline double poisson_log_likelihood(const DesignMatrix& dm, std::span<const double> y, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = dm.x * beta + dm.offset;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double yi = y[static_cast<std::size_t>(i)];
    ll += dm.weights[i] * (yi * eta[i] - std::exp(eta[i]) - std::lgamma(yi + 1.0));
  }
  return ll;
}

namespace detail {

/// Columns that are numerically dependent on earlier ones, by modified
/// Gram-Schmidt with one reorthogonalisation pass. Later columns are dropped.
inline std::vector<std::size_t> aliased_columns(const Eigen::MatrixXd& x, const Eigen::VectorXd& w, double tol) {
  const Eigen::VectorXd sw = w.array().sqrt();
  std::vector<Eigen::VectorXd> basis;
  std::vector<std::size_t> dropped;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    Eigen::VectorXd v = x.col(c).cwiseProduct(sw);
    const double norm0 = v.norm();
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : basis) v -= q.dot(v) * q;
    const double norm = v.norm();
    if (norm0 == 0.0 || norm <= tol * norm0) {
      dropped.push_back(static_cast<std::size_t>(c));
    } else {
      basis.push_back(v / norm);
    }
  }
  return dropped;
}

}  // namespace detail

/// Maximises the weighted Poisson log-likelihood. Non-convergence is reported
/// through `converged`, never thrown; callers must check it.
inline GlmFit fit_poisson_glm(const DesignMatrix& dm, std::span<const double> y, const GlmOptions& opt = {}) {
  dm.check();
  const Eigen::Index n = dm.rows();
  const Eigen::Index p = dm.cols();
  if (static_cast<Eigen::Index>(y.size()) != n) throw ValidationError("glm: outcome length mismatch");
  for (double v : y)
    if (!std::isfinite(v) || v < 0.0) throw ValidationError("glm: outcomes must be finite and >= 0");

  GlmFit fit;
  fit.labels = dm.labels;
  fit.eta_bound = opt.eta_bound;
  fit.aliased = detail::aliased_columns(dm.x, dm.weights, opt.alias_tolerance);

  std::vector<Eigen::Index> kept;
  for (Eigen::Index c = 0; c < p; ++c)
    if (!fit.is_aliased(static_cast<std::size_t>(c))) kept.push_back(c);
  const auto pr = static_cast<Eigen::Index>(kept.size());
  Eigen::MatrixXd xr(n, pr);
  for (Eigen::Index k = 0; k < pr; ++k) xr.col(k) = dm.x.col(kept[static_cast<std::size_t>(k)]);

  const Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);
  const Eigen::VectorXd& w = dm.weights;
  const Eigen::VectorXd& off = dm.offset;

  auto evaluate = [&](const Eigen::VectorXd& b, Eigen::VectorXd& eta, Eigen::VectorXd& mu) {
    eta = (xr * b + off).unaryExpr([&](double e) { return clamp_eta(e, opt.eta_bound); });
    mu = eta.array().exp();
    return poisson_deviance(y, mu, w);
  };

  Eigen::VectorXd mu = yv.array() + 0.1;
  Eigen::VectorXd eta = mu.array().log();
  Eigen::VectorXd beta_r = Eigen::VectorXd::Zero(pr);
  Eigen::VectorXd beta_prev = beta_r;
  double dev_old = std::numeric_limits<double>::infinity();
  bool have_iterate = false;
  Eigen::VectorXd score(pr);

  for (int it = 1; it <= opt.max_iterations; ++it) {
    fit.iterations = it;
    const Eigen::VectorXd wt = w.cwiseProduct(mu);
    const Eigen::VectorXd work = (eta - off).array() + (yv - mu).array() / mu.array();
    const Eigen::MatrixXd a = xr.transpose() * wt.asDiagonal() * xr;
    const Eigen::VectorXd rhs = xr.transpose() * wt.cwiseProduct(work);
    Eigen::VectorXd beta_new = a.ldlt().solve(rhs);

    Eigen::VectorXd eta_new, mu_new;
    double dev_new = beta_new.allFinite() ? evaluate(beta_new, eta_new, mu_new)
                                          : std::numeric_limits<double>::infinity();
    if (have_iterate) {
      // slack for rounding: close to the optimum deviance changes sit below
      // its floating-point resolution
      const double ceiling = dev_old + 1e-12 * (std::abs(dev_old) + 0.1);
      for (int h = 0; h < opt.max_step_halvings && !(std::isfinite(dev_new) && dev_new <= ceiling); ++h) {
        beta_new = 0.5 * (beta_new + beta_r);
        dev_new = evaluate(beta_new, eta_new, mu_new);
      }
      if (!(std::isfinite(dev_new) && dev_new <= ceiling)) break;  // no descent step available
    } else if (!std::isfinite(dev_new)) {
      break;
    }

    beta_r = beta_new;
    eta = eta_new;
    mu = mu_new;
    fit.deviance_trace.push_back(dev_new);

    score = xr.transpose() * w.cwiseProduct(yv - mu);
    fit.max_abs_score = score.cwiseAbs().maxCoeff();
    // A flat deviance alone is not enough: it is quadratic in the error.
    // It ends the iteration only when some fitted mean is running off to
    // zero, where the score cannot vanish.
    const bool small_change =
        have_iterate && std::abs(dev_new - dev_old) / (std::abs(dev_new) + 0.1) < opt.relative_deviance_tolerance;
    const bool small_score = fit.max_abs_score < opt.score_tolerance * static_cast<double>(n);
    const bool small_step = have_iterate && (beta_new - beta_prev).cwiseAbs().maxCoeff() <
                                                opt.step_tolerance * (1.0 + beta_new.cwiseAbs().maxCoeff());
    const bool diverging = (mu.array() < kSeparationMean).any() || (eta.array().abs() >= opt.eta_bound).any();
    dev_old = dev_new;
    have_iterate = true;
    beta_prev = beta_new;
    if (small_score || small_step || (small_change && diverging)) {
      fit.converged = true;
      break;
    }
  }

  fit.beta = Eigen::VectorXd::Zero(p);
  for (Eigen::Index k = 0; k < pr; ++k) fit.beta[kept[static_cast<std::size_t>(k)]] = beta_r[k];
  fit.deviance = dev_old;
  if (!have_iterate) fit.converged = false;

  const Eigen::VectorXd wt = w.cwiseProduct(mu);
  fit.fisher_information = dm.x.transpose() * wt.asDiagonal() * dm.x;
  fit.separation = (eta.array().abs() >= opt.eta_bound).any() || (mu.array() < kSeparationMean).any();
  return fit;
}

/// Clamped linear predictor offset + X beta for every row.
inline Eigen::VectorXd linear_predictor(const GlmFit& fit, const DesignMatrix& dm) {
  if (dm.cols() != fit.beta.size()) throw ValidationError("predict: design/coefficient size mismatch");
  return (dm.x * fit.beta + dm.offset).unaryExpr([&](double e) { return clamp_eta(e, fit.eta_bound); });
}

inline double predict_mean(const GlmFit& fit, std::span<const double> row, double offset) {
  if (static_cast<Eigen::Index>(row.size()) != fit.beta.size())
    throw ValidationError("predict: row/coefficient size mismatch");
  double eta = offset;
  for (std::size_t c = 0; c < row.size(); ++c) eta += row[c] * fit.beta[static_cast<Eigen::Index>(c)];
  return std::exp(clamp_eta(eta, fit.eta_bound));
}

inline Eigen::VectorXd predict_means(const GlmFit& fit, const DesignMatrix& dm) {
  return linear_predictor(fit, dm).array().exp();
}

inline DesignMatrix build_design_targeting(const TrialDataset& ds, const GlmFit& fit0) {
  if (!fit0.converged) throw EstimationError("targeting: initial fit did not converge");
  const auto prevalence = ds.site_prevalence();
  for (std::size_t j = 0; j < prevalence.size(); ++j)
    if (prevalence[j] <= 0.0 || prevalence[j] >= 1.0)
      throw ValidationError("positivity violated: site '" + ds.site_label(j) + "' has prevalence " +
                            std::to_string(prevalence[j]));
  const auto n = static_cast<Eigen::Index>(ds.size());
  const auto J = static_cast<Eigen::Index>(ds.num_sites());
  const auto w = site_weights(ds);

  DesignMatrix dm;
  dm.offset = linear_predictor(fit0, build_design_initial(ds));
  dm.weights = Eigen::VectorXd::Ones(n);
  dm.x = Eigen::MatrixXd::Zero(n, J + 4);
  for (Eigen::Index j = 0; j < J; ++j) dm.labels.push_back("site[" + ds.site_label(static_cast<std::size_t>(j)) + "]");
  for (const char* h : {"h11", "h10", "h01", "h00"}) dm.labels.push_back(h);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const auto j = ds.site(ui);
    dm.x(i, static_cast<Eigen::Index>(j)) = 1.0;
    for (int cz : {1, 0})
      for (int cg : {1, 0})
        dm.x(i, J + clever_index(cz, cg)) = clever_covariate(cz, cg, ds.z(ui), ds.g(ui), w[ui], prevalence[j]);
  }
  return dm;
}

}  // namespace mfd
