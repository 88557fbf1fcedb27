#pragma once

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/polygamma.hpp>
#include <cstdint>
#include <string>
#include <vector>

#include "aggregates.hpp"
#include "el.hpp"
#include "families.hpp"
#include "rng.hpp"
#include "types.hpp"

namespace aggfuse {

// ---------------------------------------------------------------------------
// Unconstrained maximum likelihood
// ---------------------------------------------------------------------------

struct MleOptions {
  bool estimate_shape = true;  // gamma nu profiled out; ignored elsewhere
  double fixed_nu = 1.0;
  int max_iter = 100;
  double tol = 1e-10;
};

struct MleFit {
  GlmParams params;
  Matrix cov_beta;     // inverse observed information for beta
  Matrix avg_hessian;  // (1/n) sum_i d2 log f_i / d beta2, negative definite
  double loglik = 0.0;
  bool degenerate = false;  // gaussian exact fit, sigma_hat ~ 0
  int iterations = 0;
};

namespace detail {

inline Matrix design_with_intercept(const Dataset& data) {
  Matrix xt(data.n(), data.p() + 1);
  xt.col(0).setOnes();
  xt.rightCols(data.p()) = data.X;
  return xt;
}

inline double total_loglik(FamilyKind f, const GlmParams& p, const Dataset& data) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < data.n(); ++i)
    ll += log_density(f, p, data.y(i), data.X.row(i).transpose());
  return ll;
}

inline Matrix avg_hessian_at(FamilyKind f, const GlmParams& p, const Dataset& data,
                             const Matrix& xt) {
  const Eigen::Index n = data.n();
  Matrix h = Matrix::Zero(xt.cols(), xt.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lp = xt.row(i) * p.beta;
    h.noalias() += hessian_scalar(f, p, data.y(i), lp) * (xt.row(i).transpose() * xt.row(i));
  }
  return h / static_cast<double>(n);
}

// Gamma shape: solve log(nu) - digamma(nu) = c by Newton from the standard
// moment-based start.
inline double solve_gamma_shape(double c) {
  if (!(c > 0.0)) return 1e8;  // exact fit; shape explodes
  double nu = (3.0 - c + std::sqrt((c - 3.0) * (c - 3.0) + 24.0 * c)) / (12.0 * c);
  for (int k = 0; k < 100; ++k) {
    const double g = std::log(nu) - boost::math::digamma(nu) - c;
    const double gp = 1.0 / nu - boost::math::polygamma(1, nu);
    const double step = g / gp;
    double nu_new = nu - step;
    if (nu_new <= 0.0) nu_new = nu / 2.0;
    if (std::abs(nu_new - nu) <= 1e-12 * (1.0 + nu)) return nu_new;
    nu = nu_new;
  }
  return nu;
}

}  // namespace detail

inline MleFit fit_mle(FamilyKind f, const Dataset& data, const MleOptions& opts = MleOptions()) {
  const Eigen::Index n = data.n();
  const Eigen::Index d = data.p() + 1;
  if (n <= d) throw domain_error("need more observations than coefficients");
  const Matrix xt = detail::design_with_intercept(data);

  MleFit fit;
  fit.params.beta = Vector::Zero(d);
  fit.params.nu = opts.fixed_nu;

  if (f == FamilyKind::gaussian) {
    Eigen::ColPivHouseholderQR<Matrix> qr(xt);
    if (qr.rank() < d) throw singular_error("design matrix is rank deficient");
    fit.params.beta = qr.solve(data.y);
    const double rss = (data.y - xt * fit.params.beta).squaredNorm();
    const double s2 = rss / static_cast<double>(n);
    const double scale = data.y.squaredNorm() / static_cast<double>(n);
    fit.degenerate = s2 <= 1e-12 * (1.0 + scale);
    fit.params.sigma = std::sqrt(std::max(s2, 1e-300));
    fit.iterations = 1;
  } else {
    // Newton with step halving on the log-likelihood.
    double ybar = data.y.mean();
    if (f == FamilyKind::bernoulli_logit) {
      const double pb = std::min(std::max(ybar, 1e-6), 1.0 - 1e-6);
      fit.params.beta(0) = std::log(pb / (1.0 - pb));
    } else {
      fit.params.beta(0) = std::log(std::max(ybar, 1e-6));
    }
    double ll = detail::total_loglik(f, fit.params, data);
    bool done = false;
    int it = 0;
    for (; it < opts.max_iter; ++it) {
      Vector g = Vector::Zero(d);
      Matrix h = Matrix::Zero(d, d);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double lp = xt.row(i) * fit.params.beta;
        g.noalias() += score_scalar(f, fit.params, data.y(i), lp) * xt.row(i).transpose();
        h.noalias() +=
            hessian_scalar(f, fit.params, data.y(i), lp) * (xt.row(i).transpose() * xt.row(i));
      }
      if (g.lpNorm<Eigen::Infinity>() <= opts.tol * static_cast<double>(n) * (1.0 + std::abs(ll))) {
        done = true;
        break;
      }
      Vector dir = (-h).ldlt().solve(g);
      if (!dir.allFinite()) throw singular_error("observed information is singular");
      double step = 1.0;
      GlmParams trial = fit.params;
      bool accepted = false;
      for (int half = 0; half < 40; ++half) {
        trial.beta = fit.params.beta + step * dir;
        const double ll_try = detail::total_loglik(f, trial, data);
        if (std::isfinite(ll_try) && ll_try >= ll - 1e-12 * std::abs(ll)) {
          fit.params.beta = trial.beta;
          ll = ll_try;
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;
    }
    fit.iterations = it;
    if (f == FamilyKind::bernoulli_logit) {
      // separation sends the optimum to infinity; the gradient still passes
      // the tolerance once every fitted probability saturates, so detect it
      // from the classification margins instead
      double min_margin = kInf;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double lp = xt.row(i) * fit.params.beta;
        min_margin = std::min(min_margin, (2.0 * data.y(i) - 1.0) * lp);
      }
      if (min_margin > 10.0)
        throw convergence_error("logistic fit diverged: data appear separable");
    }
    if (!done)
      throw convergence_error("mle did not converge in " + std::to_string(opts.max_iter) +
                              " iterations");
    if (f == FamilyKind::gamma_log && opts.estimate_shape) {
      double c = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double lp = xt.row(i) * fit.params.beta;
        c += lp - std::log(data.y(i)) + data.y(i) * safe_exp(-lp) - 1.0;
      }
      fit.params.nu = detail::solve_gamma_shape(c / static_cast<double>(n));
    }
  }

  fit.avg_hessian = detail::avg_hessian_at(f, fit.params, data, xt);
  Matrix info = -static_cast<double>(n) * fit.avg_hessian;
  Eigen::LDLT<Matrix> ldlt(info);
  if (ldlt.info() != Eigen::Success)
    throw singular_error("observed information is singular");
  fit.cov_beta = ldlt.solve(Matrix::Identity(d, d));
  fit.loglik = detail::total_loglik(f, fit.params, data);
  return fit;
}

// ---------------------------------------------------------------------------
// Constrained estimation
// ---------------------------------------------------------------------------

enum class VPolicy { automatic, reported, plugin };
enum class SigmaSource { outer, plugin };

struct FitOptions {
  VPolicy v_policy = VPolicy::automatic;
  // Variance meat: "outer" uses per-observation score outer products with the
  // AD block completed by the plug-in kappa V^-1 Sigma_phi V^-1 (outer
  // products cannot see the AD sampling noise at phi = phi_tilde); "plugin"
  // uses the asymptotic block-diagonal form. Both are always computed; this
  // picks which one the reported standard errors use.
  SigmaSource sigma_source = SigmaSource::outer;
  double alpha = 0.05;
  long n_override = -1;
  bool eta_diagnostic = true;
  bool drop_redundant = false;
  int gmm_restarts = 4;
  std::uint64_t gmm_seed = 20250818;
  double cond_limit_j = 1e12;
  double redundancy_limit = 1e10;
  int full_max_iter = 600;
  double full_tol = 1e-9;
};

struct FitDiagnostics {
  double cond_j = 0.0;
  bool damped_j = false;  // stability warning: Tikhonov damping applied
  Vector eta;
  bool eta_converged = false;
  double gmm_objective = kNaN;
  std::vector<std::string> warnings;
  std::vector<std::string> excluded_constraints;
};

struct FitResult {
  std::string method;  // "mle" | "cmle_fast" | "cmle_full"
  FamilyKind family = FamilyKind::gaussian;
  GlmParams params;
  Vector phi;    // q
  Vector theta;  // s
  Vector se;     // d, from the selected sandwich
  Vector ci_lo, ci_hi;
  Matrix cov_beta;        // d x d, selected sandwich / n
  Matrix cov_beta_alt;    // the other sigma source, for cross-checking
  Matrix ellipsoid;       // confidence set: (b-beta)' ellipsoid (b-beta) <= chi2_crit
  double chi2_crit = 0.0;
  Vector re_vs_mle;  // d, Var_mle / Var_cmle from reported covariances
  double kappa = 0.0;
  long N = -1;
  GlmParams params_mle;  // baseline fit on the individual-level data alone
  Vector se_mle;         // d, baseline
  FitDiagnostics diag;
};

namespace detail {

struct Blocks {
  Matrix J;             // D x D, D = d + q + s + r
  Matrix J_use;         // damped copy when cond(J) exceeds the limit
  Matrix sigma_outer;   // score outer products, AD block completed by plug-in
  Matrix sigma_plugin;  // block-diagonal asymptotic form
  Vector psi_bar;       // r
  Matrix psi_dot_beta;  // d x r
  double cond_j = 0.0;
  bool damped = false;
};

inline double condition_number(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  return smin > 0.0 ? sv(0) / smin : kInf;
}

// J and both Sigma estimates at (beta, phi, theta). V is the working metric
// for the AD deviation; sigma_phi is the best available estimate of the true
// AD sampling variance (equal to V when V comes from the AD report).
inline Blocks assemble_blocks(const ConstraintSet& cs, FamilyKind f, const GlmParams& params,
                              const Vector& phi, const Vector& theta, const Dataset& data,
                              const Matrix& v_inv, const Matrix& sigma_phi, double kappa,
                              double cond_limit) {
  const Eigen::Index n = data.n();
  const Eigen::Index d = params.d();
  const Eigen::Index q = cs.phi_dim();
  const Eigen::Index s = cs.theta_dim();
  const Eigen::Index r = cs.psi_dim();
  const Eigen::Index D = d + q + s + r;

  const Matrix xt = design_with_intercept(data);
  const Matrix h_avg = avg_hessian_at(f, params, data, xt);
  const PsiJacobians jac = psi_jacobians(cs, f, params, phi, theta, data);
  const Matrix psi = stack_psi(cs, f, params, phi, theta, data);
  const Matrix w = psi.transpose() * psi / static_cast<double>(n);

  Blocks b;
  b.psi_bar = psi.colwise().mean();
  b.psi_dot_beta = jac.dbeta;

  b.J = Matrix::Zero(D, D);
  b.J.block(0, 0, d, d) = -h_avg;  // -H, positive definite
  b.J.block(d, d, q, q) = kappa * v_inv;
  b.J.block(0, d + q + s, d, r) = jac.dbeta;
  b.J.block(d, d + q + s, q, r) = jac.dphi;
  b.J.block(d + q, d + q + s, s, r) = jac.dtheta;
  b.J.block(d + q + s, 0, r, d) = jac.dbeta.transpose();
  b.J.block(d + q + s, d, r, q) = jac.dphi.transpose();
  b.J.block(d + q + s, d + q, r, s) = jac.dtheta.transpose();
  b.J.block(d + q + s, d + q + s, r, r) = -w;

  // Sigma, plug-in form: blockdiag(-H, kappa V^-1 Sigma_phi V^-1, 0, E psi psi').
  b.sigma_plugin = Matrix::Zero(D, D);
  b.sigma_plugin.block(0, 0, d, d) = -h_avg;
  b.sigma_plugin.block(d, d, q, q) = kappa * v_inv * sigma_phi * v_inv;
  b.sigma_plugin.block(d + q + s, d + q + s, r, r) = w;

  // Sigma, outer-product form. Per-observation contribution
  // (score_i, kappa V^-1 (phi_tilde - phi), 0, -psi_i); the phi component is
  // constant in i (zero for the one-step estimator, which fixes phi at
  // phi_tilde), so the AD sampling block is completed by the plug-in.
  Matrix scores(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lp = xt.row(i) * params.beta;
    scores.row(i) = score_scalar(f, params, data.y(i), lp) * xt.row(i);
  }
  b.sigma_outer = Matrix::Zero(D, D);
  b.sigma_outer.block(0, 0, d, d) = scores.transpose() * scores / static_cast<double>(n);
  b.sigma_outer.block(0, d + q + s, d, r) = -scores.transpose() * psi / static_cast<double>(n);
  b.sigma_outer.block(d + q + s, 0, r, d) = b.sigma_outer.block(0, d + q + s, d, r).transpose();
  b.sigma_outer.block(d + q + s, d + q + s, r, r) = w;
  b.sigma_outer.block(d, d, q, q) = kappa * v_inv * sigma_phi * v_inv;

  b.cond_j = condition_number(b.J);
  b.J_use = b.J;
  if (!(b.cond_j <= cond_limit)) {
    b.damped = true;
    b.J_use += 1e-8 * b.J.norm() * Matrix::Identity(D, D);
  }
  return b;
}

inline Matrix solve_j(const Blocks& b, const Matrix& rhs) {
  Eigen::FullPivLU<Matrix> lu(b.J_use);
  if (!lu.isInvertible())
    throw singular_error("J is singular (condition number " + std::to_string(b.cond_j) + ")");
  Matrix out = lu.solve(rhs);
  if (!out.allFinite())
    throw singular_error("J solve produced non-finite values (condition number " +
                         std::to_string(b.cond_j) + ")");
  return out;
}

}  // namespace detail

// Model-implied AD sampling covariance (Var of sqrt(N)(phi_tilde - phi))
// under the shifted population, used when the AD report carries no variance.
// The covariate law of the AD population is the IPD empirical law reweighted
// by w_x(x) c(x); conditional moments come from the tilted family. All the
// summaries are M-estimators from one AD sample, so the matrix carries
// cross-summary covariance too: block (j, k) is E{phi_fn_j phi_fn_k^T}
// divided by the two subgroup/cell masses, where phi_fn is the summary's
// estimating function ((y - phi) on a covariate subgroup, (x_T - phi) on an
// outcome cell, or (x_T - phi) marginally).
inline Matrix plugin_sigma_phi(const ConstraintSet& cs, FamilyKind f, const GlmParams& params,
                               const Vector& theta, const Dataset& data) {
  const Eigen::Index n = data.n();
  const Eigen::Index q = cs.phi_dim();
  const std::size_t kn = cs.summaries.size();
  const Vector th_y = cs.shift.pps_active() ? theta_y_part(cs.shift, theta) : Vector();

  // normalized reweighting over the IPD covariates
  Vector wts(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector x = data.X.row(i).transpose();
    double w = shift_weight_x(cs.shift, theta, x);
    if (cs.shift.pps_active()) w *= safe_exp(log_tilt_normalizer(f, params, x, th_y));
    wts(i) = w;
  }
  wts /= wts.sum();

  // 0: outcome mean on a covariate subgroup; 1: covariate means on an outcome
  // cell; 2: marginal covariate means
  struct Desc {
    int kind = 0;
    Eigen::Index off = 0, m = 0;
    double lo = -kInf, hi = kInf;
    const AdSummary* s = nullptr;
  };
  std::vector<Desc> ds(kn);
  bool any_outcome_kind = false;
  {
    Eigen::Index at = 0;
    for (std::size_t j = 0; j < kn; ++j) {
      const AdSummary& s = cs.summaries[j];
      ds[j].s = &s;
      ds[j].off = at;
      ds[j].m = s.dim();
      switch (s.kind) {
        case AdKind::marginal_outcome_mean:
        case AdKind::outcome_mean_given_covariates:
          ds[j].kind = 0;
          any_outcome_kind = true;
          break;
        case AdKind::covariate_mean_given_outcome:
          ds[j].kind = 1;
          ds[j].lo = s.subgroup.outcome_interval->lo;
          ds[j].hi = s.subgroup.outcome_interval->hi;
          break;
        case AdKind::marginal_covariate_mean: ds[j].kind = 2; break;
      }
      at += ds[j].m;
    }
  }

  Matrix raw = Matrix::Zero(q, q);
  Vector mass = Vector::Zero(static_cast<Eigen::Index>(kn));
  std::vector<double> ind(kn, 0.0), pcell(kn, 0.0), t1(kn, 0.0);
  std::vector<Vector> u(kn);

  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector x = data.X.row(i).transpose();
    const double w = wts(i);

    double mu_t = 0.0, v_t = 0.0;
    if (any_outcome_kind) {
      mu_t = th_y.size() ? tilted_mean(f, params, x, th_y) : conditional_mean(f, params, x);
      v_t = th_y.size() ? tilted_variance(f, params, x, th_y)
                        : conditional_variance(f, params, x);
    }
    for (std::size_t j = 0; j < kn; ++j) {
      const Desc& dj = ds[j];
      const AdSummary& s = *dj.s;
      if (dj.kind == 0) {
        ind[j] =
            (s.kind == AdKind::marginal_outcome_mean || s.subgroup.contains(x)) ? 1.0 : 0.0;
        mass(static_cast<Eigen::Index>(j)) += w * ind[j];
      } else {
        Vector uu(dj.m);
        for (Eigen::Index k = 0; k < dj.m; ++k)
          uu(k) = x(s.target_covariates[static_cast<std::size_t>(k)]) - s.value(k);
        u[j] = std::move(uu);
        if (dj.kind == 1) {
          TiltRequest req;
          req.need_interval = true;
          req.a = dj.lo;
          req.b = dj.hi;
          pcell[j] = tilt_eval(f, params, x, th_y, req).interval;
          if (any_outcome_kind)
            t1[j] = interval_first_moment(f, params, x, th_y, dj.lo, dj.hi);
          mass(static_cast<Eigen::Index>(j)) += w * pcell[j];
        } else {
          mass(static_cast<Eigen::Index>(j)) += w;
        }
      }
    }

    for (std::size_t jA = 0; jA < kn; ++jA) {
      for (std::size_t jB = jA; jB < kn; ++jB) {
        // orient each pair so the lower kind comes first; every unordered
        // pair accumulates into exactly one block, mirrored at the end
        const std::size_t a = ds[jA].kind <= ds[jB].kind ? jA : jB;
        const std::size_t b = (a == jA) ? jB : jA;
        const Desc& da = ds[a];
        const Desc& db = ds[b];
        if (da.kind == 0 && db.kind == 0) {
          if (ind[a] * ind[b] != 0.0)
            raw(da.off, db.off) +=
                w * (v_t + (mu_t - da.s->value(0)) * (mu_t - db.s->value(0)));
        } else if (da.kind == 0 && db.kind == 1) {
          if (ind[a] != 0.0)
            raw.block(da.off, db.off, 1, db.m).noalias() +=
                w * (t1[b] - da.s->value(0) * pcell[b]) * u[b].transpose();
        } else if (da.kind == 0 && db.kind == 2) {
          if (ind[a] != 0.0)
            raw.block(da.off, db.off, 1, db.m).noalias() +=
                w * (mu_t - da.s->value(0)) * u[b].transpose();
        } else if (da.kind == 1 && db.kind == 1) {
          double pr = 0.0;
          if (a == b) {
            pr = pcell[a];
          } else {
            const double lo = std::max(da.lo, db.lo);
            const double hi = std::min(da.hi, db.hi);
            if (lo < hi) {
              TiltRequest req;
              req.need_interval = true;
              req.a = lo;
              req.b = hi;
              pr = tilt_eval(f, params, x, th_y, req).interval;
            }
          }
          if (pr != 0.0)
            raw.block(da.off, db.off, da.m, db.m).noalias() +=
                (w * pr) * u[a] * u[b].transpose();
        } else if (da.kind == 1 && db.kind == 2) {
          raw.block(da.off, db.off, da.m, db.m).noalias() +=
              (w * pcell[a]) * u[a] * u[b].transpose();
        } else {
          raw.block(da.off, db.off, da.m, db.m).noalias() += w * u[a] * u[b].transpose();
        }
      }
    }
  }

  for (std::size_t j = 0; j < kn; ++j)
    if (mass(static_cast<Eigen::Index>(j)) <= 0.0)
      throw identification_error("summary '" + cs.summaries[j].label +
                                 "' has no support in the IPD");

  Matrix out = Matrix::Zero(q, q);
  for (std::size_t jA = 0; jA < kn; ++jA) {
    for (std::size_t jB = jA; jB < kn; ++jB) {
      const std::size_t a = ds[jA].kind <= ds[jB].kind ? jA : jB;
      const std::size_t b = (a == jA) ? jB : jA;
      const Desc& da = ds[a];
      const Desc& db = ds[b];
      const Matrix blk = raw.block(da.off, db.off, da.m, db.m) /
                         (mass(static_cast<Eigen::Index>(a)) *
                          mass(static_cast<Eigen::Index>(b)));
      out.block(da.off, db.off, da.m, db.m) = blk;
      if (jA != jB) out.block(db.off, da.off, db.m, da.m) = blk.transpose();
    }
  }
  return out;
}

// GMM initializer for the shift parameters: minimize || mean_i psi_i(theta) ||^2
// at (beta_tilde, phi_tilde) by Levenberg-Marquardt with multistart.
struct GmmResult {
  Vector theta;
  double objective = kNaN;
  bool converged = false;
};

inline GmmResult init_theta_gmm(const ConstraintSet& cs, FamilyKind f, const GlmParams& params,
                                const Vector& phi, const Dataset& data,
                                const FitOptions& opts = FitOptions()) {
  const Eigen::Index s = cs.theta_dim();
  GmmResult best;
  best.theta = Vector::Zero(s);
  if (s == 0) {
    best.objective = stack_psi(cs, f, params, phi, best.theta, data).colwise().mean().squaredNorm();
    best.converged = true;
    return best;
  }

  auto mean_psi = [&](const Vector& th) -> Vector {
    return stack_psi(cs, f, params, phi, th, data).colwise().mean().transpose();
  };

  best.objective = kInf;
  CounterRng rng(opts.gmm_seed, 0, 0);
  for (int start = 0; start <= opts.gmm_restarts; ++start) {
    Vector th = Vector::Zero(s);
    if (start > 0)
      for (Eigen::Index j = 0; j < s; ++j) th(j) = rng.normal(0.0, 0.5);

    Vector m;
    try {
      m = mean_psi(th);
    } catch (const domain_error&) {
      continue;  // infeasible start (gamma tilt); theta = 0 is always feasible
    }
    double obj = m.squaredNorm();
    double lambda = 1e-3;
    bool conv = false;
    for (int it = 0; it < 200; ++it) {
      const Matrix dm = psi_jacobians(cs, f, params, phi, th, data).dtheta.transpose();  // r x s
      const Vector g = dm.transpose() * m;
      if (g.lpNorm<Eigen::Infinity>() <= 1e-12 || obj <= 1e-26) {
        conv = true;
        break;
      }
      bool stepped = false;
      for (int tries = 0; tries < 25; ++tries) {
        const Matrix a = dm.transpose() * dm + lambda * Matrix::Identity(s, s);
        const Vector delta = a.ldlt().solve(-g);
        const Vector th_try = th + delta;
        double obj_try = kInf;
        try {
          obj_try = mean_psi(th_try).squaredNorm();
        } catch (const domain_error&) {
        }
        if (obj_try < obj) {
          th = th_try;
          m = mean_psi(th);
          obj = obj_try;
          lambda = std::max(lambda / 3.0, 1e-12);
          stepped = true;
          break;
        }
        lambda *= 10.0;
      }
      if (!stepped) {
        conv = obj <= 1e-18 || g.lpNorm<Eigen::Infinity>() <= 1e-8;
        break;
      }
      if (obj <= 1e-26) {
        conv = true;
        break;
      }
    }
    if (obj < best.objective) {
      best.theta = th;
      best.objective = obj;
      best.converged = conv;
    }
  }
  return best;
}

namespace detail {

// Working V and the plug-in AD variance, per policy. Returns (V, sigma_phi).
inline std::pair<Matrix, Matrix> working_v(const ConstraintSet& cs, FamilyKind f,
                                           const GlmParams& params, const Vector& theta,
                                           const Dataset& data, VPolicy policy,
                                           std::vector<std::string>& warnings) {
  const Eigen::Index q = cs.phi_dim();
  bool all_reported = true;
  for (const auto& s : cs.summaries)
    if (!s.variance) all_reported = false;

  if (policy == VPolicy::reported && !all_reported)
    throw parse_error("v-policy 'reported' but some summaries carry no variance block");

  Matrix v;
  if ((policy == VPolicy::reported) ||
      (policy == VPolicy::automatic && all_reported)) {
    v = Matrix::Zero(q, q);
    Eigen::Index at = 0;
    for (const auto& s : cs.summaries) {
      v.block(at, at, s.dim(), s.dim()) = *s.variance;
      at += s.dim();
    }
  } else {
    v = plugin_sigma_phi(cs, f, params, theta, data);
    if (policy == VPolicy::automatic && !all_reported && q > 0)
      warnings.push_back("no reported AD variances; using model plug-in for V");
  }

  Eigen::LDLT<Matrix> ldlt(v);
  if (ldlt.info() != Eigen::Success || (v.diagonal().array() <= 0.0).any()) {
    const double ridge = 1e-10 * (1.0 + v.trace() / std::max<double>(q, 1));
    v += ridge * Matrix::Identity(q, q);
    warnings.push_back("working V not positive definite; ridged");
  }
  return {v, v};
}

inline Matrix invert_spd(const Matrix& m, const char* what) {
  Eigen::LDLT<Matrix> ldlt(m);
  if (ldlt.info() != Eigen::Success)
    throw singular_error(std::string(what) + " is not invertible");
  Matrix inv = ldlt.solve(Matrix::Identity(m.rows(), m.cols()));
  if (!inv.allFinite()) throw singular_error(std::string(what) + " is not invertible");
  return inv;
}

inline long resolve_ad_n(const ConstraintSet& cs, long n_override) {
  if (n_override > 0) return n_override;
  long N = -1;
  for (const auto& s : cs.summaries) {
    if (s.sample_size <= 0)
      throw identification_error("summary '" + s.label +
                                 "' carries no AD sample size; refusing to fit");
    if (N < 0) N = s.sample_size;
    else if (N != s.sample_size)
      throw identification_error("summaries disagree on the AD sample size; pass it explicitly");
  }
  return N;
}

inline double z_quantile(double alpha) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - alpha / 2.0);
}

// Wrap the baseline MLE into the common result shape.
inline FitResult mle_as_result(FamilyKind f, const MleFit& mle, double alpha,
                               const std::string& method) {
  const Eigen::Index d = mle.params.d();
  FitResult out;
  out.method = method;
  out.family = f;
  out.params = mle.params;
  out.phi = Vector();
  out.theta = Vector();
  out.cov_beta = mle.cov_beta;
  out.cov_beta_alt = mle.cov_beta;
  out.se = mle.cov_beta.diagonal().array().sqrt();
  out.params_mle = mle.params;
  out.se_mle = out.se;
  const double z = z_quantile(alpha);
  out.ci_lo = out.params.beta - z * out.se;
  out.ci_hi = out.params.beta + z * out.se;
  out.re_vs_mle = Vector::Ones(d);
  out.ellipsoid = invert_spd(mle.cov_beta, "mle covariance");
  out.chi2_crit =
      boost::math::quantile(boost::math::chi_squared_distribution<double>(d), 1.0 - alpha);
  return out;
}

}  // namespace detail

// Greedy exclusion of summaries whose psi columns are (near) collinear with
// those already kept; returns labels of the dropped summaries.
inline std::vector<std::string> drop_redundant_summaries(ConstraintSet& cs, FamilyKind f,
                                                         const GlmParams& params,
                                                         const Vector& theta, const Dataset& data,
                                                         double cond_limit) {
  std::vector<std::string> dropped;
  ConstraintSet kept;
  kept.shift = cs.shift;
  for (const auto& s : cs.summaries) {
    ConstraintSet trial = kept;
    trial.summaries.push_back(s);
    const Matrix psi = stack_psi(trial, f, params, trial.stacked_values(), theta, data);
    if (psi_gram_condition(psi) > cond_limit)
      dropped.push_back(s.label.empty() ? ad_kind_name(s.kind) : s.label);
    else
      kept = trial;
  }
  cs = kept;
  return dropped;
}

// One-step constrained estimator. Freezes phi at the reported values and
// theta at the GMM initializer, then corrects the MLE by a single Newton-type
// step on the full estimating system:
//   beta_hat = beta_tilde + (0,0,0, H~^-1 psi_dot_beta) J~^-1 (0,0,0, -psi_bar)'.
inline FitResult fit_cmle_fast(const ConstraintSet& cs_in, FamilyKind f, const Dataset& data,
                               const MleFit& mle, const FitOptions& opts = FitOptions()) {
  ConstraintSet cs = cs_in;
  cs.validate(data.p());
  if (mle.degenerate) throw domain_error("baseline fit is degenerate (zero residual variance)");

  if (cs.summaries.empty()) {
    FitResult out = detail::mle_as_result(f, mle, opts.alpha, "cmle_fast");
    out.diag.warnings.push_back("no AD constraints: estimate equals the MLE");
    return out;
  }

  FitResult out;
  out.method = "cmle_fast";
  out.family = f;
  out.N = detail::resolve_ad_n(cs, opts.n_override);
  const Eigen::Index n = data.n();
  out.kappa = static_cast<double>(out.N) / static_cast<double>(n);

  const Eigen::Index s = cs.theta_dim();
  if (cs.psi_dim() < s)
    throw identification_error("under-identified shift: r = " + std::to_string(cs.psi_dim()) +
                               " constraint rows for s = " + std::to_string(s) +
                               " shift parameters");

  // theta from GMM at (beta_tilde, phi_tilde)
  Vector phi = cs.stacked_values();
  GmmResult gmm = init_theta_gmm(cs, f, mle.params, phi, data, opts);
  out.diag.gmm_objective = gmm.objective;
  Vector theta = gmm.theta;

  if (opts.drop_redundant) {
    out.diag.excluded_constraints =
        drop_redundant_summaries(cs, f, mle.params, theta, data, opts.redundancy_limit);
    if (!out.diag.excluded_constraints.empty()) {
      phi = cs.stacked_values();
      if (cs.theta_dim() > 0) {
        gmm = init_theta_gmm(cs, f, mle.params, phi, data, opts);
        theta = gmm.theta;
      }
      if (cs.summaries.empty()) {
        FitResult red = detail::mle_as_result(f, mle, opts.alpha, "cmle_fast");
        red.diag.warnings.push_back("all constraints excluded as redundant");
        return red;
      }
    }
  } else {
    check_redundancy(stack_psi(cs, f, mle.params, phi, theta, data), opts.redundancy_limit);
  }

  const Eigen::Index r = cs.psi_dim();
  out.phi = phi;
  out.theta = theta;

  auto [v, sigma_phi] =
      detail::working_v(cs, f, mle.params, theta, data, opts.v_policy, out.diag.warnings);
  const Matrix v_inv = detail::invert_spd(v, "working V");

  // Update step at the initial estimates.
  Vector beta_hat = mle.params.beta;
  bool no_gain = r == s;
  if (no_gain) {
    out.diag.warnings.push_back(
        "exactly identified constraint system (r = s): no efficiency gain over the MLE");
  } else {
    detail::Blocks b0 = detail::assemble_blocks(cs, f, mle.params, phi, theta, data, v_inv,
                                                sigma_phi, out.kappa, opts.cond_limit_j);
    const Eigen::Index d = mle.params.d();
    const Eigen::Index D = b0.J.rows();
    Vector e = Vector::Zero(D);
    e.tail(r) = -b0.psi_bar;
    const Vector z = detail::solve_j(b0, e);
    // H~^-1 psi_dot_beta with H~ the (negative definite) average hessian
    const Matrix h_inv_psib = (-mle.avg_hessian).ldlt().solve(-b0.psi_dot_beta);
    beta_hat += h_inv_psib * z.tail(r);
    if (!beta_hat.allFinite()) throw singular_error("one-step update is not finite");
  }

  out.params = mle.params;
  out.params.beta = beta_hat;

  // Variance at the estimate.
  detail::Blocks b = detail::assemble_blocks(cs, f, out.params, phi, theta, data, v_inv, sigma_phi,
                                             out.kappa, opts.cond_limit_j);
  out.diag.cond_j = b.cond_j;
  out.diag.damped_j = b.damped;
  if (b.damped)
    out.diag.warnings.push_back("J nearly singular (condition " + std::to_string(b.cond_j) +
                                "); Tikhonov damping applied, estimates may be unstable");

  const Eigen::Index d = mle.params.d();
  const Matrix jinv_sig_out = detail::solve_j(b, b.sigma_outer);
  const Matrix jinv_sig_plug = detail::solve_j(b, b.sigma_plugin);
  const Matrix sand_outer = detail::solve_j(b, jinv_sig_out.transpose()).transpose();
  const Matrix sand_plugin = detail::solve_j(b, jinv_sig_plug.transpose()).transpose();
  const Matrix cov_outer = sand_outer.block(0, 0, d, d) / static_cast<double>(n);
  const Matrix cov_plugin = sand_plugin.block(0, 0, d, d) / static_cast<double>(n);

  out.cov_beta = opts.sigma_source == SigmaSource::outer ? cov_outer : cov_plugin;
  out.cov_beta_alt = opts.sigma_source == SigmaSource::outer ? cov_plugin : cov_outer;
  out.se = out.cov_beta.diagonal().array().max(0.0).sqrt();
  out.params_mle = mle.params;
  out.se_mle = mle.cov_beta.diagonal().array().sqrt();
  const double zq = detail::z_quantile(opts.alpha);
  out.ci_lo = beta_hat - zq * out.se;
  out.ci_hi = beta_hat + zq * out.se;
  out.re_vs_mle = (mle.cov_beta.diagonal().array() / out.cov_beta.diagonal().array()).matrix();
  out.ellipsoid = detail::invert_spd(out.cov_beta, "sandwich covariance");
  out.chi2_crit =
      boost::math::quantile(boost::math::chi_squared_distribution<double>(d), 1.0 - opts.alpha);

  if (opts.eta_diagnostic) {
    const ElSolution el = solve_eta_impl(stack_psi(cs, f, out.params, phi, theta, data), {});
    out.diag.eta = el.eta;
    out.diag.eta_converged = el.converged;
    if (!el.converged)
      out.diag.warnings.push_back("EL diagnostic did not converge at the estimate");
  } else {
    out.diag.eta = Vector::Zero(r);
  }
  return out;
}

// Full constrained maximum likelihood over (beta, phi, theta) with the
// empirical-likelihood penalty; dispersion parameters stay at their
// unconstrained estimates. Solved as a damped Newton iteration on the joint
// stationarity system in (beta, phi, theta, eta) -- the same system whose
// single step from the working point defines the one-step estimator -- rather
// than by descent on the profiled objective. The joint form matters: menus
// whose psi rows are affinely dependent for every parameter value (e.g. a
// gaussian marginal outcome mean together with the full covariate-mean span,
// where the identity link makes the outcome moment an exact affine
// combination of the covariate moments) have a profile objective that is
// finite only on a measure-zero manifold of (beta, phi), so no unconstrained
// descent method can move; the joint system stays well-posed there because
// the quadratic AD deviation term regularizes the degenerate direction.
inline FitResult fit_cmle_full(const ConstraintSet& cs_in, FamilyKind f, const Dataset& data,
                               const MleFit& mle, const FitOptions& opts = FitOptions()) {
  ConstraintSet cs = cs_in;
  cs.validate(data.p());
  if (cs.summaries.empty()) {
    FitResult out = detail::mle_as_result(f, mle, opts.alpha, "cmle_full");
    out.diag.warnings.push_back("no AD constraints: estimate equals the MLE");
    return out;
  }

  FitResult out;
  out.method = "cmle_full";
  out.family = f;
  out.N = detail::resolve_ad_n(cs, opts.n_override);
  const Eigen::Index n = data.n();
  out.kappa = static_cast<double>(out.N) / static_cast<double>(n);

  const Eigen::Index d = mle.params.d();
  const Eigen::Index q = cs.phi_dim();
  const Eigen::Index s = cs.theta_dim();
  const Eigen::Index r = cs.psi_dim();
  if (r < s) throw identification_error("under-identified shift (r < s)");

  const Vector phi_tilde = cs.stacked_values();
  const GmmResult gmm = init_theta_gmm(cs, f, mle.params, phi_tilde, data, opts);
  out.diag.gmm_objective = gmm.objective;

  auto [v, sigma_phi] =
      detail::working_v(cs, f, mle.params, gmm.theta, data, opts.v_policy, out.diag.warnings);
  const Matrix v_inv = detail::invert_spd(v, "working V");
  check_redundancy(stack_psi(cs, f, mle.params, phi_tilde, gmm.theta, data),
                   opts.redundancy_limit);

  const Matrix xt = detail::design_with_intercept(data);
  const double nd = static_cast<double>(n);
  const double kap = out.kappa;

  GlmParams params = mle.params;
  auto unpack = [&](const Vector& vpar, GlmParams& p, Vector& phi, Vector& theta) {
    p = mle.params;
    p.beta = vpar.head(d);
    phi = vpar.segment(d, q);
    theta = vpar.tail(s);
  };

  // Per-observation average of the stationarity system at (beta, phi, theta,
  // eta), with the empirical-likelihood term in log-star form so iterates may
  // cross the weight boundary. weight_sum tracks sum_i u_i / n, which equals
  // one automatically at any valid root; z_min tracks the smallest
  // 1 + eta'psi_i. Returns false when the tilt leaves the family's domain or
  // a component is non-finite.
  const detail::LogStar ls(1.0 / nd);
  auto residual = [&](const Vector& vpar, const Vector& eta, Vector& res, double& weight_sum,
                      double& z_min) -> bool {
    GlmParams p;
    Vector phi, theta;
    unpack(vpar, p, phi, theta);
    res = Vector::Zero(d + q + s + r);
    weight_sum = 0.0;
    z_min = kInf;
    try {
      for (Eigen::Index i = 0; i < n; ++i) {
        const Vector x = data.X.row(i).transpose();
        const double lp = xt.row(i) * p.beta;
        const PsiRowEval e = psi_row_eval(cs, f, p, phi, theta, x, true);
        const double z = 1.0 + e.psi.dot(eta);
        const double u = ls.deriv(z);
        weight_sum += u;
        z_min = std::min(z_min, z);
        res.head(d).noalias() -= score_scalar(f, p, data.y(i), lp) * xt.row(i).transpose();
        res.head(d).noalias() += u * (e.dbeta.transpose() * eta);
        res.segment(d, q).noalias() += u * (e.dphi.transpose() * eta);
        res.segment(d + q, s).noalias() += u * (e.dtheta.transpose() * eta);
        res.tail(r).noalias() += u * e.psi;
      }
    } catch (const domain_error&) {
      return false;  // infeasible tilt
    }
    res /= nd;
    weight_sum /= nd;
    res.segment(d, q).noalias() -= kap * (v_inv * (phi_tilde - phi));
    return res.allFinite();
  };

  Vector vpar(d + q + s);
  vpar.head(d) = mle.params.beta;
  vpar.segment(d, q) = phi_tilde;
  vpar.tail(s) = gmm.theta;
  Vector eta = Vector::Zero(r);

  const double tol = opts.full_tol;
  Vector res;
  double weight_sum = 1.0, z_min = 1.0;
  if (!residual(vpar, eta, res, weight_sum, z_min))
    throw hull_error("constraints infeasible at the initial point (beta_mle, phi_tilde, theta_gmm)");
  double res_norm = res.norm();

  auto valid_root = [&]() {
    return std::abs(weight_sum - 1.0) <= 1e-8 && z_min >= ls.z0 * (1.0 - 1e-9);
  };

  int it = 0;
  for (; it < opts.full_max_iter; ++it) {
    if (res.lpNorm<Eigen::Infinity>() <= tol) break;
    GlmParams p;
    Vector phi_cur, theta_cur;
    unpack(vpar, p, phi_cur, theta_cur);
    const detail::Blocks b = detail::assemble_blocks(cs, f, p, phi_cur, theta_cur, data, v_inv,
                                                     sigma_phi, kap, opts.cond_limit_j);
    const Vector dir = detail::solve_j(b, Matrix(-res)).col(0);
    double step = 1.0;
    bool accepted = false;
    while (step >= 1e-12) {
      const Vector v_try = vpar + step * dir.head(d + q + s);
      const Vector e_try = eta + step * dir.tail(r);
      Vector res_try;
      double ws_try, zm_try;
      if (residual(v_try, e_try, res_try, ws_try, zm_try)) {
        const double rn_try = res_try.norm();
        if (rn_try <= (1.0 - 1e-4 * step) * res_norm) {
          vpar = v_try;
          eta = e_try;
          res = std::move(res_try);
          res_norm = rn_try;
          weight_sum = ws_try;
          z_min = zm_try;
          accepted = true;
          break;
        }
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  if (!valid_root())
    throw hull_error(
        "no feasible constrained maximum: the implied weights do not form a distribution "
        "(weight sum " + std::to_string(weight_sum) + " after " + std::to_string(it) +
        " iterations); constraints are likely incompatible with the data");
  if (res.lpNorm<Eigen::Infinity>() > 100.0 * tol)
    out.diag.warnings.push_back("full CMLE stopped before reaching the gradient tolerance");

  Vector phi, theta;
  unpack(vpar, params, phi, theta);
  out.params = params;
  out.phi = phi;
  out.theta = theta;

  detail::Blocks b = detail::assemble_blocks(cs, f, params, phi, theta, data, v_inv, sigma_phi,
                                             out.kappa, opts.cond_limit_j);
  out.diag.cond_j = b.cond_j;
  out.diag.damped_j = b.damped;
  const Matrix jinv_sig_out = detail::solve_j(b, b.sigma_outer);
  const Matrix jinv_sig_plug = detail::solve_j(b, b.sigma_plugin);
  const Matrix cov_outer =
      detail::solve_j(b, jinv_sig_out.transpose()).transpose().block(0, 0, d, d) /
      static_cast<double>(n);
  const Matrix cov_plugin =
      detail::solve_j(b, jinv_sig_plug.transpose()).transpose().block(0, 0, d, d) /
      static_cast<double>(n);
  out.cov_beta = opts.sigma_source == SigmaSource::outer ? cov_outer : cov_plugin;
  out.cov_beta_alt = opts.sigma_source == SigmaSource::outer ? cov_plugin : cov_outer;
  out.se = out.cov_beta.diagonal().array().max(0.0).sqrt();
  out.params_mle = mle.params;
  out.se_mle = mle.cov_beta.diagonal().array().sqrt();
  const double zq = detail::z_quantile(opts.alpha);
  out.ci_lo = params.beta - zq * out.se;
  out.ci_hi = params.beta + zq * out.se;
  out.re_vs_mle = (mle.cov_beta.diagonal().array() / out.cov_beta.diagonal().array()).matrix();
  out.ellipsoid = detail::invert_spd(out.cov_beta, "sandwich covariance");
  out.chi2_crit =
      boost::math::quantile(boost::math::chi_squared_distribution<double>(d), 1.0 - opts.alpha);

  out.diag.eta = eta;
  out.diag.eta_converged = res.lpNorm<Eigen::Infinity>() <= 100.0 * tol;
  return out;
}

inline FitResult fit_mle_result(FamilyKind f, const Dataset& data, const MleFit& mle,
                                double alpha = 0.05) {
  (void)data;
  return detail::mle_as_result(f, mle, alpha, "mle");
}

}  // namespace aggfuse
