#pragma once

#include <cmath>

#include "types.hpp"

namespace aggfuse {

// Inner empirical-likelihood problem for a fixed n x r matrix of estimating
// rows psi_i: find the multiplier eta solving sum_i psi_i / (1 + eta'psi_i) = 0,
// which maximizes the concave dual D(eta) = sum_i log(1 + eta'psi_i).
// Implied weights are p_i = 1/{n (1 + eta'psi_i)}; a solution exists iff 0
// lies in the convex hull of the rows. The log is extended below z0 = 1/n by
// its second-order Taylor polynomial (log-star) so iterates can cross the
// boundary without leaving the domain.
struct ElSolution {
  Vector eta;            // r
  Vector weights;        // n, p_i
  Vector dlog_weights;   // n, d/dz log-star(z_i); equals 1/z_i at a valid solution
  double penalty = 0.0;  // sum_i log(1 + eta'psi_i) at the solution
  double residual_inf = 0.0;  // sup-norm of sum_i psi_i dlog-star(z_i)
  bool converged = false;
  int iterations = 0;
};

struct ElOptions {
  int max_iter = 50;
  double tol_scale = 1e-9;    // residual tolerance is tol_scale * n
  double step_floor = 1e-12;  // backtracking underflow => stalled
  double armijo = 1e-4;
};

namespace detail {

struct LogStar {
  double z0;
  double log_z0;
  explicit LogStar(double z0_in) : z0(z0_in), log_z0(std::log(z0_in)) {}
  double value(double z) const {
    if (z >= z0) return std::log(z);
    const double t = (z - z0) / z0;
    return log_z0 + t - 0.5 * t * t;
  }
  double deriv(double z) const { return z >= z0 ? 1.0 / z : (2.0 - z / z0) / z0; }
  double deriv2(double z) const { return z >= z0 ? -1.0 / (z * z) : -1.0 / (z0 * z0); }
};

}  // namespace detail

inline ElSolution solve_eta_impl(const Matrix& psi, const ElOptions& opts) {
  const Eigen::Index n = psi.rows();
  const Eigen::Index r = psi.cols();
  if (n == 0) throw domain_error("empirical likelihood needs at least one observation");

  ElSolution sol;
  sol.eta = Vector::Zero(r);
  sol.weights = Vector::Constant(n, 1.0 / static_cast<double>(n));
  sol.dlog_weights = Vector::Ones(n);
  if (r == 0) {
    sol.converged = true;
    return sol;
  }

  const detail::LogStar ls(1.0 / static_cast<double>(n));
  const double tol = opts.tol_scale * static_cast<double>(n);

  Vector eta = Vector::Zero(r);
  Vector z = Vector::Ones(n);  // z_i = 1 + eta'psi_i
  auto dual = [&](const Vector& zz) {
    double v = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) v += ls.value(zz(i));
    return v;
  };
  double value = 0.0;
  bool stalled = false;

  Vector grad(r);
  Matrix hess(r, r);
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    grad.setZero();
    hess.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double u = ls.deriv(z(i));
      grad.noalias() += psi.row(i).transpose() * u;
      hess.noalias() -= psi.row(i).transpose() * psi.row(i) * ls.deriv2(z(i));
    }
    sol.residual_inf = grad.lpNorm<Eigen::Infinity>();
    // Polish beyond the formal tolerance while Newton still makes progress;
    // quadratic convergence makes the extra steps nearly free and keeps the
    // implied weights summing to one at 1e-10.
    if (sol.residual_inf <= tol * 1e-4) break;

    Vector dir = hess.ldlt().solve(grad);  // hess is +sum psi psi' (-d2), PSD
    if (!dir.allFinite()) dir = grad;
    const double slope = grad.dot(dir);
    if (slope <= 0.0) {
      if (sol.residual_inf <= tol) break;
      dir = grad;
    }

    double step = 1.0;
    bool accepted = false;
    while (step >= opts.step_floor) {
      const Vector eta_try = eta + step * dir;
      const Vector z_try = (psi * eta_try).array() + 1.0;
      const double v_try = dual(z_try);
      if (std::isfinite(v_try) && v_try >= value + opts.armijo * step * grad.dot(dir)) {
        eta = eta_try;
        z = z_try;
        value = v_try;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      stalled = sol.residual_inf > tol;
      break;
    }
  }

  // Terminal polish: the Armijo test on the dual value stalls once the value
  // increments reach machine precision, which can leave the residual a few
  // orders above what one more Newton step attains. Take full steps while
  // they strictly reduce the residual; near the optimum this converges
  // quadratically and pushes the weight-sum defect |sum p - 1| = |eta'psi'p|
  // toward machine zero.
  for (int polish = 0; polish < 3; ++polish) {
    grad.setZero();
    hess.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      grad.noalias() += psi.row(i).transpose() * ls.deriv(z(i));
      hess.noalias() -= psi.row(i).transpose() * psi.row(i) * ls.deriv2(z(i));
    }
    const double r0 = grad.lpNorm<Eigen::Infinity>();
    if (r0 == 0.0) break;
    const Vector dir = hess.ldlt().solve(grad);
    if (!dir.allFinite()) break;
    const Vector eta_try = eta + dir;
    const Vector z_try = (psi * eta_try).array() + 1.0;
    Vector g_try = Vector::Zero(r);
    for (Eigen::Index i = 0; i < n; ++i)
      g_try.noalias() += psi.row(i).transpose() * ls.deriv(z_try(i));
    if (!(g_try.lpNorm<Eigen::Infinity>() < r0)) break;
    eta = eta_try;
    z = z_try;
    value = dual(z);
  }

  // Recompute residual at the final point.
  grad.setZero();
  for (Eigen::Index i = 0; i < n; ++i) grad.noalias() += psi.row(i).transpose() * ls.deriv(z(i));
  sol.residual_inf = grad.lpNorm<Eigen::Infinity>();
  sol.iterations = it;
  sol.eta = eta;
  sol.dlog_weights = Vector(n);
  for (Eigen::Index i = 0; i < n; ++i) sol.dlog_weights(i) = ls.deriv(z(i));
  sol.weights = sol.dlog_weights / static_cast<double>(n);
  sol.penalty = value;

  const double weight_sum = sol.weights.sum();
  const bool interior = z.minCoeff() >= ls.z0 * (1.0 - 1e-9);
  sol.converged = !stalled && sol.residual_inf <= tol && interior &&
                  std::abs(weight_sum - 1.0) <= 1e-8;
  return sol;
}

// Throwing variant: a stalled or invalid solution means 0 is outside (or on
// the boundary of) the convex hull of the psi rows.
inline ElSolution solve_eta(const Matrix& psi, const ElOptions& opts = ElOptions()) {
  ElSolution sol = solve_eta_impl(psi, opts);
  if (!sol.converged)
    throw hull_error("empirical likelihood failed: zero not in the convex hull of psi rows "
                     "(residual " + std::to_string(sol.residual_inf) + " after " +
                     std::to_string(sol.iterations) + " iterations)");
  return sol;
}

// Profile penalty sum_i log(1 + eta_hat'psi_i); nonnegative, and zero exactly
// when the sample moment of psi is already zero (eta_hat = 0).
inline double profile_penalty(const Matrix& psi, const ElOptions& opts = ElOptions()) {
  return solve_eta(psi, opts).penalty;
}

}  // namespace aggfuse
