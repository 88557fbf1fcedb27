// Independent reference implementations used only by the tests. Everything
// here is written from first principles (own density formulas, generic
// optimizers, brute-force integration) so that agreement with the library is
// evidence, not tautology.
#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "aggfuse/types.hpp"

namespace oracle {

using aggfuse::Matrix;
using aggfuse::Vector;

// ---------------------------------------------------------------------------
// densities, written out independently of the library

inline double gaussian_pdf(double y, double mu, double sigma) {
  const double z = (y - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * M_PI));
}

inline double gamma_pdf_shape_rate(double y, double shape, double rate) {
  if (y <= 0) return 0.0;
  return std::exp(shape * std::log(rate) + (shape - 1.0) * std::log(y) - rate * y -
                  std::lgamma(shape));
}

inline double poisson_pmf(long k, double lambda) {
  return std::exp(static_cast<double>(k) * std::log(lambda) - lambda -
                  std::lgamma(static_cast<double>(k) + 1.0));
}

inline double logistic_mean(double lp) { return 1.0 / (1.0 + std::exp(-lp)); }

// ---------------------------------------------------------------------------
// tilted-moment oracle: E[ exp(sum_j theta_j y^j) g(y) ] under the base law,
// by brute-force quadrature or series with independently coded densities.

struct TiltMoments {
  double z = 0.0;       // normalizer E[exp(theta' h(Y))]
  double m1 = 0.0;      // E*[Y] (tilted)
  double prob = 0.0;    // P*(a < Y <= b) when requested
};

inline double tilt_factor(const Vector& theta, double y) {
  double t = 0.0, yk = 1.0;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    yk *= y;
    t += theta(j) * yk;
  }
  return std::exp(std::min(t, 700.0));
}

// family: 0 gaussian(mu, sigma), 1 bernoulli(p1), 2 poisson(lambda),
// 3 gamma(shape, rate). a/b give the optional probability interval (a, b].
//
// Continuous families integrate the tilted density over an explicit window
// that covers the tilted law's mass; the interval probability integrates over
// the clipped subwindow so the quadrature never sees a discontinuity.
inline TiltMoments tilted_moments(int family, double par1, double par2, const Vector& theta,
                                  double a, double b) {
  TiltMoments out;
  // endpoint_singular: the density blows up (integrably) at the lower limit,
  // as the gamma pdf does for shape < 1; tanh-sinh nodes handle that case.
  auto continuous = [&](const std::function<double(double)>& density, double lo, double hi,
                        bool endpoint_singular) {
    auto integ = [&](auto&& g, double l, double h) {
      auto f = [&](double y) { return density(y) * g(y); };
      if (endpoint_singular) {
        boost::math::quadrature::tanh_sinh<double> ts(15);
        return ts.integrate(f, l, h, 1e-13);
      }
      return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, l, h, 15, 1e-13);
    };
    out.z = integ([](double) { return 1.0; }, lo, hi);
    out.m1 = integ([](double y) { return y; }, lo, hi) / out.z;
    const double pa = std::max(lo, a), pb = std::min(hi, b);
    out.prob = pb > pa ? integ([](double) { return 1.0; }, pa, pb) / out.z : 0.0;
  };
  auto discrete = [&](auto&& sum) {
    out.z = sum([&](double) { return 1.0; });
    out.m1 = sum([&](double y) { return y; }) / out.z;
    out.prob = sum([&](double y) { return (y > a && y <= b) ? 1.0 : 0.0; }) / out.z;
  };

  if (family == 0) {
    const double mu = par1, sigma = par2;
    // a linear tilt shifts the mean by sigma^2 theta1; widen the window to
    // cover both the base and the tilted law
    const double shift = theta.size() >= 1 ? sigma * sigma * theta(0) : 0.0;
    const double lo = std::min(mu, mu + shift) - 60.0 * sigma;
    const double hi = std::max(mu, mu + shift) + 60.0 * sigma;
    continuous([&](double y) { return tilt_factor(theta, y) * gaussian_pdf(y, mu, sigma); }, lo,
               hi, false);
  } else if (family == 1) {
    const double p1 = par1;
    discrete([&](auto&& g) {
      return (1.0 - p1) * tilt_factor(theta, 0.0) * g(0.0) + p1 * tilt_factor(theta, 1.0) * g(1.0);
    });
  } else if (family == 2) {
    const double lambda = par1;
    const long k_hi = static_cast<long>(lambda + 30.0 * std::sqrt(lambda + 1.0) + 200.0);
    discrete([&](auto&& g) {
      double s = 0.0;
      for (long k = 0; k <= k_hi; ++k)
        s += tilt_factor(theta, static_cast<double>(k)) * poisson_pmf(k, lambda) *
             g(static_cast<double>(k));
      return s;
    });
  } else if (family == 3) {
    const double shape = par1, rate = par2;
    // a linear tilt turns the rate into rate - theta1; size the window from
    // the smaller of the two rates so both laws' mass is covered
    double rate_min = rate;
    if (theta.size() >= 1 && theta(0) > 0.0 && rate - theta(0) > 0.0)
      rate_min = std::min(rate_min, rate - theta(0));
    const double hi = (shape + 50.0 * std::sqrt(shape) + 50.0) / rate_min;
    continuous([&](double y) { return tilt_factor(theta, y) * gamma_pdf_shape_rate(y, shape, rate); },
               0.0, hi, true);
  } else {
    throw std::logic_error("unknown oracle family");
  }
  return out;
}

// ---------------------------------------------------------------------------
// finite differences

inline double fd_step(double v) { return 1e-6 * std::max(1.0, std::abs(v)); }

inline double central_diff(const std::function<double(double)>& f, double x) {
  const double h = fd_step(x);
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline Vector central_grad(const std::function<double(const Vector&)>& f, const Vector& x) {
  Vector g(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vector hi = x, lo = x;
    const double h = fd_step(x(j));
    hi(j) += h;
    lo(j) -= h;
    g(j) = (f(hi) - f(lo)) / (2.0 * h);
  }
  return g;
}

// ---------------------------------------------------------------------------
// primal profile-weight solver: maximize sum_i log p_i over the simplex
// subject to sum_i p_i psi_i = 0, via softmax parameterization and an
// augmented Lagrangian with plain gradient-ascent inner loops. Slow and
// simple on purpose.

struct PrimalSolution {
  Vector weights;
  double log_weight_sum = 0.0;  // sum log(n p_i), comparable to -penalty
  double constraint_norm = 0.0;
  bool converged = false;
};

inline PrimalSolution primal_profile_weights(const Matrix& psi) {
  const Eigen::Index n = psi.rows(), r = psi.cols();
  Vector u = Vector::Zero(n);
  Vector lambda = Vector::Zero(r);
  double mu = 10.0;

  auto softmax = [&](const Vector& v) {
    Vector p = (v.array() - v.maxCoeff()).exp();
    p /= p.sum();
    return p;
  };
  auto constraint = [&](const Vector& p) { return Vector(psi.transpose() * p); };
  auto objective = [&](const Vector& v) {
    const Vector p = softmax(v);
    const Vector c = constraint(p);
    return p.array().log().sum() - lambda.dot(c) - 0.5 * mu * c.squaredNorm();
  };
  auto gradient = [&](const Vector& v) {
    const Vector p = softmax(v);
    const Vector c = constraint(p);
    // dF/dp_i, then through the softmax jacobian diag(p) - p p'
    Vector dfdp(n);
    for (Eigen::Index i = 0; i < n; ++i)
      dfdp(i) = 1.0 / p(i) - (lambda + mu * c).dot(psi.row(i));
    const double avg = p.dot(dfdp);
    return Vector((p.array() * (dfdp.array() - avg)).matrix());
  };

  PrimalSolution out;
  for (int outer = 0; outer < 60; ++outer) {
    // inner ascent with backtracking
    double step = 1.0;
    for (int it = 0; it < 4000; ++it) {
      const Vector g = gradient(u);
      if (g.lpNorm<Eigen::Infinity>() < 1e-12) break;
      const double f0 = objective(u);
      double s = step;
      bool moved = false;
      for (int ls = 0; ls < 60; ++ls) {
        const Vector trial = u + s * g;
        if (objective(trial) > f0 + 1e-12 * s * g.squaredNorm() * 0.0) {
          // accept any strict improvement; crude but robust
          if (objective(trial) > f0) {
            u = trial;
            step = std::min(s * 2.0, 1e6);
            moved = true;
            break;
          }
        }
        s *= 0.5;
      }
      if (!moved) break;
    }
    const Vector p = softmax(u);
    const Vector c = constraint(p);
    if (c.lpNorm<Eigen::Infinity>() < 1e-11) {
      out.weights = p;
      out.log_weight_sum = (p.array() * static_cast<double>(n)).log().sum();
      out.constraint_norm = c.lpNorm<Eigen::Infinity>();
      out.converged = true;
      return out;
    }
    lambda += mu * c;
    mu = std::min(mu * 5.0, 1e12);
  }
  const Vector p = softmax(u);
  out.weights = p;
  out.log_weight_sum = (p.array() * static_cast<double>(n)).log().sum();
  out.constraint_norm = constraint(p).lpNorm<Eigen::Infinity>();
  out.converged = false;
  return out;
}

// ---------------------------------------------------------------------------
// refining grid search maximizer over a box; recentres and shrinks around the
// incumbent. points_per_dim^dim evaluations per round.

inline Vector grid_maximize(const std::function<double(const Vector&)>& f, Vector center,
                            Vector half_width, int points_per_dim, int rounds) {
  const Eigen::Index dim = center.size();
  Vector best = center;
  double best_val = f(center);
  for (int round = 0; round < rounds; ++round) {
    std::vector<Eigen::Index> idx(dim, 0);
    while (true) {
      Vector x(dim);
      for (Eigen::Index j = 0; j < dim; ++j) {
        const double frac = points_per_dim == 1
                                ? 0.5
                                : static_cast<double>(idx[j]) / (points_per_dim - 1);
        x(j) = center(j) - half_width(j) + 2.0 * half_width(j) * frac;
      }
      const double v = f(x);
      if (std::isfinite(v) && v > best_val) {
        best_val = v;
        best = x;
      }
      Eigen::Index j = 0;
      for (; j < dim; ++j) {
        if (++idx[j] < points_per_dim) break;
        idx[j] = 0;
      }
      if (j == dim) break;
    }
    center = best;
    half_width *= 0.55;
  }
  return best;
}

}  // namespace oracle
