#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <functional>
#include <string>

#include "types.hpp"

namespace aggfuse {

enum class FamilyKind { gaussian, bernoulli_logit, poisson_log, gamma_log };

inline std::string family_name(FamilyKind f) {
  switch (f) {
    case FamilyKind::gaussian: return "gaussian";
    case FamilyKind::bernoulli_logit: return "bernoulli_logit";
    case FamilyKind::poisson_log: return "poisson_log";
    case FamilyKind::gamma_log: return "gamma_log";
  }
  return "?";
}

inline FamilyKind parse_family(const std::string& s) {
  if (s == "gaussian") return FamilyKind::gaussian;
  if (s == "bernoulli_logit" || s == "bernoulli") return FamilyKind::bernoulli_logit;
  if (s == "poisson_log" || s == "poisson") return FamilyKind::poisson_log;
  if (s == "gamma_log" || s == "gamma") return FamilyKind::gamma_log;
  throw parse_error("unknown family: " + s);
}

// Regression parameters. sigma is the gaussian error sd; nu the gamma shape.
// The gamma rate is lambda(x) = nu * exp(-x_tilde'beta), so the conditional
// mean is exp(x_tilde'beta) for every family with a log-type link here.
struct GlmParams {
  Vector beta;
  double sigma = 1.0;
  double nu = 1.0;

  Eigen::Index d() const { return beta.size(); }
};

inline double linear_predictor(const GlmParams& p, const Vector& x) {
  double lp = p.beta(0);
  for (Eigen::Index j = 0; j < x.size(); ++j) lp += p.beta(j + 1) * x(j);
  return lp;
}

namespace detail {

inline double norm_pdf(double z) {
  return 0.3989422804014326779399460599343818684759 * std::exp(-0.5 * z * z);
}
inline double norm_cdf(double z) {
  return 0.5 * std::erfc(-z * 0.7071067811865475244008443621048490392848);
}
inline double pois_log_pmf(double k, double log_lambda, double lambda) {
  return k * log_lambda - lambda - std::lgamma(k + 1.0);
}

}  // namespace detail

inline double log_density(FamilyKind f, const GlmParams& p, double y, const Vector& x) {
  const double lp = linear_predictor(p, x);
  switch (f) {
    case FamilyKind::gaussian: {
      const double z = (y - lp) / p.sigma;
      return -0.5 * z * z - std::log(p.sigma) - 0.91893853320467274178032973640561763986;
    }
    case FamilyKind::bernoulli_logit: {
      if (y != 0.0 && y != 1.0) return -kInf;
      return y * lp - softplus(lp);
    }
    case FamilyKind::poisson_log: {
      if (y < 0.0 || std::abs(y - std::round(y)) > 1e-8) return -kInf;
      return detail::pois_log_pmf(std::round(y), lp, safe_exp(lp));
    }
    case FamilyKind::gamma_log: {
      if (y <= 0.0) return -kInf;
      const double log_lambda = std::log(p.nu) - lp;
      return p.nu * log_lambda + (p.nu - 1.0) * std::log(y) - p.nu * safe_exp(-lp) * y -
             std::lgamma(p.nu);
    }
  }
  return -kInf;
}

// d log f / d beta. Shared structure: scalar u(y, lp) times x_tilde.
inline double score_scalar(FamilyKind f, const GlmParams& p, double y, double lp) {
  switch (f) {
    case FamilyKind::gaussian: return (y - lp) / (p.sigma * p.sigma);
    case FamilyKind::bernoulli_logit: return y - expit(lp);
    case FamilyKind::poisson_log: return y - safe_exp(lp);
    case FamilyKind::gamma_log: return p.nu * (y * safe_exp(-lp) - 1.0);
  }
  return kNaN;
}

inline Vector score_beta(FamilyKind f, const GlmParams& p, double y, const Vector& x) {
  return score_scalar(f, p, y, linear_predictor(p, x)) * extended(x);
}

// Second derivative scalar: hessian = h(y, lp) * x_tilde x_tilde'.
inline double hessian_scalar(FamilyKind f, const GlmParams& p, double y, double lp) {
  switch (f) {
    case FamilyKind::gaussian: return -1.0 / (p.sigma * p.sigma);
    case FamilyKind::bernoulli_logit: {
      const double q = expit(lp);
      return -q * (1.0 - q);
    }
    case FamilyKind::poisson_log: return -safe_exp(lp);
    case FamilyKind::gamma_log: return -p.nu * y * safe_exp(-lp);
  }
  return kNaN;
}

inline Matrix hessian_beta(FamilyKind f, const GlmParams& p, double y, const Vector& x) {
  const Vector xt = extended(x);
  return hessian_scalar(f, p, y, linear_predictor(p, x)) * (xt * xt.transpose());
}

inline double conditional_mean(FamilyKind f, const GlmParams& p, const Vector& x) {
  const double lp = linear_predictor(p, x);
  switch (f) {
    case FamilyKind::gaussian: return lp;
    case FamilyKind::bernoulli_logit: return expit(lp);
    case FamilyKind::poisson_log: return safe_exp(lp);
    case FamilyKind::gamma_log: return safe_exp(lp);
  }
  return kNaN;
}

inline double conditional_variance(FamilyKind f, const GlmParams& p, const Vector& x) {
  const double lp = linear_predictor(p, x);
  switch (f) {
    case FamilyKind::gaussian: return p.sigma * p.sigma;
    case FamilyKind::bernoulli_logit: {
      const double q = expit(lp);
      return q * (1.0 - q);
    }
    case FamilyKind::poisson_log: return safe_exp(lp);
    case FamilyKind::gamma_log: {
      const double mu = safe_exp(lp);
      return mu * mu / p.nu;
    }
  }
  return kNaN;
}

// Exponential tilt evaluation at one covariate point. For the tilted law
// f*(y|x) = f(y|x) exp{h(y)'theta} / Z(x), with h(y) = (y, ..., y^s), this
// bundles the normalizer, the tilted mean, the tilted probability of an
// outcome interval (a, b], and their derivatives with respect to the linear
// predictor and theta. theta of size zero means "no outcome tilt" and gives
// the base family quantities with log Z = 0.
struct TiltEval {
  double log_z = 0.0;
  double dlogz_dlp = 0.0;
  Vector dlogz_dtheta;

  double mean = kNaN;
  double dmean_dlp = kNaN;
  Vector dmean_dtheta;

  double interval = kNaN;
  double dinterval_dlp = kNaN;
  Vector dinterval_dtheta;
};

struct TiltRequest {
  bool need_mean = false;
  bool need_interval = false;
  double a = -kInf;  // interval (a, b]
  double b = kInf;
};

namespace detail {

// Closed forms for a degree-1 tilt exp(theta * y); these are the registry
// entries checked against the quadrature oracle.
inline TiltEval tilt_closed_form(FamilyKind f, const GlmParams& p, double lp, double theta,
                                 const TiltRequest& req) {
  TiltEval out;
  out.dlogz_dtheta = Vector::Zero(1);
  if (req.need_mean) out.dmean_dtheta = Vector::Zero(1);
  if (req.need_interval) out.dinterval_dtheta = Vector::Zero(1);

  switch (f) {
    case FamilyKind::gaussian: {
      // Tilted law: N(lp + sigma^2 theta, sigma^2).
      const double s2 = p.sigma * p.sigma;
      const double m = lp + s2 * theta;
      out.log_z = lp * theta + 0.5 * s2 * theta * theta;
      out.dlogz_dlp = theta;
      out.dlogz_dtheta(0) = m;
      if (req.need_mean) {
        out.mean = m;
        out.dmean_dlp = 1.0;
        out.dmean_dtheta(0) = s2;
      }
      if (req.need_interval) {
        const double za = (req.a - m) / p.sigma;
        const double zb = (req.b - m) / p.sigma;
        const double Fa = std::isfinite(req.a) ? norm_cdf(za) : 0.0;
        const double Fb = std::isfinite(req.b) ? norm_cdf(zb) : 1.0;
        const double fa = std::isfinite(req.a) ? norm_pdf(za) : 0.0;
        const double fb = std::isfinite(req.b) ? norm_pdf(zb) : 0.0;
        out.interval = Fb - Fa;
        const double dP_dm = -(fb - fa) / p.sigma;
        out.dinterval_dlp = dP_dm;
        out.dinterval_dtheta(0) = dP_dm * s2;
      }
      return out;
    }
    case FamilyKind::bernoulli_logit: {
      // Tilted law: Bernoulli(expit(lp + theta)).
      const double q = expit(lp);
      const double qs = expit(lp + theta);
      out.log_z = softplus(lp + theta) - softplus(lp);
      out.dlogz_dlp = qs - q;
      out.dlogz_dtheta(0) = qs;
      const double dqs = qs * (1.0 - qs);
      if (req.need_mean) {
        out.mean = qs;
        out.dmean_dlp = dqs;
        out.dmean_dtheta(0) = dqs;
      }
      if (req.need_interval) {
        const bool has0 = req.a < 0.0 && req.b >= 0.0;
        const bool has1 = req.a < 1.0 && req.b >= 1.0;
        out.interval = (has0 ? 1.0 - qs : 0.0) + (has1 ? qs : 0.0);
        const double dP_dq = (has1 ? 1.0 : 0.0) - (has0 ? 1.0 : 0.0);
        out.dinterval_dlp = dP_dq * dqs;
        out.dinterval_dtheta(0) = dP_dq * dqs;
      }
      return out;
    }
    case FamilyKind::poisson_log: {
      // Tilting by exp(theta y) multiplies the rate by exp(theta):
      // sum_y e^{theta y} lam^y e^{-lam} / y! = exp{lam (e^theta - 1)}.
      const double lam = safe_exp(lp);
      const double lam_s = safe_exp(lp + theta);
      out.log_z = lam * std::expm1(theta);
      out.dlogz_dlp = out.log_z;
      out.dlogz_dtheta(0) = lam_s;
      if (req.need_mean) {
        out.mean = lam_s;
        out.dmean_dlp = lam_s;
        out.dmean_dtheta(0) = lam_s;
      }
      if (req.need_interval) {
        // P(a < Y <= b) = F(floor b) - F(floor a); F(k) = Q(k+1, lam) and
        // dF(k)/dlam = -pmf(k; lam).
        const double ka = std::floor(req.a);
        const double kb = std::floor(req.b);
        const double Fa = req.a < 0.0 ? 0.0
                          : std::isfinite(req.a) ? boost::math::gamma_q(ka + 1.0, lam_s)
                                                 : 1.0;
        const double Fb = req.b < 0.0 ? 0.0
                          : std::isfinite(req.b) ? boost::math::gamma_q(kb + 1.0, lam_s)
                                                 : 1.0;
        out.interval = Fb - Fa;
        double dP_dlam = 0.0;
        if (req.b >= 0.0 && std::isfinite(req.b))
          dP_dlam -= std::exp(pois_log_pmf(kb, lp + theta, lam_s));
        if (req.a >= 0.0 && std::isfinite(req.a))
          dP_dlam += std::exp(pois_log_pmf(ka, lp + theta, lam_s));
        out.dinterval_dlp = dP_dlam * lam_s;
        out.dinterval_dtheta(0) = dP_dlam * lam_s;
      }
      return out;
    }
    case FamilyKind::gamma_log: {
      // Tilted law: Gamma(nu, lambda - theta), defined only for theta < lambda.
      const double lam = p.nu * safe_exp(-lp);
      const double rho = lam - theta;
      if (rho <= 0.0)
        throw domain_error("gamma tilt infeasible: theta >= min rate lambda(x)");
      out.log_z = p.nu * (std::log(lam) - std::log(rho));
      out.dlogz_dlp = p.nu * theta / rho;
      out.dlogz_dtheta(0) = p.nu / rho;
      if (req.need_mean) {
        out.mean = p.nu / rho;
        out.dmean_dlp = p.nu * lam / (rho * rho);
        out.dmean_dtheta(0) = p.nu / (rho * rho);
      }
      if (req.need_interval) {
        const double lg = std::lgamma(p.nu);
        auto cdf = [&](double y) { return boost::math::gamma_p(p.nu, rho * y); };
        // d/drho P(nu, rho y) = y (rho y)^{nu-1} e^{-rho y} / Gamma(nu)
        auto dcdf_drho = [&](double y) {
          const double z = rho * y;
          return std::exp(std::log(y) + (p.nu - 1.0) * std::log(z) - z - lg);
        };
        const bool fa = req.a > 0.0 && std::isfinite(req.a);
        const bool fb = req.b > 0.0 && std::isfinite(req.b);
        const double Fa = fa ? cdf(req.a) : (req.a <= 0.0 ? 0.0 : 1.0);
        const double Fb = fb ? cdf(req.b) : (req.b <= 0.0 ? 0.0 : 1.0);
        out.interval = Fb - Fa;
        const double dP_drho = (fb ? dcdf_drho(req.b) : 0.0) - (fa ? dcdf_drho(req.a) : 0.0);
        out.dinterval_dlp = dP_drho * (-lam);
        out.dinterval_dtheta(0) = -dP_drho;
      }
      return out;
    }
  }
  throw domain_error("unknown family");
}

// Generic tilt of arbitrary degree s, h(y) = (y, ..., y^s). Continuous
// families use adaptive Gauss-Kronrod; discrete families sum the series.
// Everything reduces to moments of the unnormalized tilted measure.
class GenericTilt {
 public:
  GenericTilt(FamilyKind f, const GlmParams& p, double lp, const Vector& theta)
      : f_(f), p_(p), lp_(lp), theta_(theta) {}

  TiltEval eval(const TiltRequest& req) const {
    TiltEval out;
    const auto s = theta_.size();
    const double Z = moment([](double) { return 1.0; }, -kInf, kInf);
    if (!(Z > 0.0) || !std::isfinite(Z))
      throw domain_error("tilt normalizer not finite: tilted density not integrable");
    out.log_z = std::log(Z);
    out.dlogz_dtheta = Vector(s);
    for (Eigen::Index j = 0; j < s; ++j)
      out.dlogz_dtheta(j) = moment([&](double y) { return power(y, j + 1); }, -kInf, kInf) / Z;
    out.dlogz_dlp = moment([&](double y) { return score_scalar(f_, p_, y, lp_); }, -kInf, kInf) / Z;

    if (req.need_mean) {
      out.mean = out.dlogz_dtheta(0);  // first tilted moment
      out.dmean_dtheta = Vector(s);
      for (Eigen::Index j = 0; j < s; ++j)
        out.dmean_dtheta(j) =
            moment([&](double y) { return power(y, j + 2); }, -kInf, kInf) / Z -
            out.mean * out.dlogz_dtheta(j);
      out.dmean_dlp =
          moment([&](double y) { return y * score_scalar(f_, p_, y, lp_); }, -kInf, kInf) / Z -
          out.mean * out.dlogz_dlp;
    }
    if (req.need_interval) {
      out.interval = moment([](double) { return 1.0; }, req.a, req.b) / Z;
      out.dinterval_dtheta = Vector(s);
      for (Eigen::Index j = 0; j < s; ++j)
        out.dinterval_dtheta(j) =
            moment([&](double y) { return power(y, j + 1); }, req.a, req.b) / Z -
            out.interval * out.dlogz_dtheta(j);
      out.dinterval_dlp =
          moment([&](double y) { return score_scalar(f_, p_, y, lp_); }, req.a, req.b) / Z -
          out.interval * out.dlogz_dlp;
    }
    return out;
  }

  // E{ g(Y) 1(a < Y <= b) } under the normalized tilted law.
  double range_mean(const std::function<double(double)>& g, double a, double b) const {
    const double Z = moment([](double) { return 1.0; }, -kInf, kInf);
    if (!(Z > 0.0) || !std::isfinite(Z))
      throw domain_error("tilt normalizer not finite: tilted density not integrable");
    return moment(g, a, b) / Z;
  }

 private:
  static double power(double y, Eigen::Index k) {
    double r = 1.0;
    for (Eigen::Index i = 0; i < k; ++i) r *= y;
    return r;
  }

  double tilt_exponent(double y) const {
    double t = 0.0, yk = 1.0;
    for (Eigen::Index j = 0; j < theta_.size(); ++j) {
      yk *= y;
      t += theta_(j) * yk;
    }
    return t;
  }

  // integral (or sum) of g(y) * f(y|x) * exp(h(y)'theta) over (a, b].
  double moment(const std::function<double(double)>& g, double a, double b) const {
    if (f_ == FamilyKind::bernoulli_logit || f_ == FamilyKind::poisson_log)
      return discrete_moment(g, a, b);
    auto integrand = [&](double y) {
      const double t = log_density_at_lp(y) + tilt_exponent(y);
      return std::exp(std::min(t, kExpCap)) * g(y);
    };
    const double lo = f_ == FamilyKind::gamma_log ? std::max(0.0, a) : a;
    const double hi = b;
    if (hi <= lo) return 0.0;
    double err = 0.0;
    const double v = boost::math::quadrature::gauss_kronrod<double, 15>::integrate(
        integrand, lo, hi, 12, 1e-10, &err);
    return v;
  }

  double discrete_moment(const std::function<double(double)>& g, double a, double b) const {
    if (f_ == FamilyKind::bernoulli_logit) {
      double acc = 0.0;
      for (double y : {0.0, 1.0})
        if (y > a && y <= b)
          acc += std::exp(log_density_at_lp(y) + tilt_exponent(y)) * g(y);
      return acc;
    }
    // Poisson series. Tilts of degree >= 2 with positive leading coefficient
    // outgrow the factorial decay; detect the divergence instead of looping.
    const double lam = safe_exp(lp_);
    const double k_hi = lam + 12.0 * std::sqrt(lam + 1.0) + 50.0;
    double acc = 0.0, prev = kInf;
    const double k0 = std::max(0.0, std::floor(a) + 1.0);
    for (double k = k0; k <= 1e6; ++k) {
      if (k > b) break;
      const double lw = pois_log_pmf(k, lp_, lam) + tilt_exponent(k);
      const double w = std::exp(std::min(lw, kExpCap));
      acc += w * g(k);
      if (k > k_hi) {
        if (w >= prev || lw >= kExpCap)
          throw domain_error("tilt normalizer not finite: poisson tilt series diverges");
        if (w < 1e-18 * std::max(std::abs(acc), 1e-300)) break;
      }
      prev = w;
    }
    return acc;
  }

  double log_density_at_lp(double y) const {
    switch (f_) {
      case FamilyKind::gaussian: {
        const double z = (y - lp_) / p_.sigma;
        return -0.5 * z * z - std::log(p_.sigma) - 0.91893853320467274178032973640561763986;
      }
      case FamilyKind::bernoulli_logit: return y * lp_ - softplus(lp_);
      case FamilyKind::poisson_log: return pois_log_pmf(y, lp_, safe_exp(lp_));
      case FamilyKind::gamma_log: {
        const double log_lambda = std::log(p_.nu) - lp_;
        return p_.nu * log_lambda + (p_.nu - 1.0) * std::log(y) -
               p_.nu * safe_exp(-lp_) * y - std::lgamma(p_.nu);
      }
    }
    return -kInf;
  }

  FamilyKind f_;
  const GlmParams& p_;
  double lp_;
  Vector theta_;
};

}  // namespace detail

inline TiltEval tilt_eval(FamilyKind f, const GlmParams& p, const Vector& x,
                          const Vector& theta_y, const TiltRequest& req,
                          bool force_generic = false) {
  if (req.need_interval && !(req.a < req.b))
    throw domain_error("degenerate outcome interval: lo >= hi");
  const double lp = linear_predictor(p, x);
  if (theta_y.size() == 0) {
    // No outcome tilt: closed form with theta = 0, then drop the theta slots.
    TiltEval out = detail::tilt_closed_form(f, p, lp, 0.0, req);
    out.dlogz_dtheta.resize(0);
    out.dmean_dtheta.resize(0);
    out.dinterval_dtheta.resize(0);
    return out;
  }
  if (theta_y.size() == 1 && !force_generic)
    return detail::tilt_closed_form(f, p, lp, theta_y(0), req);
  return detail::GenericTilt(f, p, lp, theta_y).eval(req);
}

inline double interval_probability(FamilyKind f, const GlmParams& p, const Vector& x,
                                   double a, double b) {
  TiltRequest req;
  req.need_interval = true;
  req.a = a;
  req.b = b;
  return tilt_eval(f, p, x, Vector(), req).interval;
}

inline double log_tilt_normalizer(FamilyKind f, const GlmParams& p, const Vector& x,
                                  const Vector& theta_y) {
  return tilt_eval(f, p, x, theta_y, TiltRequest()).log_z;
}

inline double tilted_mean(FamilyKind f, const GlmParams& p, const Vector& x,
                          const Vector& theta_y) {
  TiltRequest req;
  req.need_mean = true;
  return tilt_eval(f, p, x, theta_y, req).mean;
}

// Variance of the tilted law; used by the plug-in AD variance estimate.
inline double tilted_variance(FamilyKind f, const GlmParams& p, const Vector& x,
                              const Vector& theta_y) {
  if (theta_y.size() == 0) return conditional_variance(f, p, x);
  if (theta_y.size() == 1) {
    const double lp = linear_predictor(p, x);
    const double th = theta_y(0);
    switch (f) {
      case FamilyKind::gaussian: return p.sigma * p.sigma;
      case FamilyKind::bernoulli_logit: {
        const double q = expit(lp + th);
        return q * (1.0 - q);
      }
      case FamilyKind::poisson_log: return safe_exp(lp + th);
      case FamilyKind::gamma_log: {
        const double rho = p.nu * safe_exp(-lp) - th;
        if (rho <= 0.0) throw domain_error("gamma tilt infeasible: theta >= min rate lambda(x)");
        return p.nu / (rho * rho);
      }
    }
  }
  // Generic second moment via the same machinery: Var = E*y^2 - (E*y)^2, and
  // E*y^2 is dlogz_dtheta(1) when s >= 2; otherwise extend theta with a zero.
  Vector th = theta_y;
  if (th.size() < 2) {
    th = Vector::Zero(2);
    th.head(theta_y.size()) = theta_y;
  }
  TiltRequest req;
  req.need_mean = true;
  const TiltEval e = detail::GenericTilt(
      f, p, linear_predictor(p, x), th).eval(req);
  return e.dlogz_dtheta(1) - e.mean * e.mean;
}

// E{ Y 1(a < Y <= b) } under the tilted outcome law: the first moment
// restricted to an outcome cell. Closed forms for tilts of order <= 1;
// higher orders integrate numerically.
inline double interval_first_moment(FamilyKind f, const GlmParams& p, const Vector& x,
                                    const Vector& theta_y, double a, double b) {
  if (!(a < b)) throw domain_error("degenerate outcome interval: lo >= hi");
  const double lp = linear_predictor(p, x);
  if (theta_y.size() >= 2)
    return detail::GenericTilt(f, p, lp, theta_y).range_mean([](double y) { return y; }, a, b);
  const double th = theta_y.size() == 1 ? theta_y(0) : 0.0;
  switch (f) {
    case FamilyKind::gaussian: {
      // truncated normal: E{Y; a < Y <= b} = mu (Phi_b - Phi_a) - sigma (phi_b - phi_a)
      const double mu = lp + p.sigma * p.sigma * th;
      auto cdf = [&](double y) { return std::isfinite(y) ? detail::norm_cdf((y - mu) / p.sigma)
                                                         : (y > 0.0 ? 1.0 : 0.0); };
      auto pdf = [&](double y) {
        if (!std::isfinite(y)) return 0.0;
        const double z = (y - mu) / p.sigma;
        return std::exp(-0.5 * z * z) * 0.398942280401432677939946059934381868;
      };
      return mu * (cdf(b) - cdf(a)) - p.sigma * (pdf(b) - pdf(a));
    }
    case FamilyKind::bernoulli_logit:
      return (a < 1.0 && 1.0 <= b) ? expit(lp + th) : 0.0;
    case FamilyKind::poisson_log: {
      // k pmf(k; lam) = lam pmf(k-1; lam), so the cell sum shifts down by one
      const double lam_s = safe_exp(lp + th);
      auto cdf = [&](double t) {
        if (t < 0.0) return 0.0;
        if (!std::isfinite(t)) return 1.0;
        return boost::math::gamma_q(std::floor(t) + 1.0, lam_s);
      };
      return lam_s * (cdf(b - 1.0) - cdf(a - 1.0));
    }
    case FamilyKind::gamma_log: {
      // y pdf(y; nu, rho) = (nu / rho) pdf(y; nu + 1, rho)
      const double rho = p.nu * safe_exp(-lp) - th;
      if (rho <= 0.0) throw domain_error("gamma tilt infeasible: theta >= min rate lambda(x)");
      auto cdf = [&](double y) {
        if (y <= 0.0) return 0.0;
        if (!std::isfinite(y)) return 1.0;
        return boost::math::gamma_p(p.nu + 1.0, rho * y);
      };
      return (p.nu / rho) * (cdf(b) - cdf(a));
    }
  }
  throw domain_error("unknown family");
}

}  // namespace aggfuse
