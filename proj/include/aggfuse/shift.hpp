#pragma once

#include <string>
#include <vector>

#include "types.hpp"

namespace aggfuse {

enum class ShiftMode { none, covariate, prior_prob, both };

inline std::string shift_mode_name(ShiftMode m) {
  switch (m) {
    case ShiftMode::none: return "none";
    case ShiftMode::covariate: return "covariate";
    case ShiftMode::prior_prob: return "prior_prob";
    case ShiftMode::both: return "both";
  }
  return "?";
}

inline ShiftMode parse_shift_mode(const std::string& s) {
  if (s == "none") return ShiftMode::none;
  if (s == "covariate") return ShiftMode::covariate;
  if (s == "prior_prob" || s == "pps") return ShiftMode::prior_prob;
  if (s == "both") return ShiftMode::both;
  throw parse_error("unknown shift mode: " + s);
}

// Exponential-family shift between the IPD source and the AD population:
//   covariate shift   g*(x)/g(x)    = exp{h_x(x)'theta_x},  h_x = selected covariates
//   prior-prob shift  f*(y|x)/f(y|x) propto exp{h_y(y)'theta_y}, h_y(y) = (y, .., y^s)
// theta is packed as [theta_x; theta_y].
struct ShiftSpec {
  ShiftMode mode = ShiftMode::none;
  std::vector<int> hx;  // covariate indices entering h_x
  int s = 1;            // polynomial degree of h_y

  bool covariate_active() const {
    return mode == ShiftMode::covariate || mode == ShiftMode::both;
  }
  bool pps_active() const {
    return mode == ShiftMode::prior_prob || mode == ShiftMode::both;
  }
  Eigen::Index theta_x_dim() const {
    return covariate_active() ? static_cast<Eigen::Index>(hx.size()) : 0;
  }
  Eigen::Index theta_y_dim() const { return pps_active() ? s : 0; }
  Eigen::Index theta_dim() const { return theta_x_dim() + theta_y_dim(); }

  void validate(Eigen::Index p) const {
    if (covariate_active() && hx.empty())
      throw identification_error("covariate shift declared without shift covariates");
    for (int j : hx)
      if (j < 0 || j >= p) throw parse_error("shift covariate index out of range");
    for (std::size_t a = 0; a < hx.size(); ++a)
      for (std::size_t b = a + 1; b < hx.size(); ++b)
        if (hx[a] == hx[b]) throw parse_error("duplicate shift covariate index");
    if (pps_active() && s < 1) throw parse_error("prior-prob shift needs degree s >= 1");
  }
};

inline Vector theta_x_part(const ShiftSpec& spec, const Vector& theta) {
  return theta.head(spec.theta_x_dim());
}

inline Vector theta_y_part(const ShiftSpec& spec, const Vector& theta) {
  return theta.tail(spec.theta_y_dim());
}

// Covariate-shift weight w_x(x) = exp{h_x(x)'theta_x}; identically 1 when the
// mode carries no covariate component.
inline double shift_weight_x(const ShiftSpec& spec, const Vector& theta, const Vector& x) {
  if (!spec.covariate_active()) return 1.0;
  const Vector tx = theta_x_part(spec, theta);
  double t = 0.0;
  for (std::size_t l = 0; l < spec.hx.size(); ++l) t += tx(l) * x(spec.hx[l]);
  return safe_exp(t);
}

// h_x(x) as a vector, for jacobians: d w_x / d theta_x = w_x * h_x(x).
inline Vector shift_basis_x(const ShiftSpec& spec, const Vector& x) {
  Vector h(spec.theta_x_dim());
  for (Eigen::Index l = 0; l < h.size(); ++l) h(l) = x(spec.hx[l]);
  return h;
}

}  // namespace aggfuse
