#pragma once

#include <Eigen/Dense>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace aggfuse {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// exp() saturates at this argument so tilt weights stay finite; derivatives
// keep their sign through the cap.
constexpr double kExpCap = 700.0;

inline double safe_exp(double x) { return std::exp(x < kExpCap ? x : kExpCap); }

// log(1 + e^x) without overflow.
inline double softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double expit(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Individual-level rows: X holds covariates only (no intercept column).
struct Dataset {
  Matrix X;
  Vector y;
  std::vector<std::string> covariate_names;
  std::string outcome_name = "y";

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index p() const { return X.cols(); }
};

// x_tilde = (1, x'): design row with intercept prepended.
inline Vector extended(const Vector& x) {
  Vector xt(x.size() + 1);
  xt(0) = 1.0;
  xt.tail(x.size()) = x;
  return xt;
}

// Error taxonomy; the CLI maps each type to its own exit code.
struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct identification_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct hull_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct singular_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct domain_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct convergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace aggfuse
