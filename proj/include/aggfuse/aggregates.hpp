#pragma once

#include <optional>
#include <string>
#include <vector>

#include "families.hpp"
#include "shift.hpp"
#include "types.hpp"

namespace aggfuse {

// Which functional of the AD population a summary reports.
enum class AdKind {
  marginal_outcome_mean,        // E(Y*)
  marginal_covariate_mean,      // E(X*_T) for target covariates T
  outcome_mean_given_covariates,  // E(Y* | X* in Omega)
  covariate_mean_given_outcome    // E(X*_T | Y* in (a, b])
};

inline std::string ad_kind_name(AdKind k) {
  switch (k) {
    case AdKind::marginal_outcome_mean: return "marginal_outcome_mean";
    case AdKind::marginal_covariate_mean: return "marginal_covariate_mean";
    case AdKind::outcome_mean_given_covariates: return "outcome_mean_given_covariates";
    case AdKind::covariate_mean_given_outcome: return "covariate_mean_given_outcome";
  }
  return "?";
}

inline AdKind parse_ad_kind(const std::string& s) {
  if (s == "marginal_outcome_mean") return AdKind::marginal_outcome_mean;
  if (s == "marginal_covariate_mean") return AdKind::marginal_covariate_mean;
  if (s == "outcome_mean_given_covariates") return AdKind::outcome_mean_given_covariates;
  if (s == "covariate_mean_given_outcome") return AdKind::covariate_mean_given_outcome;
  throw parse_error("unknown AD kind: " + s);
}

// Half-open interval (lo, hi]; either end may be infinite.
struct Interval {
  double lo = -kInf;
  double hi = kInf;
  bool contains(double v) const { return v > lo && v <= hi; }
};

// One conjunct of a covariate subgroup: x_j in (lo, hi] or x_j in a finite
// category set.
struct CovariateClause {
  int covariate = -1;
  bool is_interval = true;
  Interval interval;
  std::vector<double> categories;

  bool contains(const Vector& x) const {
    const double v = x(covariate);
    if (is_interval) return interval.contains(v);
    for (double c : categories)
      if (v == c) return true;
    return false;
  }
};

// Subgroup defined either in covariate space (conjunction of clauses) or in
// outcome space (a single interval); marginal summaries leave both empty.
struct SubgroupPredicate {
  std::vector<CovariateClause> clauses;
  std::optional<Interval> outcome_interval;

  bool contains(const Vector& x) const {
    for (const auto& c : clauses)
      if (!c.contains(x)) return false;
    return true;
  }
  bool trivial() const { return clauses.empty() && !outcome_interval; }
};

// One reported aggregate: the kind, where it was measured, its value block,
// the AD sample size behind it, and (optionally) its sampling variance.
struct AdSummary {
  AdKind kind = AdKind::marginal_outcome_mean;
  SubgroupPredicate subgroup;
  std::vector<int> target_covariates;  // for covariate-mean kinds
  Vector value;
  long sample_size = -1;  // N; fits refuse to run without it
  std::optional<Matrix> variance;  // Var of sqrt(N) (phi_tilde - phi), dim x dim
  std::string label;

  Eigen::Index dim() const {
    switch (kind) {
      case AdKind::marginal_outcome_mean:
      case AdKind::outcome_mean_given_covariates: return 1;
      case AdKind::marginal_covariate_mean:
      case AdKind::covariate_mean_given_outcome:
        return static_cast<Eigen::Index>(target_covariates.size());
    }
    return 0;
  }

  void validate(Eigen::Index p) const {
    const bool covariate_kind = kind == AdKind::marginal_covariate_mean ||
                                kind == AdKind::covariate_mean_given_outcome;
    if (covariate_kind) {
      if (target_covariates.empty())
        throw parse_error("summary '" + label + "': covariate-mean kind needs target covariates");
      for (int j : target_covariates)
        if (j < 0 || j >= p) throw parse_error("summary '" + label + "': target covariate out of range");
    } else if (!target_covariates.empty()) {
      throw parse_error("summary '" + label + "': outcome-mean kind takes no target covariates");
    }
    if (kind == AdKind::outcome_mean_given_covariates && subgroup.clauses.empty())
      throw parse_error("summary '" + label + "': needs a covariate subgroup");
    if (kind == AdKind::covariate_mean_given_outcome && !subgroup.outcome_interval)
      throw parse_error("summary '" + label + "': needs an outcome interval");
    if (kind == AdKind::covariate_mean_given_outcome &&
        !(subgroup.outcome_interval->lo < subgroup.outcome_interval->hi))
      throw domain_error("summary '" + label + "': degenerate outcome interval");
    if ((kind == AdKind::marginal_outcome_mean || kind == AdKind::marginal_covariate_mean) &&
        !subgroup.trivial())
      throw parse_error("summary '" + label + "': marginal kind takes no subgroup");
    for (const auto& c : subgroup.clauses) {
      if (c.covariate < 0 || c.covariate >= p)
        throw parse_error("summary '" + label + "': subgroup covariate out of range");
      if (c.is_interval && !(c.interval.lo < c.interval.hi))
        throw domain_error("summary '" + label + "': degenerate covariate interval");
      if (!c.is_interval && c.categories.empty())
        throw parse_error("summary '" + label + "': empty category set");
    }
    if (value.size() != dim())
      throw parse_error("summary '" + label + "': value block has wrong length");
    if (variance && (variance->rows() != dim() || variance->cols() != dim()))
      throw parse_error("summary '" + label + "': variance block has wrong shape");
  }
};

// The full constraint system: the declared summaries plus the shift model.
// Every AD component contributes one phi parameter and one psi row, so
// q == r == psi_dim().
struct ConstraintSet {
  std::vector<AdSummary> summaries;
  ShiftSpec shift;

  Eigen::Index psi_dim() const {
    Eigen::Index r = 0;
    for (const auto& s : summaries) r += s.dim();
    return r;
  }
  Eigen::Index phi_dim() const { return psi_dim(); }
  Eigen::Index theta_dim() const { return shift.theta_dim(); }

  // Reported values stacked in declaration order; this is phi_tilde.
  Vector stacked_values() const {
    Vector v(psi_dim());
    Eigen::Index at = 0;
    for (const auto& s : summaries) {
      v.segment(at, s.dim()) = s.value;
      at += s.dim();
    }
    return v;
  }

  void validate(Eigen::Index p) const {
    if (summaries.empty()) return;
    for (const auto& s : summaries) s.validate(p);
    shift.validate(p);
    // Structurally identical summaries yield identical psi columns.
    for (std::size_t i = 0; i < summaries.size(); ++i)
      for (std::size_t j = i + 1; j < summaries.size(); ++j)
        if (same_structure(summaries[i], summaries[j]))
          throw identification_error("duplicate summaries: '" + summaries[i].label + "' and '" +
                                     summaries[j].label + "' declare the same functional");
  }

 private:
  static bool same_structure(const AdSummary& a, const AdSummary& b) {
    if (a.kind != b.kind || a.target_covariates != b.target_covariates) return false;
    const auto& sa = a.subgroup;
    const auto& sb = b.subgroup;
    if (sa.clauses.size() != sb.clauses.size()) return false;
    for (std::size_t k = 0; k < sa.clauses.size(); ++k) {
      const auto& ca = sa.clauses[k];
      const auto& cb = sb.clauses[k];
      if (ca.covariate != cb.covariate || ca.is_interval != cb.is_interval) return false;
      if (ca.is_interval) {
        if (ca.interval.lo != cb.interval.lo || ca.interval.hi != cb.interval.hi) return false;
      } else if (ca.categories != cb.categories) {
        return false;
      }
    }
    if (sa.outcome_interval.has_value() != sb.outcome_interval.has_value()) return false;
    if (sa.outcome_interval &&
        (sa.outcome_interval->lo != sb.outcome_interval->lo ||
         sa.outcome_interval->hi != sb.outcome_interval->hi))
      return false;
    return true;
  }
};

// psi row at one covariate point, with optional derivative blocks. The row
// for a summary with target functional phi is
//   psi(x) = w_x(x) * E{ m(Y*, x) | X* = x } * c(x),
// where c(x) = integral of w_y(y) f(y|x) dy and the inner expectation is
// under the tilted outcome law; with no shift this reduces to the plain
// conditional moment contrast.
struct PsiRowEval {
  Vector psi;     // r
  Matrix dbeta;   // r x d   (filled when with_jacobian)
  Matrix dphi;    // r x q
  Matrix dtheta;  // r x s
};

inline PsiRowEval psi_row_eval(const ConstraintSet& cs, FamilyKind f, const GlmParams& params,
                               const Vector& phi, const Vector& theta, const Vector& x,
                               bool with_jacobian) {
  const Eigen::Index r = cs.psi_dim();
  const Eigen::Index d = params.d();
  const Eigen::Index s = cs.theta_dim();
  const Eigen::Index sx = cs.shift.theta_x_dim();

  PsiRowEval out;
  out.psi = Vector::Zero(r);
  if (with_jacobian) {
    out.dbeta = Matrix::Zero(r, d);
    out.dphi = Matrix::Zero(r, r);
    out.dtheta = Matrix::Zero(r, s);
  }

  const double wx = shift_weight_x(cs.shift, theta, x);
  const Vector th_y = cs.shift.pps_active() ? theta_y_part(cs.shift, theta) : Vector();
  const Vector xt = with_jacobian ? extended(x) : Vector();

  Eigen::Index at = 0;
  for (const auto& summary : cs.summaries) {
    const Eigen::Index m = summary.dim();
    const bool outcome_kind = summary.kind == AdKind::marginal_outcome_mean ||
                              summary.kind == AdKind::outcome_mean_given_covariates;
    const bool indicator = summary.kind == AdKind::outcome_mean_given_covariates;
    if (indicator && !summary.subgroup.contains(x)) {
      at += m;
      continue;  // row and all derivatives vanish off the subgroup
    }

    TiltRequest req;
    req.need_mean = outcome_kind;
    if (summary.kind == AdKind::covariate_mean_given_outcome) {
      req.need_interval = true;
      req.a = summary.subgroup.outcome_interval->lo;
      req.b = summary.subgroup.outcome_interval->hi;
    }
    const TiltEval te = tilt_eval(f, params, x, th_y, req);
    const double A = cs.shift.pps_active() ? safe_exp(te.log_z) : 1.0;
    const double w = wx * A;

    switch (summary.kind) {
      case AdKind::marginal_outcome_mean:
      case AdKind::outcome_mean_given_covariates: {
        const double diff = te.mean - phi(at);
        out.psi(at) = w * diff;
        if (with_jacobian) {
          out.dbeta.row(at) = w * (te.dmean_dlp + diff * te.dlogz_dlp) * xt.transpose();
          out.dphi(at, at) = -w;
          for (Eigen::Index j = 0; j < te.dlogz_dtheta.size(); ++j)
            out.dtheta(at, sx + j) = w * (te.dmean_dtheta(j) + diff * te.dlogz_dtheta(j));
        }
        break;
      }
      case AdKind::covariate_mean_given_outcome: {
        for (Eigen::Index k = 0; k < m; ++k) {
          const double diff = x(summary.target_covariates[k]) - phi(at + k);
          out.psi(at + k) = w * diff * te.interval;
          if (with_jacobian) {
            out.dbeta.row(at + k) =
                w * diff * (te.dinterval_dlp + te.interval * te.dlogz_dlp) * xt.transpose();
            out.dphi(at + k, at + k) = -w * te.interval;
            for (Eigen::Index j = 0; j < te.dlogz_dtheta.size(); ++j)
              out.dtheta(at + k, sx + j) =
                  w * diff * (te.dinterval_dtheta(j) + te.interval * te.dlogz_dtheta(j));
          }
        }
        break;
      }
      case AdKind::marginal_covariate_mean: {
        for (Eigen::Index k = 0; k < m; ++k) {
          const double diff = x(summary.target_covariates[k]) - phi(at + k);
          out.psi(at + k) = w * diff;
          if (with_jacobian) {
            out.dbeta.row(at + k) = w * diff * te.dlogz_dlp * xt.transpose();
            out.dphi(at + k, at + k) = -w;
            for (Eigen::Index j = 0; j < te.dlogz_dtheta.size(); ++j)
              out.dtheta(at + k, sx + j) = w * diff * te.dlogz_dtheta(j);
          }
        }
        break;
      }
    }
    at += m;
  }

  if (with_jacobian && sx > 0) {
    // d psi / d theta_x = psi * h_x(x), row-wise.
    const Vector hx = shift_basis_x(cs.shift, x);
    for (Eigen::Index l = 0; l < sx; ++l) out.dtheta.col(l) = out.psi * hx(l);
  }
  return out;
}

inline Vector psi_row(const ConstraintSet& cs, FamilyKind f, const GlmParams& params,
                      const Vector& phi, const Vector& theta, const Vector& x) {
  return psi_row_eval(cs, f, params, phi, theta, x, false).psi;
}

// n x r matrix of estimating-function rows over the IPD covariates.
inline Matrix stack_psi(const ConstraintSet& cs, FamilyKind f, const GlmParams& params,
                        const Vector& phi, const Vector& theta, const Dataset& data) {
  const Eigen::Index n = data.n();
  Matrix out(n, cs.psi_dim());
  for (Eigen::Index i = 0; i < n; ++i)
    out.row(i) = psi_row(cs, f, params, phi, theta, data.X.row(i).transpose()).transpose();
  return out;
}

// Sample-average derivative blocks, laid out as in the variance assembly:
// dbeta is d x r, dphi q x r, dtheta s x r (transposes of the averaged
// per-row jacobians).
struct PsiJacobians {
  Matrix dbeta;
  Matrix dphi;
  Matrix dtheta;
};

inline PsiJacobians psi_jacobians(const ConstraintSet& cs, FamilyKind f, const GlmParams& params,
                                  const Vector& phi, const Vector& theta, const Dataset& data) {
  const Eigen::Index n = data.n();
  PsiJacobians out;
  out.dbeta = Matrix::Zero(params.d(), cs.psi_dim());
  out.dphi = Matrix::Zero(cs.phi_dim(), cs.psi_dim());
  out.dtheta = Matrix::Zero(cs.theta_dim(), cs.psi_dim());
  for (Eigen::Index i = 0; i < n; ++i) {
    const PsiRowEval e =
        psi_row_eval(cs, f, params, phi, theta, data.X.row(i).transpose(), true);
    out.dbeta += e.dbeta.transpose();
    out.dphi += e.dphi.transpose();
    out.dtheta += e.dtheta.transpose();
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  out.dbeta *= inv_n;
  out.dphi *= inv_n;
  out.dtheta *= inv_n;
  return out;
}

// Near-collinear psi columns make the constraint system redundant; the
// squared condition number of psi'psi/n is the detector.
inline double psi_gram_condition(const Matrix& psi) {
  if (psi.cols() == 0) return 1.0;
  const Matrix gram = psi.transpose() * psi / static_cast<double>(psi.rows());
  Eigen::JacobiSVD<Matrix> svd(gram);
  const auto& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  if (smin <= 0.0) return kInf;
  return sv(0) / smin;
}

inline void check_redundancy(const Matrix& psi, double cond_limit = 1e10) {
  const double c = psi_gram_condition(psi);
  if (c > cond_limit)
    throw identification_error(
        "redundant constraints: cond(psi'psi/n) = " + std::to_string(c) +
        " exceeds " + std::to_string(cond_limit));
}

}  // namespace aggfuse
