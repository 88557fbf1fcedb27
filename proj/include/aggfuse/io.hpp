#pragma once

#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aggregates.hpp"
#include "estimators.hpp"
#include "simulation.hpp"
#include "types.hpp"

namespace aggfuse {

using nlohmann::json;

// ---------------------------------------------------------------------------
// deterministic number formatting (shared by CSV and JSON report emitters)

inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline json json_num(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

// ---------------------------------------------------------------------------
// CSV input

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  return out;
}

}  // namespace detail

inline CsvTable read_csv(std::istream& in, const std::string& origin = "csv") {
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw parse_error(origin + ": empty file");
  table.columns = detail::split_csv_line(line);
  for (const auto& c : table.columns)
    if (c.empty()) throw parse_error(origin + ": empty column name in header");
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != table.columns.size())
      throw parse_error(origin + " line " + std::to_string(lineno) + ": expected " +
                        std::to_string(table.columns.size()) + " fields, got " +
                        std::to_string(cells.size()));
    std::vector<double> row(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      try {
        std::size_t used = 0;
        row[j] = std::stod(cells[j], &used);
        if (used != cells[j].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw parse_error(origin + " line " + std::to_string(lineno) + ", column '" +
                          table.columns[j] + "': not a number: '" + cells[j] + "'");
      }
    }
    table.rows.push_back(std::move(row));
  }
  if (table.rows.empty()) throw parse_error(origin + ": no data rows");
  return table;
}

inline CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open file: " + path);
  return read_csv(in, path);
}

// Assemble a Dataset from a table: one outcome column plus covariates
// (every remaining column when the list is empty).
inline Dataset make_dataset(const CsvTable& table, const std::string& outcome,
                            std::vector<std::string> covariates = {}) {
  auto find_col = [&](const std::string& name) -> std::size_t {
    for (std::size_t j = 0; j < table.columns.size(); ++j)
      if (table.columns[j] == name) return j;
    throw parse_error("no such column: '" + name + "'");
  };
  const std::size_t yc = find_col(outcome);
  if (covariates.empty())
    for (std::size_t j = 0; j < table.columns.size(); ++j)
      if (j != yc) covariates.push_back(table.columns[j]);
  Dataset d;
  d.outcome_name = outcome;
  d.covariate_names = covariates;
  d.y.resize(static_cast<Eigen::Index>(table.rows.size()));
  d.X.resize(static_cast<Eigen::Index>(table.rows.size()),
             static_cast<Eigen::Index>(covariates.size()));
  std::vector<std::size_t> idx;
  for (const auto& c : covariates) {
    if (c == outcome) throw parse_error("outcome column listed as covariate: '" + c + "'");
    idx.push_back(find_col(c));
  }
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    d.y(static_cast<Eigen::Index>(i)) = table.rows[i][yc];
    for (std::size_t j = 0; j < idx.size(); ++j)
      d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = table.rows[i][idx[j]];
  }
  return d;
}

// ---------------------------------------------------------------------------
// AD summaries: JSON schema
//
// [
//   {"kind": "outcome_mean_given_covariates",
//    "subgroup": {"clauses": [{"covariate": "x1", "interval": [-1, 1]},
//                             {"covariate": "x2", "categories": [1]}],
//                 "outcome_interval": [0.5, null]},
//    "covariates": ["x1", "x2"],   // target covariates, covariate-mean kinds
//    "value": 0.38,                // scalar or array
//    "n": 4052,
//    "variance": 0.9,              // scalar or square matrix, optional
//    "label": "optional"}
// , ... ]
//
// Interval endpoints use null for an unbounded side. Covariates are referred
// to by name and resolved against the fitting dataset's columns.

namespace detail {

inline double interval_end(const json& j, bool lo, const std::string& ctx) {
  if (j.is_null()) return lo ? -kInf : kInf;
  if (!j.is_number()) throw parse_error(ctx + ": interval endpoint must be number or null");
  return j.get<double>();
}

inline Interval parse_interval(const json& j, const std::string& ctx) {
  if (!j.is_array() || j.size() != 2)
    throw parse_error(ctx + ": interval must be a [lo, hi] pair");
  return Interval{interval_end(j[0], true, ctx), interval_end(j[1], false, ctx)};
}

inline int resolve_covariate(const std::string& name, std::vector<std::string>& names,
                             bool allow_new, const std::string& ctx) {
  for (std::size_t k = 0; k < names.size(); ++k)
    if (names[k] == name) return static_cast<int>(k);
  if (!allow_new) throw parse_error(ctx + ": unknown covariate '" + name + "'");
  names.push_back(name);
  return static_cast<int>(names.size() - 1);
}

inline Vector parse_value_vector(const json& j, const std::string& ctx) {
  if (j.is_number()) return Vector::Constant(1, j.get<double>());
  if (j.is_array()) {
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t k = 0; k < j.size(); ++k) {
      if (!j[k].is_number()) throw parse_error(ctx + ": value entries must be numbers");
      v(static_cast<Eigen::Index>(k)) = j[k].get<double>();
    }
    return v;
  }
  throw parse_error(ctx + ": value must be a number or array");
}

inline Matrix parse_variance(const json& j, Eigen::Index m, const std::string& ctx) {
  if (j.is_number()) {
    if (m != 1) throw parse_error(ctx + ": scalar variance for a vector value");
    return Matrix::Constant(1, 1, j.get<double>());
  }
  if (!j.is_array() || j.size() != static_cast<std::size_t>(m))
    throw parse_error(ctx + ": variance must be an " + std::to_string(m) + "x" +
                      std::to_string(m) + " matrix");
  Matrix v(m, m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || row.size() != static_cast<std::size_t>(m))
      throw parse_error(ctx + ": variance rows must have length " + std::to_string(m));
    for (Eigen::Index c = 0; c < m; ++c) {
      const json& cell = row[static_cast<std::size_t>(c)];
      if (!cell.is_number()) throw parse_error(ctx + ": variance entries must be numbers");
      v(r, c) = cell.get<double>();
    }
  }
  return v;
}

}  // namespace detail

// Parse a JSON array of summaries. `names` supplies the covariate-name
// universe; when `allow_new_names` is set, unseen names are appended (used by
// schema validation without a dataset).
inline std::vector<AdSummary> parse_ad_json(const json& root, std::vector<std::string>& names,
                                            bool allow_new_names) {
  if (!root.is_array()) throw parse_error("AD file: top level must be an array of summaries");
  std::vector<AdSummary> out;
  for (std::size_t si = 0; si < root.size(); ++si) {
    const std::string ctx = "AD summary " + std::to_string(si + 1);
    const json& j = root[si];
    if (!j.is_object()) throw parse_error(ctx + ": must be an object");
    AdSummary s;
    if (!j.contains("kind") || !j.at("kind").is_string())
      throw parse_error(ctx + ": missing 'kind'");
    s.kind = parse_ad_kind(j.at("kind").get<std::string>());
    if (j.contains("label")) s.label = j.at("label").get<std::string>();
    if (s.label.empty()) s.label = ad_kind_name(s.kind) + "#" + std::to_string(si + 1);

    if (j.contains("subgroup")) {
      const json& sub = j.at("subgroup");
      if (!sub.is_object()) throw parse_error(ctx + ": subgroup must be an object");
      if (sub.contains("clauses")) {
        const json& cl = sub.at("clauses");
        if (!cl.is_array()) throw parse_error(ctx + ": clauses must be an array");
        for (const json& c : cl) {
          CovariateClause clause;
          if (!c.contains("covariate") || !c.at("covariate").is_string())
            throw parse_error(ctx + ": clause missing 'covariate'");
          clause.covariate = detail::resolve_covariate(c.at("covariate").get<std::string>(),
                                                       names, allow_new_names, ctx);
          if (c.contains("interval")) {
            clause.is_interval = true;
            clause.interval = detail::parse_interval(c.at("interval"), ctx);
          } else if (c.contains("categories")) {
            clause.is_interval = false;
            const json& cats = c.at("categories");
            if (!cats.is_array() || cats.empty())
              throw parse_error(ctx + ": categories must be a non-empty array");
            for (const json& v : cats) {
              if (!v.is_number()) throw parse_error(ctx + ": categories must be numbers");
              clause.categories.push_back(v.get<double>());
            }
          } else {
            throw parse_error(ctx + ": clause needs 'interval' or 'categories'");
          }
          s.subgroup.clauses.push_back(std::move(clause));
        }
      }
      if (sub.contains("outcome_interval"))
        s.subgroup.outcome_interval = detail::parse_interval(sub.at("outcome_interval"), ctx);
    }

    if (j.contains("covariates")) {
      const json& tc = j.at("covariates");
      if (!tc.is_array()) throw parse_error(ctx + ": covariates must be an array of names");
      for (const json& v : tc) {
        if (!v.is_string()) throw parse_error(ctx + ": covariates must be names");
        s.target_covariates.push_back(
            detail::resolve_covariate(v.get<std::string>(), names, allow_new_names, ctx));
      }
    }

    if (!j.contains("value")) throw parse_error(ctx + ": missing 'value'");
    s.value = detail::parse_value_vector(j.at("value"), ctx);
    if (j.contains("n")) {
      if (!j.at("n").is_number()) throw parse_error(ctx + ": 'n' must be a number");
      const double n = j.at("n").get<double>();
      if (n <= 0 || n != std::floor(n))
        throw parse_error(ctx + ": 'n' must be a positive integer");
      s.sample_size = static_cast<long>(n);
    }
    if (j.contains("variance"))
      s.variance = detail::parse_variance(j.at("variance"), s.value.size(), ctx);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<AdSummary> parse_ad_file(const std::string& path,
                                            std::vector<std::string>& names,
                                            bool allow_new_names) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open file: " + path);
  json root;
  try {
    in >> root;
  } catch (const json::exception& e) {
    throw parse_error(std::string("AD file ") + path + ": " + e.what());
  }
  return parse_ad_json(root, names, allow_new_names);
}

inline json emit_interval(const Interval& iv) {
  json j = json::array();
  j.push_back(std::isfinite(iv.lo) ? json(iv.lo) : json(nullptr));
  j.push_back(std::isfinite(iv.hi) ? json(iv.hi) : json(nullptr));
  return j;
}

inline json emit_ad_json(const std::vector<AdSummary>& summaries,
                         const std::vector<std::string>& names) {
  json root = json::array();
  for (const auto& s : summaries) {
    json j;
    j["kind"] = ad_kind_name(s.kind);
    if (!s.subgroup.clauses.empty() || s.subgroup.outcome_interval) {
      json sub;
      if (!s.subgroup.clauses.empty()) {
        json cl = json::array();
        for (const auto& c : s.subgroup.clauses) {
          json cj;
          cj["covariate"] = names.at(static_cast<std::size_t>(c.covariate));
          if (c.is_interval)
            cj["interval"] = emit_interval(c.interval);
          else
            cj["categories"] = c.categories;
          cl.push_back(cj);
        }
        sub["clauses"] = cl;
      }
      if (s.subgroup.outcome_interval)
        sub["outcome_interval"] = emit_interval(*s.subgroup.outcome_interval);
      j["subgroup"] = sub;
    }
    if (!s.target_covariates.empty()) {
      json tc = json::array();
      for (int k : s.target_covariates) tc.push_back(names.at(static_cast<std::size_t>(k)));
      j["covariates"] = tc;
    }
    if (s.value.size() == 1)
      j["value"] = s.value(0);
    else
      j["value"] = std::vector<double>(s.value.data(), s.value.data() + s.value.size());
    if (s.sample_size > 0) j["n"] = s.sample_size;
    if (s.variance) {
      if (s.variance->size() == 1) {
        j["variance"] = (*s.variance)(0, 0);
      } else {
        json m = json::array();
        for (Eigen::Index r = 0; r < s.variance->rows(); ++r) {
          json row = json::array();
          for (Eigen::Index c = 0; c < s.variance->cols(); ++c) row.push_back((*s.variance)(r, c));
          m.push_back(row);
        }
        j["variance"] = m;
      }
    }
    if (!s.label.empty()) j["label"] = s.label;
    root.push_back(j);
  }
  return root;
}

// ---------------------------------------------------------------------------
// fit configuration and outcome standardization

struct FitConfig {
  FamilyKind family = FamilyKind::gaussian;
  std::string outcome;
  std::vector<std::string> covariates;  // empty: all non-outcome columns
  bool standardize_outcome = false;
  bool mle_only = false;
  FitOptions options;
  ShiftSpec shift;
};

struct OutcomeTransform {
  double center = 0.0, scale = 1.0;
  bool active = false;
};

// Affine outcome standardization, gaussian family only (the only family with
// affine equivariance). The same map is applied to outcome-referencing AD
// values and cut points; estimates are reported back on the original scale.
inline OutcomeTransform standardize_outcome(Dataset& data, std::vector<AdSummary>& summaries) {
  OutcomeTransform t;
  t.center = data.y.mean();
  const double sd = std::sqrt((data.y.array() - t.center).square().sum() /
                              std::max<Eigen::Index>(1, data.n() - 1));
  t.scale = sd > 0 ? sd : 1.0;
  t.active = true;
  data.y = (data.y.array() - t.center) / t.scale;
  auto map_iv = [&](Interval& iv) {
    if (std::isfinite(iv.lo)) iv.lo = (iv.lo - t.center) / t.scale;
    if (std::isfinite(iv.hi)) iv.hi = (iv.hi - t.center) / t.scale;
  };
  for (auto& s : summaries) {
    if (s.kind == AdKind::marginal_outcome_mean ||
        s.kind == AdKind::outcome_mean_given_covariates) {
      s.value = (s.value.array() - t.center) / t.scale;
      if (s.variance) *s.variance /= t.scale * t.scale;
    }
    if (s.subgroup.outcome_interval) map_iv(*s.subgroup.outcome_interval);
  }
  return t;
}

// Map a fit on the standardized scale back to the data scale:
// y = center + scale * y' shifts the intercept and scales every coefficient.
inline void unstandardize_result(FitResult& r, const OutcomeTransform& t) {
  if (!t.active) return;
  const double s = t.scale;
  auto map_beta = [&](Vector& b) {
    b *= s;
    b(0) += t.center;
  };
  map_beta(r.params.beta);
  r.params.sigma *= s;
  r.se *= s;
  r.se_mle *= s;
  r.ci_lo *= s;
  r.ci_lo(0) += t.center;
  r.ci_hi *= s;
  r.ci_hi(0) += t.center;
  r.cov_beta *= s * s;
  r.cov_beta_alt *= s * s;
  r.ellipsoid /= s * s;
  // phi/theta stay on the standardized scale; re_vs_mle is scale free.
}

// ---------------------------------------------------------------------------
// fit result JSON

inline json fit_result_json(const FitResult& r, const Dataset& data,
                            const OutcomeTransform& t) {
  json j;
  j["method"] = r.method;
  j["family"] = family_name(r.family);
  json est;
  est["intercept"] = r.params.beta(0);
  for (Eigen::Index k = 1; k < r.params.beta.size(); ++k)
    est[data.covariate_names.at(static_cast<std::size_t>(k - 1))] = r.params.beta(k);
  if (r.family == FamilyKind::gaussian) est["sigma"] = r.params.sigma;
  if (r.family == FamilyKind::gamma_log) est["shape"] = r.params.nu;
  j["estimates"] = est;
  auto vec = [](const Vector& v) {
    json a = json::array();
    for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(json_num(v(k)));
    return a;
  };
  auto mat = [](const Matrix& m) {
    json a = json::array();
    for (Eigen::Index r2 = 0; r2 < m.rows(); ++r2) {
      json row = json::array();
      for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(json_num(m(r2, c)));
      a.push_back(row);
    }
    return a;
  };
  j["beta"] = vec(r.params.beta);
  j["se"] = vec(r.se);
  j["ci_lower"] = vec(r.ci_lo);
  j["ci_upper"] = vec(r.ci_hi);
  j["cov_beta"] = mat(r.cov_beta);
  j["confidence_ellipsoid"] = {{"center", vec(r.params.beta)},
                               {"shape", mat(r.ellipsoid)},
                               {"chi2_critical", r.chi2_crit}};
  if (r.method != "mle") {
    j["phi"] = vec(r.phi);
    j["theta"] = vec(r.theta);
    j["re_vs_mle"] = vec(r.re_vs_mle);
    j["kappa"] = json_num(r.kappa);
    j["ad_sample_size"] = r.N;
    j["mle"] = {{"beta", vec(r.params_mle.beta)}, {"se", vec(r.se_mle)}};
    json diag;
    diag["cond_j"] = json_num(r.diag.cond_j);
    diag["damped_j"] = r.diag.damped_j;
    diag["eta"] = vec(r.diag.eta);
    diag["eta_converged"] = r.diag.eta_converged;
    if (std::isfinite(r.diag.gmm_objective)) diag["gmm_objective"] = r.diag.gmm_objective;
    diag["warnings"] = r.diag.warnings;
    diag["excluded_constraints"] = r.diag.excluded_constraints;
    j["diagnostics"] = diag;
  }
  if (t.active)
    j["outcome_standardization"] = {{"center", t.center}, {"scale", t.scale}};
  return j;
}

// ---------------------------------------------------------------------------
// simulate configuration: key=value lines ('#' comments), also accepted as
// repeated key=value tokens on the command line

namespace detail {

inline std::string trim_ws(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return std::string();
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<double> parse_double_list(const std::string& s, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim_ws(tok);
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw parse_error("config key '" + key + "': not a number: '" + tok + "'");
    }
  }
  return out;
}

inline long parse_long(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw parse_error("config key '" + key + "': not an integer: '" + s + "'");
  }
}

}  // namespace detail

inline void apply_sim_key(SimDesign& d, const std::string& key, const std::string& value) {
  if (key == "n") d.n = detail::parse_long(value, key);
  else if (key == "ad_n" || key == "N") d.N = detail::parse_long(value, key);
  else if (key == "reps") d.reps = static_cast<int>(detail::parse_long(value, key));
  else if (key == "seed") d.seed = static_cast<std::uint64_t>(detail::parse_long(value, key));
  else if (key == "workers") d.workers = static_cast<int>(detail::parse_long(value, key));
  else if (key == "alpha") d.alpha = detail::parse_double_list(value, key).at(0);
  else if (key == "sigma0") d.sigma0 = detail::parse_double_list(value, key).at(0);
  else if (key == "p_x2") d.p_x2 = detail::parse_double_list(value, key).at(0);
  else if (key == "failure_budget")
    d.failure_budget = detail::parse_double_list(value, key).at(0);
  else if (key == "shift") d.shift = parse_shift_mode(value);
  else if (key == "beta0") {
    auto v = detail::parse_double_list(value, key);
    d.beta0 = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  } else if (key == "theta0") {
    auto v = detail::parse_double_list(value, key);
    d.theta0 = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  } else if (key == "menus") {
    d.menus.clear();
    if (value == "all") {
      d.menus = all_menus();
    } else {
      std::stringstream ss(value);
      std::string tok;
      while (std::getline(ss, tok, ',')) d.menus.push_back(parse_menu(detail::trim_ws(tok)));
    }
  } else if (key == "sigma_source") {
    if (value == "outer") d.fit_options.sigma_source = SigmaSource::outer;
    else if (value == "plugin") d.fit_options.sigma_source = SigmaSource::plugin;
    else throw parse_error("config key 'sigma_source': expected outer|plugin");
  } else {
    throw parse_error("unknown config key: '" + key + "'");
  }
}

inline void apply_sim_kv(SimDesign& d, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw parse_error("expected key=value, got '" + kv + "'");
  apply_sim_key(d, detail::trim_ws(kv.substr(0, eq)), detail::trim_ws(kv.substr(eq + 1)));
}

inline void read_sim_config(SimDesign& d, std::istream& in) {
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    try {
      apply_sim_kv(d, line.substr(b, e - b + 1));
    } catch (const parse_error& err) {
      throw parse_error("config line " + std::to_string(lineno) + ": " + err.what());
    }
  }
  d.validate();
}

// Defaults for theta0 when a shift is requested but no truth was given.
inline void finalize_sim_design(SimDesign& d) {
  if (d.shift == ShiftMode::covariate && d.theta0.size() == 0)
    d.theta0 = Vector::Constant(2, 0.5);
  if (d.shift == ShiftMode::prior_prob && d.theta0.size() == 0)
    d.theta0 = Vector::Constant(1, 0.5);
  d.validate();
}

// ---------------------------------------------------------------------------
// simulation report emitters (byte deterministic given the same report)

inline std::string sim_report_csv(const SimReport& r) {
  std::string out =
      "menu,coefficient,bias,mc_sd,mean_se,rmse,coverage,re_mc,mean_re_reported,"
      "n_ok,n_fail,n_damped\n";
  auto coef_name = [&](Eigen::Index j) { return "beta" + std::to_string(j); };
  for (Eigen::Index j = 0; j < r.d; ++j) {
    out += "mle," + coef_name(j) + "," + fmt_num(r.mle_bias(j)) + "," + fmt_num(r.mle_sd(j)) +
           "," + fmt_num(r.mle_mean_se(j)) + "," +
           fmt_num(std::sqrt(r.mle_sd(j) * r.mle_sd(j) + r.mle_bias(j) * r.mle_bias(j))) + "," +
           fmt_num(r.mle_coverage(j)) + ",1,1," + std::to_string(r.reps) + ",0,0\n";
  }
  for (std::size_t mi = 0; mi < r.menus.size(); ++mi)
    for (Eigen::Index j = 0; j < r.d; ++j) {
      const auto m = static_cast<Eigen::Index>(mi);
      out += r.menus[mi] + "," + coef_name(j) + "," + fmt_num(r.bias(m, j)) + "," +
             fmt_num(r.sd(m, j)) + "," + fmt_num(r.mean_se(m, j)) + "," +
             fmt_num(r.rmse(m, j)) + "," + fmt_num(r.coverage(m, j)) + "," +
             fmt_num(r.re_mc(m, j)) + "," + fmt_num(r.mean_re_reported(m, j)) + "," +
             std::to_string(r.n_ok[mi]) + "," + std::to_string(r.n_fail[mi]) + "," +
             std::to_string(r.n_damped[mi]) + "\n";
    }
  return out;
}

inline std::string sim_report_json(const SimReport& r) {
  // Hand-rolled so the byte layout is fixed (nlohmann would also be stable,
  // but %.10g keeps the numeric text identical to the CSV).
  std::string out = "{\n  \"reps\": " + std::to_string(r.reps) + ",\n";
  out += "  \"budget_exceeded\": " + std::string(r.budget_exceeded ? "true" : "false") + ",\n";
  out += "  \"mle\": {";
  auto emit_vec = [](const Vector& v) {
    std::string s = "[";
    for (Eigen::Index j = 0; j < v.size(); ++j)
      s += (j ? ", " : "") + std::string("\"") + fmt_num(v(j)) + "\"";
    return s + "]";
  };
  out += "\"bias\": " + emit_vec(r.mle_bias) + ", \"mc_sd\": " + emit_vec(r.mle_sd) +
         ", \"mean_se\": " + emit_vec(r.mle_mean_se) +
         ", \"coverage\": " + emit_vec(r.mle_coverage) + "},\n";
  out += "  \"menus\": [\n";
  for (std::size_t mi = 0; mi < r.menus.size(); ++mi) {
    const auto m = static_cast<Eigen::Index>(mi);
    out += "    {\"menu\": \"" + r.menus[mi] + "\"";
    out += ", \"bias\": " + emit_vec(r.bias.row(m).transpose());
    out += ", \"mc_sd\": " + emit_vec(r.sd.row(m).transpose());
    out += ", \"mean_se\": " + emit_vec(r.mean_se.row(m).transpose());
    out += ", \"rmse\": " + emit_vec(r.rmse.row(m).transpose());
    out += ", \"coverage\": " + emit_vec(r.coverage.row(m).transpose());
    out += ", \"re_mc\": " + emit_vec(r.re_mc.row(m).transpose());
    out += ", \"mean_re_reported\": " + emit_vec(r.mean_re_reported.row(m).transpose());
    out += ", \"n_ok\": " + std::to_string(r.n_ok[mi]);
    out += ", \"n_fail\": " + std::to_string(r.n_fail[mi]);
    out += ", \"n_damped\": " + std::to_string(r.n_damped[mi]);
    out += mi + 1 < r.menus.size() ? "},\n" : "}\n";
  }
  out += "  ]\n}\n";
  return out;
}

}  // namespace aggfuse
