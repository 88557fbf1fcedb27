#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "aggregates.hpp"
#include "estimators.hpp"
#include "rng.hpp"
#include "types.hpp"

namespace aggfuse {

// Built-in AD menus for the gaussian two-covariate study design.
enum class Menu {
  phi_y,             // E(Y*)
  phi_x_given_y_median,    // E(X* | Y* cell), median split
  phi_x_given_y_quartile,  // E(X* | Y* cell), quartile split
  phi_y_given_x_1,   // E(Y* | -1 < X1 <= 1)
  phi_y_given_x_2,   // + E(Y* | X2 = 1)
  phi_y_given_x_3,   // + E(Y* | X2 = 0)
  phi_x              // E(X*)
};

inline std::string menu_name(Menu m) {
  switch (m) {
    case Menu::phi_y: return "phi_y";
    case Menu::phi_x_given_y_median: return "phi_x_given_y_median";
    case Menu::phi_x_given_y_quartile: return "phi_x_given_y_quartile";
    case Menu::phi_y_given_x_1: return "phi_y_given_x_1";
    case Menu::phi_y_given_x_2: return "phi_y_given_x_2";
    case Menu::phi_y_given_x_3: return "phi_y_given_x_3";
    case Menu::phi_x: return "phi_x";
  }
  return "?";
}

inline Menu parse_menu(const std::string& s) {
  for (Menu m : {Menu::phi_y, Menu::phi_x_given_y_median, Menu::phi_x_given_y_quartile,
                 Menu::phi_y_given_x_1, Menu::phi_y_given_x_2, Menu::phi_y_given_x_3,
                 Menu::phi_x})
    if (menu_name(m) == s) return m;
  throw parse_error("unknown menu: " + s);
}

inline std::vector<Menu> all_menus() {
  return {Menu::phi_y, Menu::phi_x_given_y_median, Menu::phi_x_given_y_quartile,
          Menu::phi_y_given_x_1, Menu::phi_y_given_x_2, Menu::phi_y_given_x_3, Menu::phi_x};
}

// Study design: X1 ~ N(0,1), X2 ~ Bernoulli(0.6),
// Y | X ~ N(beta0 + beta1 X1 + beta2 X2, sigma^2), with optional dataset
// shift between the IPD source and the AD population.
struct SimDesign {
  Vector beta0 = (Vector(3) << 0.5, -0.5, 0.5).finished();
  double sigma0 = 1.0;
  double p_x2 = 0.6;
  ShiftMode shift = ShiftMode::none;
  Vector theta0;  // (theta_x1, theta_x2) under covariate shift; (theta_y) under prior-prob
  Eigen::Index n = 400;
  long N = 1000;
  int reps = 500;
  std::uint64_t seed = 1;
  std::vector<Menu> menus = all_menus();
  double alpha = 0.05;
  int workers = 1;
  double failure_budget = 0.02;  // tolerated fit-failure fraction
  FitOptions fit_options;

  void validate() const {
    if (beta0.size() != 3)
      throw parse_error("built-in design needs beta0 of length 3 (intercept, x1, x2)");
    if (sigma0 <= 0) throw parse_error("sigma0 must be positive");
    if (p_x2 <= 0 || p_x2 >= 1) throw parse_error("p_x2 must lie in (0, 1)");
    if (n < 10) throw parse_error("n must be at least 10");
    if (N < 10) throw parse_error("ad_n must be at least 10");
    if (reps < 1) throw parse_error("reps must be positive");
    if (alpha <= 0 || alpha >= 1) throw parse_error("alpha must lie in (0, 1)");
    if (failure_budget < 0 || failure_budget > 1)
      throw parse_error("failure_budget must lie in [0, 1]");
    if (menus.empty()) throw parse_error("no menus selected");
    if (shift == ShiftMode::covariate && theta0.size() != 0 && theta0.size() != 2)
      throw parse_error("covariate shift needs theta0 of length 2");
    if (shift == ShiftMode::prior_prob && theta0.size() != 0 && theta0.size() != 1)
      throw parse_error("prior-probability shift needs theta0 of length 1");
    if (shift == ShiftMode::none && theta0.size() != 0)
      throw parse_error("theta0 given without a shift mode");
  }
};

inline Dataset gen_ipd(CounterRng& rng, Eigen::Index n, const SimDesign& d) {
  Dataset data;
  data.X.resize(n, 2);
  data.y.resize(n);
  data.covariate_names = {"x1", "x2"};
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x1 = rng.normal();
    const double x2 = rng.bernoulli(d.p_x2) ? 1.0 : 0.0;
    data.X(i, 0) = x1;
    data.X(i, 1) = x2;
    data.y(i) = rng.normal(d.beta0(0) + d.beta0(1) * x1 + d.beta0(2) * x2, d.sigma0);
  }
  return data;
}

// AD population draw under the design's shift; exponential tilts of the
// gaussian/bernoulli base laws have exact samplers (no rejection involved).
inline Dataset gen_ad_population(CounterRng& rng, Eigen::Index N, const SimDesign& d) {
  Dataset data;
  data.X.resize(N, 2);
  data.y.resize(N);
  data.covariate_names = {"x1", "x2"};

  double m1 = 0.0, p2 = d.p_x2, mean_shift = 0.0;
  if (d.shift == ShiftMode::covariate) {
    // g*(x) = g(x) exp(t1 x1 + t2 x2) / const
    m1 = d.theta0(0);
    const double e = safe_exp(d.theta0(1));
    p2 = d.p_x2 * e / (1.0 - d.p_x2 + d.p_x2 * e);
  } else if (d.shift == ShiftMode::prior_prob) {
    // f*(y,x) propto exp(t y) f(y|x) g(x): the x-marginal picks up
    // exp{t mu(x)} and Y|X shifts mean by t sigma^2.
    const double t = d.theta0(0);
    m1 = t * d.beta0(1);
    const double e = safe_exp(t * d.beta0(2));
    p2 = d.p_x2 * e / (1.0 - d.p_x2 + d.p_x2 * e);
    mean_shift = t * d.sigma0 * d.sigma0;
  } else if (d.shift == ShiftMode::both) {
    throw domain_error("combined shift design not supported by the built-in generator");
  }

  for (Eigen::Index i = 0; i < N; ++i) {
    const double x1 = rng.normal(m1, 1.0);
    const double x2 = rng.bernoulli(p2) ? 1.0 : 0.0;
    data.X(i, 0) = x1;
    data.X(i, 1) = x2;
    const double mu = d.beta0(0) + d.beta0(1) * x1 + d.beta0(2) * x2 + mean_shift;
    data.y(i) = rng.normal(mu, d.sigma0);
  }
  return data;
}

namespace detail {

// Type-7 empirical quantile on a sorted copy.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double h = p * static_cast<double>(n - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, n - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline AdSummary outcome_mean_summary(const Dataset& ad, const SubgroupPredicate& sub,
                                      const std::string& label) {
  const Eigen::Index N = ad.n();
  double sum = 0.0;
  long count = 0;
  for (Eigen::Index i = 0; i < N; ++i)
    if (sub.trivial() || sub.contains(ad.X.row(i).transpose())) {
      sum += ad.y(i);
      ++count;
    }
  if (count == 0) throw domain_error("empty AD subgroup: " + label);
  const double phi = sum / static_cast<double>(count);
  double ssq = 0.0;
  for (Eigen::Index i = 0; i < N; ++i)
    if (sub.trivial() || sub.contains(ad.X.row(i).transpose()))
      ssq += (ad.y(i) - phi) * (ad.y(i) - phi);
  const double mass = static_cast<double>(count) / static_cast<double>(N);

  AdSummary s;
  s.kind = sub.trivial() ? AdKind::marginal_outcome_mean : AdKind::outcome_mean_given_covariates;
  s.subgroup = sub;
  s.value = Vector::Constant(1, phi);
  s.sample_size = N;
  // Var of sqrt(N)(phi_hat - phi): E[(Y-phi)^2 1{Omega}] / P(Omega)^2
  s.variance = Matrix::Constant(1, 1, (ssq / static_cast<double>(N)) / (mass * mass));
  s.label = label;
  return s;
}

inline AdSummary covariate_mean_summary(const Dataset& ad, const Interval& cell,
                                        const std::vector<int>& targets,
                                        const std::string& label) {
  const Eigen::Index N = ad.n();
  const Eigen::Index m = static_cast<Eigen::Index>(targets.size());
  Vector phi = Vector::Zero(m);
  long count = 0;
  const bool marginal = !std::isfinite(cell.lo) && !std::isfinite(cell.hi);
  for (Eigen::Index i = 0; i < N; ++i)
    if (marginal || cell.contains(ad.y(i))) {
      for (Eigen::Index k = 0; k < m; ++k) phi(k) += ad.X(i, targets[k]);
      ++count;
    }
  if (count == 0) throw domain_error("empty AD outcome cell: " + label);
  phi /= static_cast<double>(count);
  Matrix second = Matrix::Zero(m, m);
  for (Eigen::Index i = 0; i < N; ++i)
    if (marginal || cell.contains(ad.y(i))) {
      Vector diff(m);
      for (Eigen::Index k = 0; k < m; ++k) diff(k) = ad.X(i, targets[k]) - phi(k);
      second.noalias() += diff * diff.transpose();
    }
  const double mass = static_cast<double>(count) / static_cast<double>(N);

  AdSummary s;
  if (marginal) {
    s.kind = AdKind::marginal_covariate_mean;
  } else {
    s.kind = AdKind::covariate_mean_given_outcome;
    s.subgroup.outcome_interval = cell;
  }
  s.target_covariates = targets;
  s.value = phi;
  s.sample_size = N;
  s.variance = (second / static_cast<double>(N)) / (mass * mass);
  s.label = label;
  return s;
}

inline SubgroupPredicate x1_band() {
  SubgroupPredicate sub;
  CovariateClause c;
  c.covariate = 0;
  c.interval = {-1.0, 1.0};
  sub.clauses.push_back(c);
  return sub;
}

inline SubgroupPredicate x2_equals(double v) {
  SubgroupPredicate sub;
  CovariateClause c;
  c.covariate = 1;
  c.is_interval = false;
  c.categories = {v};
  sub.clauses.push_back(c);
  return sub;
}

}  // namespace detail

// Empirical AD summaries for one menu, with per-replication quantile cut
// points and empirical variance blocks.
inline std::vector<AdSummary> compute_ad(const Dataset& ad, Menu menu) {
  std::vector<AdSummary> out;
  const std::vector<int> both{0, 1};
  switch (menu) {
    case Menu::phi_y:
      out.push_back(detail::outcome_mean_summary(ad, SubgroupPredicate{}, "E[Y]"));
      break;
    case Menu::phi_x_given_y_median:
    case Menu::phi_x_given_y_quartile: {
      std::vector<double> sorted(ad.y.data(), ad.y.data() + ad.n());
      std::sort(sorted.begin(), sorted.end());
      std::vector<double> cuts;
      if (menu == Menu::phi_x_given_y_median) {
        cuts = {detail::quantile_sorted(sorted, 0.5)};
      } else {
        cuts = {detail::quantile_sorted(sorted, 0.25), detail::quantile_sorted(sorted, 0.5),
                detail::quantile_sorted(sorted, 0.75)};
      }
      double lo = -kInf;
      for (std::size_t k = 0; k <= cuts.size(); ++k) {
        const double hi = k < cuts.size() ? cuts[k] : kInf;
        out.push_back(detail::covariate_mean_summary(
            ad, Interval{lo, hi}, both, "E[X|Y cell " + std::to_string(k + 1) + "]"));
        lo = hi;
      }
      break;
    }
    case Menu::phi_y_given_x_3:
    case Menu::phi_y_given_x_2:
    case Menu::phi_y_given_x_1:
      out.push_back(detail::outcome_mean_summary(ad, detail::x1_band(), "E[Y|-1<X1<=1]"));
      if (menu != Menu::phi_y_given_x_1)
        out.push_back(detail::outcome_mean_summary(ad, detail::x2_equals(1.0), "E[Y|X2=1]"));
      if (menu == Menu::phi_y_given_x_3)
        out.push_back(detail::outcome_mean_summary(ad, detail::x2_equals(0.0), "E[Y|X2=0]"));
      break;
    case Menu::phi_x:
      out.push_back(detail::covariate_mean_summary(ad, Interval{-kInf, kInf}, both, "E[X]"));
      break;
  }
  return out;
}

// Constraint set for a menu under the design's shift model. Under a shift the
// marginal covariate means are always included: they are what identifies
// theta, and several menus alone would leave r < s.
inline ConstraintSet menu_constraints(const Dataset& ad, Menu menu, ShiftMode mode) {
  ConstraintSet cs;
  cs.summaries = compute_ad(ad, menu);
  if (mode != ShiftMode::none) {
    cs.shift.mode = mode;
    if (mode == ShiftMode::covariate || mode == ShiftMode::both) cs.shift.hx = {0, 1};
    cs.shift.s = 1;
    if (menu != Menu::phi_x)
      for (auto& s : compute_ad(ad, Menu::phi_x)) cs.summaries.push_back(s);
  }
  return cs;
}

struct SimReport {
  // rows indexed by menu, columns by coefficient
  std::vector<std::string> menus;
  Eigen::Index d = 0;
  Matrix bias, sd, mean_se, rmse, coverage, re_mc, mean_re_reported;
  Vector mle_bias, mle_sd, mle_mean_se, mle_coverage;
  std::vector<int> n_ok, n_fail, n_damped;
  int reps = 0;
  bool budget_exceeded = false;
  std::vector<std::string> failure_messages;  // first few, for the log
};

// Replication engine. Every replication draws its data from its own keyed
// substream and writes into its own slot, so results are identical for any
// worker count; the reduction runs serially in replication order.
inline SimReport run_replications(const SimDesign& design) {
  const Eigen::Index d = design.beta0.size();
  const int reps = design.reps;
  const int n_menus = static_cast<int>(design.menus.size());

  struct RepSlot {
    bool mle_ok = false;
    Vector mle_beta, mle_se;
    std::vector<char> ok;
    std::vector<char> damped;
    Matrix beta, se, re;  // n_menus x d
    std::string first_error;
  };
  std::vector<RepSlot> slots(reps);

  auto run_rep = [&](int rep) {
    RepSlot& slot = slots[rep];
    slot.ok.assign(n_menus, 0);
    slot.damped.assign(n_menus, 0);
    slot.beta = Matrix::Constant(n_menus, d, kNaN);
    slot.se = Matrix::Constant(n_menus, d, kNaN);
    slot.re = Matrix::Constant(n_menus, d, kNaN);
    CounterRng rng_ipd(design.seed, static_cast<std::uint64_t>(rep), 0);
    CounterRng rng_ad(design.seed, static_cast<std::uint64_t>(rep), 1);
    const Dataset ipd = gen_ipd(rng_ipd, design.n, design);
    const Dataset ad = gen_ad_population(rng_ad, design.N, design);

    MleFit mle;
    try {
      mle = fit_mle(FamilyKind::gaussian, ipd);
      slot.mle_beta = mle.params.beta;
      slot.mle_se = mle.cov_beta.diagonal().array().sqrt();
      slot.mle_ok = true;
    } catch (const std::exception& e) {
      slot.first_error = std::string("mle: ") + e.what();
      return;
    }

    for (int mi = 0; mi < n_menus; ++mi) {
      try {
        FitOptions fo = design.fit_options;
        fo.eta_diagnostic = false;
        fo.alpha = design.alpha;
        const ConstraintSet cs = menu_constraints(ad, design.menus[mi], design.shift);
        const FitResult fr = fit_cmle_fast(cs, FamilyKind::gaussian, ipd, mle, fo);
        slot.beta.row(mi) = fr.params.beta.transpose();
        slot.se.row(mi) = fr.se.transpose();
        slot.re.row(mi) = fr.re_vs_mle.transpose();
        slot.damped[mi] = fr.diag.damped_j ? 1 : 0;
        slot.ok[mi] = 1;
      } catch (const std::exception& e) {
        if (slot.first_error.empty())
          slot.first_error = menu_name(design.menus[mi]) + ": " + e.what();
      }
    }
  };

  const int workers = std::max(1, design.workers);
  if (workers == 1) {
    for (int rep = 0; rep < reps; ++rep) run_rep(rep);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (int rep = next.fetch_add(1); rep < reps; rep = next.fetch_add(1)) run_rep(rep);
      });
    for (auto& t : pool) t.join();
  }

  // Serial reduction in replication order.
  SimReport rep;
  rep.reps = reps;
  rep.d = d;
  for (Menu m : design.menus) rep.menus.push_back(menu_name(m));
  rep.bias = Matrix::Zero(n_menus, d);
  rep.sd = Matrix::Zero(n_menus, d);
  rep.mean_se = Matrix::Zero(n_menus, d);
  rep.rmse = Matrix::Zero(n_menus, d);
  rep.coverage = Matrix::Zero(n_menus, d);
  rep.re_mc = Matrix::Zero(n_menus, d);
  rep.mean_re_reported = Matrix::Zero(n_menus, d);
  rep.n_ok.assign(n_menus, 0);
  rep.n_fail.assign(n_menus, 0);
  rep.n_damped.assign(n_menus, 0);

  const double zq = detail::z_quantile(design.alpha);

  // MLE aggregation over replications where the baseline fit succeeded.
  {
    std::vector<double> sums(d, 0.0), sq(d, 0.0), se_sum(d, 0.0), cov(d, 0.0);
    int n_mle = 0;
    for (const auto& s : slots) {
      if (!s.mle_ok) continue;
      ++n_mle;
      for (Eigen::Index j = 0; j < d; ++j) {
        sums[j] += s.mle_beta(j);
        sq[j] += s.mle_beta(j) * s.mle_beta(j);
        se_sum[j] += s.mle_se(j);
        cov[j] += std::abs(s.mle_beta(j) - design.beta0(j)) <= zq * s.mle_se(j) ? 1.0 : 0.0;
      }
    }
    rep.mle_bias = Vector::Zero(d);
    rep.mle_sd = Vector::Zero(d);
    rep.mle_mean_se = Vector::Zero(d);
    rep.mle_coverage = Vector::Zero(d);
    for (Eigen::Index j = 0; j < d && n_mle > 1; ++j) {
      const double mean = sums[j] / n_mle;
      rep.mle_bias(j) = mean - design.beta0(j);
      rep.mle_sd(j) = std::sqrt(std::max(0.0, (sq[j] - n_mle * mean * mean) / (n_mle - 1)));
      rep.mle_mean_se(j) = se_sum[j] / n_mle;
      rep.mle_coverage(j) = cov[j] / n_mle;
    }
  }

  int total_fail = 0;
  for (int mi = 0; mi < n_menus; ++mi) {
    // Paired aggregation over replications where both this menu's fit and the
    // baseline succeeded, so the MC efficiency ratio compares like with like.
    std::vector<double> sums(d, 0.0), sq(d, 0.0), se_sum(d, 0.0), cov(d, 0.0), re_sum(d, 0.0);
    std::vector<double> mle_sums(d, 0.0), mle_sq(d, 0.0);
    int ok = 0;
    for (const auto& s : slots) {
      if (!s.mle_ok) continue;
      if (!s.ok[mi]) continue;
      ++ok;
      rep.n_damped[mi] += s.damped[mi];
      for (Eigen::Index j = 0; j < d; ++j) {
        const double b = s.beta(mi, j);
        sums[j] += b;
        sq[j] += b * b;
        se_sum[j] += s.se(mi, j);
        re_sum[j] += s.re(mi, j);
        cov[j] += std::abs(b - design.beta0(j)) <= zq * s.se(mi, j) ? 1.0 : 0.0;
        mle_sums[j] += s.mle_beta(j);
        mle_sq[j] += s.mle_beta(j) * s.mle_beta(j);
      }
    }
    rep.n_ok[mi] = ok;
    rep.n_fail[mi] = reps - ok;
    total_fail += rep.n_fail[mi];
    for (Eigen::Index j = 0; j < d && ok > 1; ++j) {
      const double mean = sums[j] / ok;
      const double var = std::max(0.0, (sq[j] - ok * mean * mean) / (ok - 1));
      const double mle_mean = mle_sums[j] / ok;
      const double mle_var = std::max(0.0, (mle_sq[j] - ok * mle_mean * mle_mean) / (ok - 1));
      rep.bias(mi, j) = mean - design.beta0(j);
      rep.sd(mi, j) = std::sqrt(var);
      rep.mean_se(mi, j) = se_sum[j] / ok;
      rep.rmse(mi, j) = std::sqrt(var + rep.bias(mi, j) * rep.bias(mi, j));
      rep.coverage(mi, j) = cov[j] / ok;
      rep.re_mc(mi, j) = var > 0.0 ? mle_var / var : kNaN;
      rep.mean_re_reported(mi, j) = re_sum[j] / ok;
    }
  }

  for (const auto& s : slots)
    if (!s.first_error.empty() && rep.failure_messages.size() < 10)
      rep.failure_messages.push_back(s.first_error);
  rep.budget_exceeded =
      total_fail > design.failure_budget * static_cast<double>(reps) * n_menus;
  return rep;
}

}  // namespace aggfuse
