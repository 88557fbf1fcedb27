// Command line front end: fit a GLM against individual-level data fused with
// aggregate summaries, run the built-in simulation study, or validate an
// aggregate-summary file.
//
// Exit codes: 0 ok, 2 parse error, 3 identification failure, 4 constraints
// infeasible (convex hull), 5 singular linear algebra, 6 simulation failure
// budget exceeded, 1 anything else.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aggfuse/aggfuse.hpp"

namespace {

using namespace aggfuse;

int run_fit(const std::string& data_path, const std::string& ad_path,
            const std::string& outcome, const std::vector<std::string>& covariates,
            const std::string& family_str, bool mle_only, bool full, bool standardize,
            const std::string& v_policy_str, const std::string& sigma_source_str,
            const std::string& shift_str, const std::vector<std::string>& shift_covariates,
            int tilt_order, double alpha, long n_override, bool drop_redundant,
            const std::string& out_path) {
  FitConfig cfg;
  cfg.family = parse_family(family_str);
  cfg.outcome = outcome;
  cfg.covariates = covariates;
  cfg.standardize_outcome = standardize;
  cfg.mle_only = mle_only;
  cfg.options.alpha = alpha;
  cfg.options.n_override = n_override;
  cfg.options.drop_redundant = drop_redundant;
  if (v_policy_str == "automatic") cfg.options.v_policy = VPolicy::automatic;
  else if (v_policy_str == "reported") cfg.options.v_policy = VPolicy::reported;
  else if (v_policy_str == "plugin") cfg.options.v_policy = VPolicy::plugin;
  else throw parse_error("--v-policy: expected automatic|reported|plugin");
  if (sigma_source_str == "outer") cfg.options.sigma_source = SigmaSource::outer;
  else if (sigma_source_str == "plugin") cfg.options.sigma_source = SigmaSource::plugin;
  else throw parse_error("--sigma-source: expected outer|plugin");

  Dataset data = make_dataset(read_csv_file(data_path), cfg.outcome, cfg.covariates);

  std::vector<AdSummary> summaries;
  if (!ad_path.empty()) summaries = parse_ad_file(ad_path, data.covariate_names, false);
  if (ad_path.empty() && !mle_only)
    throw parse_error("no AD file given; pass --ad or use --mle-only");

  ConstraintSet cs;
  cs.summaries = summaries;
  cs.shift.mode = parse_shift_mode(shift_str);
  cs.shift.s = tilt_order;
  for (const auto& name : shift_covariates) {
    bool found = false;
    for (std::size_t k = 0; k < data.covariate_names.size(); ++k)
      if (data.covariate_names[k] == name) {
        cs.shift.hx.push_back(static_cast<int>(k));
        found = true;
      }
    if (!found) throw parse_error("--shift-covariate: unknown covariate '" + name + "'");
  }
  if (cs.shift.covariate_active() && cs.shift.hx.empty())
    for (std::size_t k = 0; k < data.covariate_names.size(); ++k)
      cs.shift.hx.push_back(static_cast<int>(k));

  OutcomeTransform transform;
  if (cfg.standardize_outcome) {
    if (cfg.family != FamilyKind::gaussian)
      throw parse_error("--standardize-outcome is only supported for the gaussian family");
    transform = standardize_outcome(data, cs.summaries);
  }

  const MleFit mle = fit_mle(cfg.family, data);
  FitResult result;
  if (mle_only || cs.summaries.empty()) {
    result = fit_mle_result(cfg.family, data, mle, alpha);
  } else if (full) {
    result = fit_cmle_full(cs, cfg.family, data, mle, cfg.options);
  } else {
    result = fit_cmle_fast(cs, cfg.family, data, mle, cfg.options);
  }
  unstandardize_result(result, transform);

  const json out = fit_result_json(result, data, transform);
  if (out_path.empty()) {
    std::cout << out.dump(2) << "\n";
  } else {
    std::ofstream f(out_path);
    if (!f) throw parse_error("cannot open output file: " + out_path);
    f << out.dump(2) << "\n";
  }
  for (const auto& w : result.diag.warnings) std::cerr << "warning: " << w << "\n";
  return 0;
}

int run_simulate(const std::string& config_path, const std::vector<std::string>& overrides,
                 int threads, long seed, const std::string& format,
                 const std::string& out_path) {
  SimDesign design;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw parse_error("cannot open config file: " + config_path);
    read_sim_config(design, in);
  }
  for (const auto& kv : overrides) apply_sim_kv(design, kv);
  if (threads > 0) design.workers = threads;
  if (seed >= 0) design.seed = static_cast<std::uint64_t>(seed);
  finalize_sim_design(design);

  const SimReport report = run_replications(design);
  const std::string text = format == "json" ? sim_report_json(report) : sim_report_csv(report);
  if (out_path.empty()) {
    std::cout << text;
  } else {
    std::ofstream f(out_path, std::ios::binary);
    if (!f) throw parse_error("cannot open output file: " + out_path);
    f << text;
  }
  for (const auto& msg : report.failure_messages)
    std::cerr << "replication failure: " << msg << "\n";
  if (report.budget_exceeded) {
    std::cerr << "error: replication failures exceed the budget\n";
    return 6;
  }
  return 0;
}

int run_validate(const std::string& ad_path, const std::vector<std::string>& covariates,
                 int n_covariates) {
  std::vector<std::string> names = covariates;
  const bool allow_new = covariates.empty();
  std::vector<AdSummary> summaries = parse_ad_file(ad_path, names, allow_new);
  int p = n_covariates;
  if (p < 0) p = static_cast<int>(names.size());
  ConstraintSet cs;
  cs.summaries = summaries;
  cs.validate(p);
  std::cout << "ok: " << summaries.size() << " summaries, " << cs.phi_dim()
            << " constraint components, " << names.size() << " covariates referenced\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GLM fitting with aggregate-data constraints"};
  app.require_subcommand(1);

  // fit
  auto* fit = app.add_subcommand("fit", "fit a model to IPD plus aggregate summaries");
  std::string data_path, ad_path, outcome, family_str = "gaussian";
  std::vector<std::string> covariates;
  bool mle_only = false, full = false, standardize = false, drop_redundant = false;
  std::string v_policy = "automatic", sigma_source = "outer", shift_str = "none";
  std::vector<std::string> shift_covariates;
  int tilt_order = 1;
  double alpha = 0.05;
  long n_override = -1;
  std::string fit_out;
  fit->add_option("--data", data_path, "IPD CSV file")->required();
  fit->add_option("--ad", ad_path, "aggregate summaries JSON file");
  fit->add_option("--outcome", outcome, "outcome column")->required();
  fit->add_option("--covariate", covariates, "covariate columns (default: all others)");
  fit->add_option("--family", family_str, "gaussian|bernoulli|poisson|gamma");
  fit->add_flag("--mle-only", mle_only, "ignore constraints, fit the plain MLE");
  fit->add_flag("--full", full, "full constrained maximizer instead of the one-step update");
  fit->add_flag("--standardize-outcome", standardize, "center/scale the outcome internally");
  fit->add_option("--v-policy", v_policy, "AD variance: automatic|reported|plugin");
  fit->add_option("--sigma-source", sigma_source, "sandwich middle: outer|plugin");
  fit->add_option("--shift", shift_str, "dataset shift: none|covariate|pps|both");
  fit->add_option("--shift-covariate", shift_covariates,
                  "covariates entering the shift weight (default: all)");
  fit->add_option("--tilt-order", tilt_order, "outcome tilt order s (default 1)");
  fit->add_option("--alpha", alpha, "CI level is 1-alpha (default 0.05)");
  fit->add_option("--ad-n", n_override, "override the AD sample size");
  fit->add_flag("--drop-redundant", drop_redundant, "drop nearly collinear summaries");
  fit->add_option("--out", fit_out, "write the result JSON here instead of stdout");

  // simulate
  auto* sim = app.add_subcommand("simulate", "run the built-in replication study");
  std::string sim_config, sim_format = "csv", sim_out;
  std::vector<std::string> sim_overrides;
  int sim_threads = 0;
  long sim_seed = -1;
  sim->add_option("--config", sim_config, "key=value config file");
  sim->add_option("--set", sim_overrides, "config overrides, key=value");
  sim->add_option("--threads", sim_threads, "worker threads (default from config)");
  sim->add_option("--seed", sim_seed, "replication seed");
  sim->add_option("--format", sim_format, "report format: csv|json");
  sim->add_option("--out", sim_out, "write the report here instead of stdout");

  // validate-ad
  auto* val = app.add_subcommand("validate-ad", "check an aggregate summaries file");
  std::string val_path;
  std::vector<std::string> val_covariates;
  int val_p = -1;
  val->add_option("--ad", val_path, "aggregate summaries JSON file")->required();
  val->add_option("--covariate", val_covariates, "known covariate names, in order");
  val->add_option("--n-covariates", val_p, "covariate count when names are not given");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fit)
      return run_fit(data_path, ad_path, outcome, covariates, family_str, mle_only, full,
                     standardize, v_policy, sigma_source, shift_str, shift_covariates,
                     tilt_order, alpha, n_override, drop_redundant, fit_out);
    if (*sim) return run_simulate(sim_config, sim_overrides, sim_threads, sim_seed, sim_format,
                                  sim_out);
    if (*val) return run_validate(val_path, val_covariates, val_p);
  } catch (const aggfuse::parse_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const aggfuse::identification_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const aggfuse::hull_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const aggfuse::singular_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
