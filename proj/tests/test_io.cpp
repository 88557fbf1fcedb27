#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "aggfuse/io.hpp"

using namespace aggfuse;

TEST_CASE("csv parsing") {
  SECTION("well-formed input") {
    std::istringstream in("y,x1,x2\n1.5,0.3,1\n-0.2,0.9,0\n");
    const CsvTable t = read_csv(in);
    REQUIRE(t.columns == std::vector<std::string>{"y", "x1", "x2"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[1][0] == -0.2);
  }
  SECTION("field-count mismatch names the line") {
    std::istringstream in("y,x1\n1.0,2.0\n3.0\n");
    try {
      read_csv(in);
      FAIL("expected parse_error");
    } catch (const parse_error& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }
  SECTION("non-numeric cell names line and column") {
    std::istringstream in("y,x1\n1.0,2.0\n2.0,abc\n");
    try {
      read_csv(in);
      FAIL("expected parse_error");
    } catch (const parse_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("line 3") != std::string::npos);
      CHECK(msg.find("x1") != std::string::npos);
      CHECK(msg.find("abc") != std::string::npos);
    }
  }
  SECTION("empty input and missing rows") {
    std::istringstream empty("");
    CHECK_THROWS_AS(read_csv(empty), parse_error);
    std::istringstream headers_only("y,x1\n");
    CHECK_THROWS_AS(read_csv(headers_only), parse_error);
  }
  SECTION("dataset assembly") {
    std::istringstream in("x2,y,x1\n1,1.5,0.3\n0,-0.2,0.9\n");
    const CsvTable t = read_csv(in);
    const Dataset all = make_dataset(t, "y");
    CHECK(all.covariate_names == std::vector<std::string>{"x2", "x1"});
    CHECK(all.X(0, 1) == 0.3);
    const Dataset one = make_dataset(t, "y", {"x1"});
    CHECK(one.p() == 1);
    CHECK(one.X(1, 0) == 0.9);
    CHECK_THROWS_AS(make_dataset(t, "z"), parse_error);
    CHECK_THROWS_AS(make_dataset(t, "y", {"nope"}), parse_error);
    CHECK_THROWS_AS(make_dataset(t, "y", {"y"}), parse_error);
  }
}

TEST_CASE("ad fixtures parse and round-trip") {
  for (const std::string name : {"income_survey_ad.json", "housing_ad.json"}) {
    std::vector<std::string> names;
    const auto summaries =
        parse_ad_file(std::string(AGGFUSE_FIXTURE_DIR) + "/" + name, names, true);
    REQUIRE_FALSE(summaries.empty());
    ConstraintSet cs;
    cs.summaries = summaries;
    CHECK_NOTHROW(cs.validate(static_cast<Eigen::Index>(names.size())));

    // emit, re-parse, compare structurally
    const json emitted = emit_ad_json(summaries, names);
    std::vector<std::string> names2;
    const auto again = parse_ad_json(emitted, names2, true);
    REQUIRE(again.size() == summaries.size());
    CHECK(names2 == names);
    for (std::size_t i = 0; i < again.size(); ++i) {
      CHECK(again[i].kind == summaries[i].kind);
      CHECK((again[i].value - summaries[i].value).norm() == 0.0);
      CHECK(again[i].sample_size == summaries[i].sample_size);
      CHECK(again[i].target_covariates == summaries[i].target_covariates);
      REQUIRE(again[i].variance.has_value() == summaries[i].variance.has_value());
      if (again[i].variance)
        CHECK((*again[i].variance - *summaries[i].variance).norm() == 0.0);
    }
  }
}

TEST_CASE("ad fixture values survive the parse") {
  std::vector<std::string> names;
  const auto ss =
      parse_ad_file(std::string(AGGFUSE_FIXTURE_DIR) + "/income_survey_ad.json", names, true);
  REQUIRE(ss.size() == 4);
  CHECK(ss[0].value(0) == 54.82);
  CHECK(ss[0].sample_size == 4052);
  CHECK(ss[1].subgroup.outcome_interval->lo == -kInf);
  CHECK(ss[1].subgroup.outcome_interval->hi == 52.1);
  CHECK(ss[2].subgroup.outcome_interval->lo == 52.1);
  CHECK(ss[2].subgroup.outcome_interval->hi == kInf);
  CHECK(ss[3].value.size() == 5);
  CHECK(ss[3].value(4) == 0.79);
  CHECK(names.size() == 5);
  CHECK(names[0] == "female");
}

TEST_CASE("ad schema violations carry the summary index") {
  std::vector<std::string> names;
  SECTION("bad kind") {
    const json j = json::array({{{"kind", "median"}, {"value", 1.0}}});
    CHECK_THROWS_AS(parse_ad_json(j, names, true), parse_error);
  }
  SECTION("missing value") {
    const json j = json::array({{{"kind", "marginal_outcome_mean"}}});
    try {
      parse_ad_json(j, names, true);
      FAIL("expected parse_error");
    } catch (const parse_error& e) {
      CHECK(std::string(e.what()).find("summary 1") != std::string::npos);
    }
  }
  SECTION("bad interval") {
    json j = json::array();
    j.push_back({{"kind", "covariate_mean_given_outcome"},
                 {"covariates", json::array({"x"})},
                 {"subgroup", {{"outcome_interval", json::array({1.0})}}},
                 {"value", 0.5}});
    CHECK_THROWS_AS(parse_ad_json(j, names, true), parse_error);
  }
  SECTION("negative n") {
    const json j = json::array(
        {{{"kind", "marginal_outcome_mean"}, {"value", 1.0}, {"n", -5}}});
    CHECK_THROWS_AS(parse_ad_json(j, names, true), parse_error);
  }
  SECTION("unknown covariate when names are fixed") {
    std::vector<std::string> fixed{"a", "b"};
    json j = json::array();
    j.push_back({{"kind", "marginal_covariate_mean"},
                 {"covariates", json::array({"zzz"})},
                 {"value", 0.5}});
    CHECK_THROWS_AS(parse_ad_json(j, fixed, false), parse_error);
  }
  SECTION("variance shape mismatch") {
    json j = json::array();
    j.push_back({{"kind", "marginal_covariate_mean"},
                 {"covariates", json::array({"a", "b"})},
                 {"value", json::array({0.1, 0.2})},
                 {"variance", 0.5}});
    CHECK_THROWS_AS(parse_ad_json(j, names, true), parse_error);
  }
}

namespace {

// shared builder: gaussian data with outcome location c and scale s wrapped
// around a unit-scale latent design, plus a mean and an outcome-cell summary
struct StdFixture {
  Dataset d;
  std::vector<AdSummary> summaries;
};

StdFixture standardization_fixture(double c, double s) {
  CounterRng rng(55);
  StdFixture fx;
  const Eigen::Index n = 250;
  fx.d.X.resize(n, 2);
  fx.d.y.resize(n);
  fx.d.covariate_names = {"x1", "x2"};
  for (Eigen::Index i = 0; i < n; ++i) {
    fx.d.X(i, 0) = rng.normal();
    fx.d.X(i, 1) = rng.bernoulli(0.6) ? 1.0 : 0.0;
    fx.d.y(i) = c + s * rng.normal(0.5 - 0.5 * fx.d.X(i, 0) + 0.5 * fx.d.X(i, 1), 1.0);
  }
  AdSummary m;
  m.kind = AdKind::marginal_outcome_mean;
  m.value = Vector::Constant(1, c + s * 0.8);
  m.sample_size = 4000;
  m.variance = Matrix::Constant(1, 1, 1.31 * s * s);
  m.label = "ey";
  fx.summaries.push_back(m);
  AdSummary cell;
  cell.kind = AdKind::covariate_mean_given_outcome;
  cell.subgroup.outcome_interval = Interval{c + s * 0.8, kInf};
  cell.target_covariates = {0};
  cell.value = Vector::Constant(1, -0.35);
  cell.sample_size = 4000;
  cell.variance = Matrix::Constant(1, 1, 0.9);
  cell.label = "cell";
  fx.summaries.push_back(cell);
  return fx;
}

}  // namespace

TEST_CASE("outcome standardization is transparent for the gaussian fit") {
  // A mild affine change of the outcome scale: the whole pipeline is affine
  // equivariant, so fitting on the standardized scale and mapping back must
  // reproduce the raw-scale fit almost exactly.
  const StdFixture fx = standardization_fixture(7.0, 3.0);

  ConstraintSet cs_raw;
  cs_raw.summaries = fx.summaries;
  const MleFit mle_raw = fit_mle(FamilyKind::gaussian, fx.d);
  const FitResult raw = fit_cmle_fast(cs_raw, FamilyKind::gaussian, fx.d, mle_raw);
  REQUIRE_FALSE(raw.diag.damped_j);

  Dataset d2 = fx.d;
  auto summaries2 = fx.summaries;
  const OutcomeTransform t = standardize_outcome(d2, summaries2);
  REQUIRE(t.active);
  CHECK(std::abs(d2.y.mean()) < 1e-10);
  ConstraintSet cs_std;
  cs_std.summaries = summaries2;
  const MleFit mle_std = fit_mle(FamilyKind::gaussian, d2);
  FitResult result = fit_cmle_fast(cs_std, FamilyKind::gaussian, d2, mle_std);
  unstandardize_result(result, t);

  for (Eigen::Index j = 0; j < 3; ++j) {
    CHECK(result.params.beta(j) == Catch::Approx(raw.params.beta(j)).epsilon(1e-7));
    CHECK(result.se(j) == Catch::Approx(raw.se(j)).epsilon(1e-6));
  }
  CHECK(result.params.sigma == Catch::Approx(raw.params.sigma).epsilon(1e-8));
}

TEST_CASE("outcome standardization rescues wild outcome scales") {
  // On a scale like (5000, 900) the update matrix mixes entries across ~12
  // orders of magnitude; standardizing first keeps it well conditioned.
  const StdFixture fx = standardization_fixture(5000.0, 900.0);

  Dataset d2 = fx.d;
  auto summaries2 = fx.summaries;
  const OutcomeTransform t = standardize_outcome(d2, summaries2);
  REQUIRE(t.active);
  ConstraintSet cs_std;
  cs_std.summaries = summaries2;
  const MleFit mle_std = fit_mle(FamilyKind::gaussian, d2);
  FitResult result = fit_cmle_fast(cs_std, FamilyKind::gaussian, d2, mle_std);
  CHECK_FALSE(result.diag.damped_j);
  unstandardize_result(result, t);

  const MleFit mle_raw = fit_mle(FamilyKind::gaussian, fx.d);
  for (Eigen::Index j = 0; j < 3; ++j) {
    CHECK(std::isfinite(result.se(j)));
    CHECK(result.se(j) > 0.0);
    // same data, both root-n consistent: the fused estimate stays close to
    // the baseline fit on the raw scale
    CHECK(std::abs(result.params.beta(j) - mle_raw.params.beta(j)) <
          5.0 * std::sqrt(mle_raw.cov_beta(j, j)));
  }
  CHECK(result.params.sigma == Catch::Approx(mle_raw.params.sigma).epsilon(0.2));
}

TEST_CASE("simulate configuration parsing") {
  SECTION("valid config") {
    SimDesign d;
    std::istringstream in(
        "# study setup\n"
        "n = 200\n"
        "ad_n = 800\n"
        "reps = 50\n"
        "seed = 99\n"
        "shift = pps\n"
        "menus = phi_y,phi_x\n"
        "beta0 = 0.5,-0.5,0.5\n");
    read_sim_config(d, in);
    finalize_sim_design(d);
    CHECK(d.n == 200);
    CHECK(d.N == 800);
    CHECK(d.reps == 50);
    CHECK(d.seed == 99);
    CHECK(d.shift == ShiftMode::prior_prob);
    CHECK(d.menus.size() == 2);
    CHECK(d.theta0.size() == 1);  // defaulted by finalize
  }
  SECTION("unknown key names the line") {
    SimDesign d;
    std::istringstream in("n = 200\nbogus = 1\n");
    try {
      read_sim_config(d, in);
      FAIL("expected parse_error");
    } catch (const parse_error& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  SECTION("override syntax") {
    SimDesign d;
    apply_sim_kv(d, "reps=7");
    CHECK(d.reps == 7);
    CHECK_THROWS_AS(apply_sim_kv(d, "reps"), parse_error);
    CHECK_THROWS_AS(apply_sim_kv(d, "menus=phi_q"), parse_error);
  }
}

TEST_CASE("fit result json carries the essentials") {
  CounterRng rng(77);
  Dataset d;
  d.X.resize(60, 1);
  d.y.resize(60);
  d.covariate_names = {"x1"};
  for (Eigen::Index i = 0; i < 60; ++i) {
    d.X(i, 0) = rng.normal();
    d.y(i) = rng.normal(0.3 + 0.7 * d.X(i, 0), 1.0);
  }
  const MleFit mle = fit_mle(FamilyKind::gaussian, d);

  ConstraintSet cs;
  AdSummary s;
  s.kind = AdKind::marginal_outcome_mean;
  s.value = Vector::Constant(1, 0.35);
  s.sample_size = 5000;
  s.variance = Matrix::Constant(1, 1, 1.5);
  s.label = "ey";
  cs.summaries.push_back(s);
  const FitResult r = fit_cmle_fast(cs, FamilyKind::gaussian, d, mle);

  const json j = fit_result_json(r, d, OutcomeTransform{});
  CHECK(j.at("method") == "cmle_fast");
  CHECK(j.at("family") == "gaussian");
  CHECK(j.at("estimates").contains("x1"));
  CHECK(j.at("estimates").contains("sigma"));
  CHECK(j.at("beta").size() == 2);
  CHECK(j.at("se").size() == 2);
  CHECK(j.at("re_vs_mle").size() == 2);
  CHECK(j.at("mle").at("beta").size() == 2);
  CHECK(j.at("diagnostics").contains("cond_j"));
  CHECK(j.at("diagnostics").contains("eta"));
  CHECK(j.at("confidence_ellipsoid").contains("chi2_critical"));

  const FitResult m = fit_mle_result(FamilyKind::gaussian, d, mle, 0.05);
  const json jm = fit_result_json(m, d, OutcomeTransform{});
  CHECK(jm.at("method") == "mle");
  CHECK_FALSE(jm.contains("diagnostics"));
}

TEST_CASE("deterministic number formatting") {
  CHECK(fmt_num(0.1) == "0.1");
  CHECK(fmt_num(1.0 / 3.0) == "0.3333333333");
  CHECK(fmt_num(kNaN) == "nan");
  CHECK(fmt_num(kInf) == "inf");
  CHECK(fmt_num(-kInf) == "-inf");
  CHECK(json_num(kNaN).is_null());
}
