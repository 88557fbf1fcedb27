#include <catch2/catch_amalgamated.hpp>

#include "aggfuse/el.hpp"
#include "aggfuse/rng.hpp"
#include "support/oracles.hpp"

using namespace aggfuse;

namespace {

Matrix random_feasible_psi(CounterRng& rng, Eigen::Index n, Eigen::Index r) {
  // mean-zero columns keep 0 strictly inside the hull with high probability
  Matrix psi(n, r);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < r; ++j) psi(i, j) = rng.normal();
  psi.rowwise() -= psi.colwise().mean();
  return psi;
}

}  // namespace

TEST_CASE("two-point scalar problem has the known closed form") {
  // psi = {-1, 3}: eta solves -1/(1-eta) + 3/(1+3 eta) = 0, so eta = 1/3,
  // weights (3/4, 1/4), penalty log(4/3).
  Matrix psi(2, 1);
  psi << -1.0, 3.0;
  const ElSolution el = solve_eta(psi);
  REQUIRE(el.converged);
  CHECK(el.eta(0) == Catch::Approx(1.0 / 3.0).epsilon(1e-9));
  CHECK(el.weights(0) == Catch::Approx(0.75).epsilon(1e-9));
  CHECK(el.weights(1) == Catch::Approx(0.25).epsilon(1e-9));
  CHECK(el.penalty == Catch::Approx(std::log(4.0 / 3.0)).epsilon(1e-9));
  CHECK(profile_penalty(psi) == Catch::Approx(std::log(4.0 / 3.0)).epsilon(1e-9));
}

TEST_CASE("weights are a proper distribution solving the moment condition") {
  CounterRng rng(17);
  for (int inst = 0; inst < 40; ++inst) {
    const Eigen::Index n = 20 + static_cast<Eigen::Index>(rng.uniform() * 60);
    const Eigen::Index r = 1 + static_cast<Eigen::Index>(rng.uniform() * 3);
    const Matrix psi = random_feasible_psi(rng, n, r);
    const ElSolution el = solve_eta(psi);
    REQUIRE(el.converged);
    CHECK(std::abs(el.weights.sum() - 1.0) < 1e-10);
    CHECK((psi.transpose() * el.weights).lpNorm<Eigen::Infinity>() < 1e-8);
    CHECK(el.weights.minCoeff() > 0.0);
    CHECK(el.weights.maxCoeff() < 1.0);
    // p_i = 1 / (n (1 + eta' psi_i))
    for (Eigen::Index i = 0; i < n; ++i) {
      const double z = 1.0 + el.eta.dot(psi.row(i));
      CHECK(el.weights(i) == Catch::Approx(1.0 / (n * z)).epsilon(1e-10));
    }
  }
}

TEST_CASE("dual objective is maximized at the reported eta") {
  CounterRng rng(23);
  const Matrix psi = random_feasible_psi(rng, 60, 2);
  const ElSolution el = solve_eta(psi);
  REQUIRE(el.converged);
  auto dual = [&](const Vector& eta) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < psi.rows(); ++i) {
      const double z = 1.0 + eta.dot(psi.row(i));
      if (z <= 0.0) return -kInf;
      s += std::log(z);
    }
    return s;
  };
  const double at_opt = dual(el.eta);
  CHECK(at_opt == Catch::Approx(el.penalty).epsilon(1e-12));
  for (int k = 0; k < 20; ++k) {
    Vector pert(2);
    pert << rng.normal(0, 1e-3), rng.normal(0, 1e-3);
    CHECK(dual(el.eta + pert) <= at_opt + 1e-12);
  }
}

TEST_CASE("zero constraint row gives eta with zero effect") {
  Matrix psi = Matrix::Zero(10, 1);
  const ElSolution el = solve_eta(psi);
  REQUIRE(el.converged);
  CHECK(el.penalty == Catch::Approx(0.0).margin(1e-12));
  CHECK(el.weights(0) == Catch::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("hull violations are detected") {
  SECTION("all values strictly positive") {
    Matrix psi(30, 1);
    for (Eigen::Index i = 0; i < 30; ++i) psi(i, 0) = 0.5 + 0.1 * static_cast<double>(i % 7);
    CHECK_THROWS_AS(solve_eta(psi), hull_error);
    const ElSolution el = solve_eta_impl(psi, ElOptions());
    CHECK_FALSE(el.converged);
  }
  SECTION("zero on the hull boundary in one of two dimensions") {
    CounterRng rng(31);
    Matrix psi(40, 2);
    for (Eigen::Index i = 0; i < 40; ++i) {
      psi(i, 0) = rng.normal();
      psi(i, 1) = std::abs(rng.normal()) + 0.05;  // second component positive
    }
    psi.col(0).array() -= psi.col(0).mean();
    CHECK_THROWS_AS(solve_eta(psi), hull_error);
  }
  SECTION("error message carries diagnostics") {
    Matrix psi(5, 1);
    psi << 1.0, 2.0, 3.0, 4.0, 5.0;
    try {
      solve_eta(psi);
      FAIL("expected hull_error");
    } catch (const hull_error& e) {
      CHECK(std::string(e.what()).find("hull") != std::string::npos);
    }
  }
}

TEST_CASE("solver agrees with the primal augmented-Lagrangian oracle") {
  CounterRng rng(41);
  int solved = 0;
  for (int inst = 0; inst < 30; ++inst) {
    const Eigen::Index n = 15 + static_cast<Eigen::Index>(rng.uniform() * 30);
    const Eigen::Index r = 1 + static_cast<Eigen::Index>(rng.uniform() * 2);
    const Matrix psi = random_feasible_psi(rng, n, r);
    const ElSolution el = solve_eta(psi);
    REQUIRE(el.converged);
    const auto primal = oracle::primal_profile_weights(psi);
    if (!primal.converged) continue;  // oracle is crude; skip its failures
    ++solved;
    for (Eigen::Index i = 0; i < n; ++i)
      CHECK(el.weights(i) == Catch::Approx(primal.weights(i)).margin(1e-6));
    // penalty = -sum log(n p_i)
    CHECK(el.penalty == Catch::Approx(-primal.log_weight_sum).margin(1e-5));
  }
  CHECK(solved >= 20);
}

TEST_CASE("near-boundary problems still satisfy the invariants") {
  // one extreme point pulls eta toward the log-star region
  Matrix psi(25, 1);
  for (Eigen::Index i = 0; i < 24; ++i) psi(i, 0) = -0.2 + 0.01 * static_cast<double>(i);
  psi(24, 0) = 8.0;
  psi.array() -= psi.mean() - 0.02;  // keep zero inside but close to the edge
  const ElSolution el = solve_eta(psi);
  if (el.converged) {
    CHECK(std::abs(el.weights.sum() - 1.0) < 1e-9);
    CHECK((psi.transpose() * el.weights).lpNorm<Eigen::Infinity>() < 1e-7);
  }
}
