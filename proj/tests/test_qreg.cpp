#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "qfactor/common.hpp"
#include "qfactor/qreg.hpp"

namespace qfactor {
namespace {

QregProblem random_problem(std::mt19937_64& rng, int n, int p, double tau) {
  std::normal_distribution<double> g;
  QregProblem prob;
  prob.tau = tau;
  prob.design.resize(n, p);
  prob.response.resize(n);
  for (int i = 0; i < n; ++i) {
    prob.design(i, 0) = 1.0;
    for (int k = 1; k < p; ++k) prob.design(i, k) = g(rng);
    prob.response(i) = 0.5 + prob.design.row(i).tail(p - 1).sum() + std::pow(g(rng), 3);
  }
  return prob;
}

QregProblem intercept_only(std::vector<double> y, double tau) {
  QregProblem prob;
  prob.tau = tau;
  prob.design = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(y.size()), 1);
  prob.response = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  return prob;
}

TEST(CheckLoss, Definition) {
  EXPECT_DOUBLE_EQ(check_loss(1.0, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(check_loss(-1.0, 0.2), 0.8);
  for (double tau : {0.1, 0.5, 0.9}) EXPECT_EQ(check_loss(0.0, tau), 0.0);
  EXPECT_TRUE(std::isnan(check_loss(std::nan(""), 0.5)));
}

TEST(Solve, MedianOfFivePoints) {
  const auto prob = intercept_only({1, 2, 3, 4, 5}, 0.5);
  const auto sol = solve(prob);
  EXPECT_EQ(sol.status, QregStatus::converged);
  EXPECT_NEAR(sol.coefficients(0), 3.0, 1e-9);
  EXPECT_NEAR(sol.objective, 3.0, 1e-9);
  const auto oracle = solve_oracle(prob);
  EXPECT_NEAR(oracle.coefficients(0), 3.0, 1e-12);
  EXPECT_NEAR(oracle.objective, 3.0, 1e-12);
}

TEST(Solve, InterceptSubgradientCondition) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (double tau : {0.1, 0.25, 0.5, 0.8}) {
    std::vector<double> y(37);
    for (auto& v : y) v = g(rng);
    const auto sol = solve(intercept_only(y, tau));
    const double beta = sol.coefficients(0);
    int below = 0, at_or_below = 0;
    for (double v : y) {
      below += v < beta - 1e-9;
      at_or_below += v <= beta + 1e-9;
    }
    EXPECT_LE(below, 37 * tau);
    EXPECT_GE(at_or_below, 37 * tau);
  }
}

TEST(SolveOracle, NonUniqueQuantile) {
  const auto prob = intercept_only({0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 0.2);
  const auto oracle = solve_oracle(prob);
  const double c = oracle.coefficients(0);
  EXPECT_TRUE(c == 1.0 || c == 2.0) << c;
  // Objective scan over the data points.
  double best = 1e300;
  for (int k = 0; k < 10; ++k) best = std::min(best, objective(prob, Eigen::VectorXd::Constant(1, k)));
  EXPECT_NEAR(oracle.objective, best, 1e-12);
  const auto sol = solve(prob);
  EXPECT_NEAR(sol.objective, best, 1e-9);
}

TEST(SolveOracle, SkipsSingularSubsetsAndGuardsSize) {
  QregProblem prob;
  prob.tau = 0.5;
  prob.design.resize(4, 2);
  prob.design << 1, 0, 1, 0, 1, 1, 1, 2;  // first two rows identical
  prob.response.resize(4);
  prob.response << 1, 1.5, 2, 3;
  EXPECT_NO_THROW(solve_oracle(prob));

  std::mt19937_64 rng(1);
  EXPECT_THROW(solve_oracle(random_problem(rng, 16, 2, 0.5)), Error);
  try {
    solve_oracle(random_problem(rng, 10, 5, 0.5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "instance too large for oracle");
  }
}

TEST(Solve, RandomTenByTwoMatchesOracle) {
  std::mt19937_64 rng(2024);
  const auto prob = random_problem(rng, 10, 2, 0.3);
  EXPECT_NEAR(solve(prob).objective, solve_oracle(prob).objective, 1e-8);
}

TEST(Solve, OracleEquivalenceProperty) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> nd(4, 12), pd(1, 3);
  const double taus[] = {0.2, 0.5, 0.8};
  for (int rep = 0; rep < 200; ++rep) {
    const int p = pd(rng);
    const int n = std::max(nd(rng), p + 1);
    const auto prob = random_problem(rng, n, p, taus[rep % 3]);
    const auto sol = solve(prob);
    const auto oracle = solve_oracle(prob);
    EXPECT_NEAR(sol.objective, oracle.objective, 1e-8) << "rep " << rep;
    EXPECT_NEAR(sol.objective, objective(prob, sol.coefficients), 1e-8 * (1 + sol.objective));
  }
}

TEST(Solve, WeightedMatchesOracle) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int rep = 0; rep < 30; ++rep) {
    auto prob = random_problem(rng, 11, 3, 0.35);
    prob.weights.resize(11);
    for (int i = 0; i < 11; ++i) prob.weights(i) = u(rng);
    prob.weights(rep % 11) = 0.0;
    EXPECT_NEAR(solve(prob).objective, solve_oracle(prob).objective, 1e-8);
  }
}

TEST(Solve, ScaleEquivariance) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    auto prob = random_problem(rng, 60, 3, 0.5);
    const auto base = solve(prob);
    const double a = 2.5;
    Eigen::Vector3d shift(1.0, -2.0, 0.5);
    QregProblem moved = prob;
    moved.response = a * prob.response + prob.design * shift;
    const auto sol = solve(moved);
    EXPECT_NEAR(sol.objective, a * base.objective, 1e-7 * (1 + base.objective));
    // Continuous noise gives a unique optimum almost surely.
    EXPECT_LT((sol.coefficients - (a * base.coefficients + shift)).cwiseAbs().maxCoeff(), 1e-7);
  }
}

TEST(Solve, DominatesZeroVectorAndIsFinite) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const auto prob = random_problem(rng, 40, 4, 0.15 + 0.035 * rep);
    const auto sol = solve(prob);
    EXPECT_TRUE(std::isfinite(sol.objective));
    EXPECT_GE(sol.objective, 0.0);
    EXPECT_LE(sol.objective, objective(prob, Eigen::VectorXd::Zero(4)) + 1e-12);
  }
}

TEST(Solve, LargeProblemOptimality) {
  // 5000 x 12: compare against an independent perturbation check. At an
  // optimum no coordinate direction can improve the objective.
  std::mt19937_64 rng(12);
  const auto prob = random_problem(rng, 5000, 12, 0.3);
  const auto sol = solve(prob);
  EXPECT_EQ(sol.status, QregStatus::converged);
  for (int k = 0; k < 12; ++k) {
    for (double step : {1e-4, -1e-4}) {
      Eigen::VectorXd b = sol.coefficients;
      b(k) += step;
      EXPECT_GE(objective(prob, b), sol.objective - 1e-9);
    }
  }
}

TEST(Solve, ExactFitRecoversCoefficients) {
  std::mt19937_64 rng(4);
  auto prob = random_problem(rng, 200, 5, 0.5);
  Eigen::VectorXd truth(5);
  truth << 1, -2, 3, 0.5, 0.25;
  prob.response = prob.design * truth;
  const auto sol = solve(prob);
  EXPECT_LT(sol.objective, 1e-10);
  EXPECT_LT((sol.coefficients - truth).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Solve, RankDeficientDesignIsDegenerate) {
  std::mt19937_64 rng(6);
  auto prob = random_problem(rng, 30, 3, 0.5);
  Eigen::MatrixXd z(30, 4);
  z << prob.design, prob.design.col(1) + prob.design.col(2);
  prob.design = z;
  const auto sol = solve(prob);
  EXPECT_EQ(sol.status, QregStatus::degenerate);
  // Same optimum as the full-rank reduced design.
  QregProblem reduced = prob;
  reduced.design = z.leftCols(3);
  EXPECT_NEAR(sol.objective, solve(reduced).objective, 1e-7);
  // Least-norm representative: orthogonal to the null direction (0,1,1,-1).
  Eigen::Vector4d null_dir(0, 1, 1, -1);
  EXPECT_LT(std::abs(sol.coefficients.dot(null_dir)), 1e-5);
}

TEST(Solve, MaxIterStatusReported) {
  std::mt19937_64 rng(10);
  const auto prob = random_problem(rng, 300, 3, 0.5);
  QregOptions opts;
  opts.max_iter = 1;
  const auto sol = solve(prob, opts);
  EXPECT_EQ(sol.status, QregStatus::max_iter);
  EXPECT_TRUE(sol.coefficients.allFinite());
}

TEST(Validate, RejectsBadInput) {
  QregProblem prob = intercept_only({1, 2, 3}, 0.5);
  prob.tau = 1.0;
  EXPECT_THROW(solve(prob), Error);
  prob.tau = 0.5;
  prob.response(1) = std::nan("");
  EXPECT_THROW(solve(prob), Error);
  QregProblem wide;
  wide.design = Eigen::MatrixXd::Ones(2, 3);
  wide.response = Eigen::VectorXd::Ones(2);
  EXPECT_THROW(solve(wide), Error);
}

}  // namespace
}  // namespace qfactor
