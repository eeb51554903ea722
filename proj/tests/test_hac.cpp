#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "qfactor/common.hpp"
#include "qfactor/critical_values.hpp"
#include "qfactor/hac.hpp"

namespace qfactor {
namespace {

TEST(Kernels, BasicProperties) {
  for (auto k : {HacKernel::bartlett, HacKernel::quadratic_spectral}) {
    EXPECT_DOUBLE_EQ(kernel_weight(k, 0.0), 1.0);
    for (double x = -3.0; x <= 3.0; x += 0.05) {
      EXPECT_LE(std::abs(kernel_weight(k, x)), 1.0 + 1e-15);
      EXPECT_DOUBLE_EQ(kernel_weight(k, x), kernel_weight(k, -x));
    }
  }
  EXPECT_DOUBLE_EQ(kernel_weight(HacKernel::bartlett, 0.25), 0.75);
  EXPECT_EQ(kernel_weight(HacKernel::bartlett, 1.0), 0.0);
  EXPECT_EQ(kernel_weight(HacKernel::bartlett, 2.0), 0.0);
  // Closed form 25/(12 pi^2 x^2) (sin(a)/a - cos(a)), a = 6 pi x / 5.
  for (double x : {0.1, 0.7, 1.3, 4.0}) {
    const double a = 6.0 * std::numbers::pi * x / 5.0;
    const double ref = 25.0 / (12.0 * std::numbers::pi * std::numbers::pi * x * x) * (std::sin(a) / a - std::cos(a));
    EXPECT_NEAR(kernel_weight(HacKernel::quadratic_spectral, x), ref, 1e-13);
  }
  EXPECT_EQ(parse_kernel("qs"), HacKernel::quadratic_spectral);
  EXPECT_EQ(parse_kernel("bartlett"), HacKernel::bartlett);
  EXPECT_THROW(parse_kernel("parzen"), Error);
}

TEST(Kernels, QsSecondDerivativeMatchesFiniteDifferences) {
  const double h = 1e-4;
  for (double x = -2.0; x <= 2.0; x += 0.013) {
    const double fd = (kernel_weight(HacKernel::quadratic_spectral, x + h) -
                       2.0 * kernel_weight(HacKernel::quadratic_spectral, x) +
                       kernel_weight(HacKernel::quadratic_spectral, x - h)) /
                      (h * h);
    EXPECT_NEAR(qs_second_derivative(x), fd, 1e-5) << x;
  }
  const double c = 6.0 * std::numbers::pi / 5.0;
  EXPECT_NEAR(qs_second_derivative(0.0), -c * c / 5.0, 1e-14);
}

TEST(Toeplitz, MatchesDenseProduct) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int n : {5, 40, 130, 301}) {
    for (int support : {1, 3, n}) {
      Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
      for (int d = 0; d < support; ++d) w(d) = g(rng);
      Eigen::MatrixXd dense(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) dense(i, j) = w(std::abs(i - j));
      Eigen::MatrixXd v(n, 3);
      for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = g(rng);
      const ToeplitzOperator op(w);
      const Eigen::MatrixXd expect = dense * v;
      EXPECT_LT((op.apply(v) - expect).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + expect.cwiseAbs().maxCoeff()))
          << n << " " << support;
      const Eigen::MatrixXd qf = v.transpose() * expect;
      EXPECT_LT((op.quadratic_form(v) - 0.5 * (qf + qf.transpose())).cwiseAbs().maxCoeff(), 1e-9 * (1.0 + qf.norm()));
    }
  }
}

Eigen::MatrixXd path(std::uint64_t seed, int n, int q) {
  Eigen::MatrixXd bridge;
  Eigen::VectorXd w1;
  simulate_bridge(seed, n, q, bridge, w1);
  return bridge;
}

TEST(FixedBFunctional, BridgeEndsAtZero) {
  Eigen::MatrixXd bridge;
  Eigen::VectorXd w1;
  simulate_bridge(9, 500, 2, bridge, w1);
  EXPECT_LT(bridge.row(499).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(w1.size(), 2);
}

TEST(FixedBFunctional, BartlettAtBOneIsTwiceTheIntegral) {
  const auto b = path(3, 400, 2);
  const Eigen::MatrixXd expect = 2.0 * (b.transpose() * b) / 400.0;
  EXPECT_LT((bartlett_functional(b, 1.0) - expect).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(FixedBFunctional, BartlettClosedFormMatchesSecondDifference) {
  const int n = 2000;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto b = path(seed, n, 1);
    for (double bw : {0.1, 0.2, 0.4, 0.75, 0.1234}) {
      const double closed = bartlett_functional(b, bw)(0, 0);
      const double generic = generic_functional(b, second_difference_weights(HacKernel::bartlett, n, bw))(0, 0);
      EXPECT_NEAR(generic, closed, 0.01 * std::abs(closed)) << seed << " " << bw;
    }
  }
}

TEST(FixedBFunctional, QsMatchesDirectDoubleSum) {
  const int n = 300;
  const auto b = path(11, n, 2);
  for (double bw : {0.05, 0.3, 1.0}) {
    const double nb = n * bw;
    Eigen::MatrixXd direct = Eigen::MatrixXd::Zero(2, 2);
    for (int k = 0; k < n; ++k)
      for (int l = 0; l < n; ++l)
        direct += -qs_second_derivative((k - l) / nb) / (nb * nb) * b.row(k).transpose() * b.row(l);
    EXPECT_LT((qs_functional(b, bw) - direct).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + direct.norm()));
  }
}

TEST(FixedBFunctional, QsIsPositiveOnTypicalPaths) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto b = path(100 + seed, 500, 1);
    EXPECT_GT(qs_functional(b, 0.5)(0, 0), 0.0);
  }
}

TEST(FixedBFunctional, RejectsBadBandwidth) {
  const auto b = path(1, 100, 1);
  EXPECT_THROW(bartlett_functional(b, 0.0), Error);
  EXPECT_THROW(qs_functional(b, 1.5), Error);
  EXPECT_THROW(lag_weights(HacKernel::bartlett, 10, 0.0), Error);
}

}  // namespace
}  // namespace qfactor
