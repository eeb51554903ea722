#pragma once

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "qfactor/model.hpp"

namespace qfactor::testing {

// Noiseless panel y = f_u + x1 f_1 + x1^2 f_2 (or only the first term when
// J = 1) with x1, x2 ~ U[0,1]. Loadings are low-order polynomials, so they
// lie in the span of a cubic spline basis.
struct NoiselessPanel {
  Panel panel;
  Eigen::MatrixXd factors;          // raw truth, T x (J+1)
  Eigen::MatrixXd aligned_factors;  // truth under the sample normalization
  Eigen::MatrixXd aligned_loadings; // N x J
};

inline Eigen::VectorXd raw_loading(int j, const Eigen::VectorXd& x) {
  if (j == 0) return x;
  return x.array().square();
}

inline NoiselessPanel noiseless_panel(int n, int t, int J, std::uint64_t seed, double noise = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  std::student_t_distribution<double> st(2.0);
  NoiselessPanel out;
  out.panel.x.resize(n, J);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < J; ++j) out.panel.x(i, j) = u(rng);
  out.factors.resize(t, J + 1);
  for (int s = 0; s < t; ++s) {
    out.factors(s, 0) = 0.3 * g(rng);
    for (int j = 0; j < J; ++j) out.factors(s, j + 1) = 1.0 + 0.5 * g(rng);
  }
  Eigen::MatrixXd raw(n, J);
  for (int j = 0; j < J; ++j) raw.col(j) = raw_loading(j, out.panel.x.col(j));

  out.panel.y = Eigen::MatrixXd::Constant(n, t, 0.0);
  for (int s = 0; s < t; ++s) {
    out.panel.y.col(s).setConstant(out.factors(s, 0));
    for (int j = 0; j < J; ++j) out.panel.y.col(s) += raw.col(j) * out.factors(s, j + 1);
    if (noise > 0.0)
      for (int i = 0; i < n; ++i) out.panel.y(i, s) += noise * st(rng);
  }

  out.aligned_factors = out.factors;
  out.aligned_loadings.resize(n, J);
  for (int j = 0; j < J; ++j) {
    const double m = raw.col(j).mean();
    const Eigen::VectorXd c = raw.col(j).array() - m;
    const double sd = std::sqrt(c.squaredNorm() / n);
    out.aligned_loadings.col(j) = c / sd;
    out.aligned_factors.col(0) += m * out.factors.col(j + 1);
    out.aligned_factors.col(j + 1) = sd * out.factors.col(j + 1);
  }
  return out;
}

inline double sample_rms(const Eigen::VectorXd& v) { return std::sqrt(v.squaredNorm() / static_cast<double>(v.size())); }

}  // namespace qfactor::testing
