#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace qfactor {

/// Clamped B-spline space of a given order on [lower, upper] with equally
/// spaced interior knots.
struct SplineSpec {
  int order = 4;           // m; polynomial degree is m - 1
  int interior_knots = 0;  // L_N
  double lower = 0.0;
  double upper = 1.0;
  std::vector<double> knots;  // full knot vector, length K_N + m

  int basis_size() const { return interior_knots + order; }
};

/// Builds the clamped knot vector on the empirical range of `sample`.
/// Throws Error("degenerate covariate") when the sample has a single value.
SplineSpec make_knots(std::span<const double> sample, int interior_knots, int order = 4);

/// Same knot layout on an explicit interval; used when a spec is restored
/// from a serialized model.
SplineSpec make_knots_on(double lower, double upper, int interior_knots, int order);

struct BasisValues {
  Eigen::VectorXd values;
  bool clamped = false;  // x lay outside [lower, upper] and was moved onto it
};

/// Cox-de Boor evaluation of all K_N normalized B-splines at x.
BasisValues evaluate_raw(const SplineSpec& spec, double x);

inline Eigen::VectorXd eval_raw_basis(const SplineSpec& spec, double x) {
  return evaluate_raw(spec, x).values;
}

/// Sample-centered, sqrt(K_N)-scaled basis:
///   B_k(x) = sqrt(K_N) * (b_k(x) - mean_i b_k(X_i)).
/// Immutable after construction.
class CenteredBasis {
 public:
  static CenteredBasis fit(SplineSpec spec, std::span<const double> sample);

  /// Restores a basis from stored centers (deserialization).
  static CenteredBasis from_parts(SplineSpec spec, Eigen::VectorXd centers, int sample_size);

  const SplineSpec& spec() const { return spec_; }
  const Eigen::VectorXd& centers() const { return centers_; }
  double scale() const { return scale_; }
  int sample_size() const { return sample_size_; }
  int size() const { return spec_.basis_size(); }

  Eigen::VectorXd eval(double x) const;
  BasisValues evaluate(double x) const;

  /// Rows are eval(x_i).
  Eigen::MatrixXd matrix(std::span<const double> xs) const;
  Eigen::MatrixXd matrix(const Eigen::VectorXd& xs) const;

 private:
  CenteredBasis(SplineSpec spec, Eigen::VectorXd centers, int sample_size);

  SplineSpec spec_;
  Eigen::VectorXd centers_;
  double scale_ = 1.0;
  int sample_size_ = 0;
};

}  // namespace qfactor
