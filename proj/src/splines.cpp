#include "qfactor/splines.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "qfactor/common.hpp"

namespace qfactor {

SplineSpec make_knots_on(double lower, double upper, int interior_knots, int order) {
  if (order < 2) throw Error(fmt::format("spline order must be >= 2 (got {})", order));
  if (interior_knots < 0) throw Error("number of interior knots must be nonnegative");
  if (!(lower < upper)) throw Error("degenerate covariate");

  SplineSpec spec;
  spec.order = order;
  spec.interior_knots = interior_knots;
  spec.lower = lower;
  spec.upper = upper;
  spec.knots.reserve(static_cast<std::size_t>(interior_knots + 2 * order));
  spec.knots.insert(spec.knots.end(), order, lower);
  for (int l = 1; l <= interior_knots; ++l) {
    spec.knots.push_back(lower + (upper - lower) * l / (interior_knots + 1));
  }
  spec.knots.insert(spec.knots.end(), order, upper);
  return spec;
}

SplineSpec make_knots(std::span<const double> sample, int interior_knots, int order) {
  if (sample.empty()) throw Error("degenerate covariate");
  for (double v : sample) {
    if (!std::isfinite(v)) throw Error("non-finite covariate value");
  }
  const auto [lo, hi] = std::minmax_element(sample.begin(), sample.end());
  return make_knots_on(*lo, *hi, interior_knots, order);
}

BasisValues evaluate_raw(const SplineSpec& spec, double x) {
  if (std::isnan(x)) throw Error("NaN passed to spline evaluation");

  BasisValues out;
  if (x < spec.lower) {
    x = spec.lower;
    out.clamped = true;
  } else if (x > spec.upper) {
    x = spec.upper;
    out.clamped = true;
  }

  const int m = spec.order;
  const int degree = m - 1;
  const int n_basis = spec.basis_size();
  const auto& t = spec.knots;
  out.values = Eigen::VectorXd::Zero(n_basis);

  // Knot span t[span] <= x < t[span+1]; the right endpoint belongs to the
  // last non-empty span.
  int span;
  if (x >= t[n_basis]) {
    span = n_basis - 1;
  } else {
    span = static_cast<int>(std::upper_bound(t.begin() + degree, t.begin() + n_basis + 1, x) -
                            t.begin()) - 1;
  }

  // Triangular Cox-de Boor recursion over the m nonzero functions.
  std::vector<double> n(m, 0.0), left(m, 0.0), right(m, 0.0);
  n[0] = 1.0;
  for (int j = 1; j <= degree; ++j) {
    left[j] = x - t[span + 1 - j];
    right[j] = t[span + j] - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double denom = right[r + 1] + left[j - r];
      const double temp = denom > 0.0 ? n[r] / denom : 0.0;
      n[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    n[j] = saved;
  }
  for (int r = 0; r <= degree; ++r) out.values(span - degree + r) = n[r];
  return out;
}

CenteredBasis::CenteredBasis(SplineSpec spec, Eigen::VectorXd centers, int sample_size)
    : spec_(std::move(spec)),
      centers_(std::move(centers)),
      scale_(std::sqrt(static_cast<double>(spec_.basis_size()))),
      sample_size_(sample_size) {}

CenteredBasis CenteredBasis::fit(SplineSpec spec, std::span<const double> sample) {
  if (sample.empty()) throw Error("cannot center a spline basis on an empty sample");
  if (spec.basis_size() < 2) throw Error("centered basis needs K_N >= 2");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(spec.basis_size());
  for (double x : sample) sum += evaluate_raw(spec, x).values;
  const int n = static_cast<int>(sample.size());
  return CenteredBasis(std::move(spec), sum / n, n);
}

CenteredBasis CenteredBasis::from_parts(SplineSpec spec, Eigen::VectorXd centers, int sample_size) {
  if (centers.size() != spec.basis_size()) {
    throw Error(fmt::format("center vector has length {}, expected {}", centers.size(),
                            spec.basis_size()));
  }
  if (spec.basis_size() < 2) throw Error("centered basis needs K_N >= 2");
  return CenteredBasis(std::move(spec), std::move(centers), sample_size);
}

BasisValues CenteredBasis::evaluate(double x) const {
  BasisValues raw = evaluate_raw(spec_, x);
  raw.values = scale_ * (raw.values - centers_);
  return raw;
}

Eigen::VectorXd CenteredBasis::eval(double x) const { return evaluate(x).values; }

Eigen::MatrixXd CenteredBasis::matrix(std::span<const double> xs) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(xs.size()), size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = eval(xs[i]).transpose();
  }
  return out;
}

Eigen::MatrixXd CenteredBasis::matrix(const Eigen::VectorXd& xs) const {
  return matrix(std::span<const double>(xs.data(), static_cast<std::size_t>(xs.size())));
}

}  // namespace qfactor
