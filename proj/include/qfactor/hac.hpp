#pragma once

#include <memory>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace qfactor {

enum class HacKernel { bartlett, quadratic_spectral };

std::string to_string(HacKernel k);
/// Accepts "bartlett", "qs" and "quadratic_spectral".
HacKernel parse_kernel(std::string_view name);

/// K*(x); symmetric with K*(0) = 1 and |K*| <= 1.
double kernel_weight(HacKernel k, double x);

/// Second derivative of the quadratic spectral kernel.
double qs_second_derivative(double x);

/// Weights w_d = K*(d / m) for lags d = 0..n-1.
Eigen::VectorXd lag_weights(HacKernel k, int n, double m);

/// Symmetric Toeplitz operator (W v)_i = sum_j w_|i-j| v_j. Large dense
/// operators are applied by circulant embedding and FFT; short-support
/// ones directly.
class ToeplitzOperator {
 public:
  explicit ToeplitzOperator(Eigen::VectorXd weights);
  ~ToeplitzOperator();
  ToeplitzOperator(ToeplitzOperator&&) noexcept;
  ToeplitzOperator& operator=(ToeplitzOperator&&) noexcept;

  int size() const { return static_cast<int>(weights_.size()); }
  const Eigen::VectorXd& weights() const { return weights_; }

  /// n x k input, n x k output.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& v) const;
  /// V' W V
  Eigen::MatrixXd quadratic_form(const Eigen::MatrixXd& v) const;

 private:
  struct Spectrum;
  Eigen::VectorXd weights_;
  int support_ = 0;  // number of leading nonzero weights
  std::unique_ptr<Spectrum> spectrum_;
};

/// Fixed-b kernel functional of a discretized bridge path. `bridge` holds
/// B(k/n), k = 1..n, as rows.
///
/// Bartlett closed form with lag L = round(b n):
///   (2/b) n^-1 sum_k B_k B_k' - (1/b) n^-1 sum_{k<=n-L} (B_{k+L} B_k' + B_k B_{k+L}').
Eigen::MatrixXd bartlett_functional(const Eigen::MatrixXd& bridge, double b);

/// Riemann sum of -b^-2 K*''((r-s)/b) B(r) B(s)' for the quadratic spectral
/// kernel.
Eigen::MatrixXd qs_functional(const Eigen::MatrixXd& bridge, double b);

/// Weights -[K*((d+1)/m) - 2 K*(d/m) + K*((d-1)/m)], m = n b, for d = 0..n-1:
/// the discrete analogue of -b^-2 K*''(d/(n b)) / n^2 that needs no smoothness.
Eigen::VectorXd second_difference_weights(HacKernel k, int n, double b);

/// sum_k sum_l w_|k-l| B_k B_l' for arbitrary lag weights.
Eigen::MatrixXd generic_functional(const Eigen::MatrixXd& bridge, const Eigen::VectorXd& weights);

}  // namespace qfactor
