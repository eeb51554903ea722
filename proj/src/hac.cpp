#include "qfactor/hac.hpp"

#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <numbers>

#include <fftw3.h>
#include <fmt/format.h>

#include "qfactor/common.hpp"

namespace qfactor {

std::string to_string(HacKernel k) {
  return k == HacKernel::bartlett ? "bartlett" : "qs";
}

HacKernel parse_kernel(std::string_view name) {
  if (name == "bartlett") return HacKernel::bartlett;
  if (name == "qs" || name == "quadratic_spectral") return HacKernel::quadratic_spectral;
  throw Error(fmt::format("unknown kernel '{}' (expected bartlett or qs)", name));
}

namespace {

constexpr double kQsScale = 6.0 * std::numbers::pi / 5.0;

// phi(a) = 3 (sin a - a cos a) / a^3 = sum_k c_k a^(2k-2),
// c_k = 3 (-1)^(k+1) 2k / (2k+1)!. The series avoids cancellation near 0.
constexpr int kSeriesTerms = 12;
constexpr double kSeriesRadius = 1.0;

double series_coefficient(int k) {
  double fact = 1.0;
  for (int i = 2; i <= 2 * k + 1; ++i) fact *= i;
  return (k % 2 == 1 ? 3.0 : -3.0) * 2.0 * k / fact;
}

double qs_profile(double a) {
  if (std::abs(a) < kSeriesRadius) {
    double sum = 0.0, pow = 1.0;
    for (int k = 1; k <= kSeriesTerms; ++k, pow *= a * a) sum += series_coefficient(k) * pow;
    return sum;
  }
  return 3.0 * (std::sin(a) - a * std::cos(a)) / (a * a * a);
}

double qs_profile_second(double a) {
  if (std::abs(a) < kSeriesRadius) {
    double sum = 0.0, pow = 1.0;
    for (int k = 2; k <= kSeriesTerms; ++k, pow *= a * a) sum += series_coefficient(k) * (2 * k - 2) * (2 * k - 3) * pow;
    return sum;
  }
  const double s = std::sin(a), c = std::cos(a);
  const double a2 = a * a, a3 = a2 * a;
  return 3.0 * (c / a2 - 5.0 * s / a3 + 12.0 * s / (a3 * a2) - 12.0 * c / (a2 * a2));
}

}  // namespace

double kernel_weight(HacKernel k, double x) {
  if (k == HacKernel::bartlett) {
    const double ax = std::abs(x);
    return ax < 1.0 ? 1.0 - ax : 0.0;
  }
  return qs_profile(kQsScale * x);
}

double qs_second_derivative(double x) {
  return kQsScale * kQsScale * qs_profile_second(kQsScale * x);
}

Eigen::VectorXd lag_weights(HacKernel k, int n, double m) {
  if (!(m > 0.0)) throw Error("kernel bandwidth must be positive");
  Eigen::VectorXd w(n);
  for (int d = 0; d < n; ++d) w(d) = kernel_weight(k, d / m);
  return w;
}

// FFT plans are created once per transform length. Creation is serialized;
// execution with the new-array interface is thread safe.
namespace {

struct Plans {
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;
};

Plans plans_for(int p) {
  static std::mutex mutex;
  static std::map<int, Plans> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find(p);
  if (it != cache.end()) return it->second;
  double* in = fftw_alloc_real(static_cast<std::size_t>(p));
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(p / 2 + 1));
  Plans plans;
  plans.forward = fftw_plan_dft_r2c_1d(p, in, out, FFTW_ESTIMATE);
  plans.backward = fftw_plan_dft_c2r_1d(p, out, in, FFTW_ESTIMATE);
  fftw_free(in);
  fftw_free(out);
  if (!plans.forward || !plans.backward) throw Error(fmt::format("FFT planning failed for length {}", p));
  cache.emplace(p, plans);
  return plans;
}

struct RealBuffer {
  explicit RealBuffer(int n) : data(fftw_alloc_real(static_cast<std::size_t>(n))) {}
  ~RealBuffer() { fftw_free(data); }
  RealBuffer(const RealBuffer&) = delete;
  RealBuffer& operator=(const RealBuffer&) = delete;
  double* data;
};

struct ComplexBuffer {
  explicit ComplexBuffer(int n) : data(fftw_alloc_complex(static_cast<std::size_t>(n))) {}
  ~ComplexBuffer() { fftw_free(data); }
  ComplexBuffer(const ComplexBuffer&) = delete;
  ComplexBuffer& operator=(const ComplexBuffer&) = delete;
  fftw_complex* data;
};

constexpr int kDirectSupport = 64;

}  // namespace

struct ToeplitzOperator::Spectrum {
  int length = 0;
  Plans plans;
  std::vector<std::complex<double>> values;
};

ToeplitzOperator::ToeplitzOperator(Eigen::VectorXd weights) : weights_(std::move(weights)) {
  const int n = size();
  if (n < 1) throw Error("Toeplitz operator needs at least one weight");
  if (!weights_.allFinite()) throw Error("Toeplitz weights must be finite");
  support_ = n;
  while (support_ > 1 && weights_(support_ - 1) == 0.0) --support_;
  if (support_ <= kDirectSupport) return;

  int p = 1;
  while (p < 2 * n) p *= 2;
  spectrum_ = std::make_unique<Spectrum>();
  spectrum_->length = p;
  spectrum_->plans = plans_for(p);
  RealBuffer col(p);
  ComplexBuffer out(p / 2 + 1);
  for (int i = 0; i < p; ++i) col.data[i] = 0.0;
  col.data[0] = weights_(0);
  for (int d = 1; d < n; ++d) {
    col.data[d] = weights_(d);
    col.data[p - d] = weights_(d);
  }
  fftw_execute_dft_r2c(spectrum_->plans.forward, col.data, out.data);
  spectrum_->values.resize(static_cast<std::size_t>(p / 2 + 1));
  for (int k = 0; k <= p / 2; ++k) spectrum_->values[static_cast<std::size_t>(k)] = {out.data[k][0], out.data[k][1]};
}

ToeplitzOperator::~ToeplitzOperator() = default;
ToeplitzOperator::ToeplitzOperator(ToeplitzOperator&&) noexcept = default;
ToeplitzOperator& ToeplitzOperator::operator=(ToeplitzOperator&&) noexcept = default;

Eigen::MatrixXd ToeplitzOperator::apply(const Eigen::MatrixXd& v) const {
  const int n = size();
  if (v.rows() != n) throw Error(fmt::format("Toeplitz operator of size {} applied to {} rows", n, v.rows()));
  Eigen::MatrixXd out(n, v.cols());
  if (!spectrum_) {
    out = weights_(0) * v;
    for (int d = 1; d < support_; ++d) {
      const double w = weights_(d);
      if (w == 0.0) continue;
      out.bottomRows(n - d) += w * v.topRows(n - d);
      out.topRows(n - d) += w * v.bottomRows(n - d);
    }
    return out;
  }
  const int p = spectrum_->length;
  RealBuffer buf(p);
  ComplexBuffer freq(p / 2 + 1);
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    for (int i = 0; i < n; ++i) buf.data[i] = v(i, c);
    for (int i = n; i < p; ++i) buf.data[i] = 0.0;
    fftw_execute_dft_r2c(spectrum_->plans.forward, buf.data, freq.data);
    for (int k = 0; k <= p / 2; ++k) {
      const std::complex<double> z(freq.data[k][0], freq.data[k][1]);
      const auto prod = z * spectrum_->values[static_cast<std::size_t>(k)];
      freq.data[k][0] = prod.real();
      freq.data[k][1] = prod.imag();
    }
    fftw_execute_dft_c2r(spectrum_->plans.backward, freq.data, buf.data);
    for (int i = 0; i < n; ++i) out(i, c) = buf.data[i] / p;
  }
  return out;
}

Eigen::MatrixXd ToeplitzOperator::quadratic_form(const Eigen::MatrixXd& v) const {
  Eigen::MatrixXd q = v.transpose() * apply(v);
  return 0.5 * (q + q.transpose());
}

Eigen::MatrixXd bartlett_functional(const Eigen::MatrixXd& bridge, double b) {
  if (!(b > 0.0 && b <= 1.0)) throw Error(fmt::format("b must lie in (0,1] (got {})", b));
  const auto n = bridge.rows();
  const auto lag = static_cast<Eigen::Index>(std::llround(b * static_cast<double>(n)));
  Eigen::MatrixXd q = (2.0 / b) * (bridge.transpose() * bridge) / static_cast<double>(n);
  if (lag < n) {
    const Eigen::MatrixXd cross =
        bridge.bottomRows(n - lag).transpose() * bridge.topRows(n - lag) / static_cast<double>(n);
    q -= (1.0 / b) * (cross + cross.transpose());
  }
  return q;
}

Eigen::MatrixXd qs_functional(const Eigen::MatrixXd& bridge, double b) {
  if (!(b > 0.0 && b <= 1.0)) throw Error(fmt::format("b must lie in (0,1] (got {})", b));
  const auto n = static_cast<int>(bridge.rows());
  const double nb = n * b;
  Eigen::VectorXd w(n);
  for (int d = 0; d < n; ++d) w(d) = -qs_second_derivative(d / nb) / (nb * nb);
  return ToeplitzOperator(std::move(w)).quadratic_form(bridge);
}

Eigen::VectorXd second_difference_weights(HacKernel k, int n, double b) {
  if (!(b > 0.0 && b <= 1.0)) throw Error(fmt::format("b must lie in (0,1] (got {})", b));
  const double m = n * b;
  Eigen::VectorXd w(n);
  for (int d = 0; d < n; ++d) {
    w(d) = -(kernel_weight(k, (d + 1) / m) - 2.0 * kernel_weight(k, d / m) + kernel_weight(k, (d - 1) / m));
  }
  return w;
}

Eigen::MatrixXd generic_functional(const Eigen::MatrixXd& bridge, const Eigen::VectorXd& weights) {
  const auto n = bridge.rows();
  if (weights.size() != n) throw Error("lag weights do not match the path length");
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(bridge.cols(), bridge.cols());
  for (Eigen::Index k = 0; k < n; ++k) {
    for (Eigen::Index l = 0; l < n; ++l) {
      q += weights(std::abs(k - l)) * bridge.row(k).transpose() * bridge.row(l);
    }
  }
  return q;
}

}  // namespace qfactor
