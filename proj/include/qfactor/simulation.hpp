#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qfactor/critical_values.hpp"
#include "qfactor/inference.hpp"
#include "qfactor/model.hpp"

namespace qfactor {

enum class LoadingShape { linear, quadratic, sine, exponential };

std::string to_string(LoadingShape s);
LoadingShape parse_loading_shape(std::string_view name);

/// Loading function standardized under X ~ Uniform[0,1]: mean 0 and second
/// moment 1, computed by composite Simpson quadrature.
class TrueLoading {
 public:
  explicit TrueLoading(LoadingShape shape);
  LoadingShape shape() const { return shape_; }
  double raw(double x) const;
  double operator()(double x) const { return (raw(x) - mean_) / sd_; }

 private:
  LoadingShape shape_;
  double mean_ = 0.0;
  double sd_ = 1.0;
};

enum class Innovation { student_t, normal };

struct SimDesign {
  int n_units = 100;
  int n_periods = 10;
  int n_characteristics = 2;
  /// Empty: cycle sine, quadratic, linear.
  std::vector<LoadingShape> loadings;
  /// Empty: 1 for every characteristic. Must be nonzero.
  std::vector<double> factor_means;
  double factor_ar = 0.3;
  double factor_sd = 0.5;  // innovation sd of the factor AR(1); 0 keeps f_jt = mu_j
  double intercept_mean = 0.0;
  double intercept_sd = 0.3;
  double rho_x = 0.0;  // cross-sectional MA decay
  double rho_t = 0.0;  // AR coefficient of the errors in time
  Innovation innovation = Innovation::student_t;
  double df = 2.0;
  double noise_scale = 1.0;
  double tau = 0.5;
  /// Units are sorted by this covariate (0-based) before the errors are
  /// attached, so the cross-sectional dependence follows that covariate.
  std::optional<int> sort_by_covariate;
  int burn_in = 100;

  LoadingShape loading_shape(int j) const;
  double factor_mean(int j) const;
  void validate() const;
};

struct GroundTruth {
  Eigen::MatrixXd factors;           // T x (J+1), population-normalized loadings
  Eigen::MatrixXd loadings;          // N x J, g0_j(X_ji)
  Eigen::MatrixXd aligned_factors;   // same surface, sample normalization, canonical signs
  Eigen::MatrixXd aligned_loadings;  // N x J
  Eigen::MatrixXd errors;            // N x T, recentered
  double shift = 0.0;
};

struct SimulatedPanel {
  Panel panel;
  GroundTruth truth;
};

SimulatedPanel generate_panel(const SimDesign& design, std::uint64_t seed);

/// Raw (uncentered) error field: N x T matrix of the MA-in-i, AR-in-t
/// process before recentering.
Eigen::MatrixXd simulate_error_field(const SimDesign& design, int n_units, int n_periods, std::uint64_t seed);

/// tau-quantile of the marginal error law (0 for tau = 0.5 with symmetric
/// innovations). Estimated once per law from 10^7 pre-simulated draws and
/// cached for the life of the process.
double recentering_shift(const SimDesign& design);

enum class McKind { rmse, coverage, size };
std::string to_string(McKind k);
McKind parse_mc_kind(std::string_view name);

struct McConfig {
  ModelConfig model{};
  /// When set, every characteristic uses floor((N T)^(1/5)) interior knots.
  bool knots_rule = false;
  InferenceConfig inference{};
  int test_factor = 1;  // factor column tested (0 = intercept)
  int test_period = 0;
  FixedBOptions table_options{};
};

struct McReplication {
  int rep = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int iterations = 0;
  bool converged = false;
  double factor_max_error = 0.0;  // max_t ||f_t - f0_t||
  double factor_rmse = 0.0;       // root mean square over all (t, column)
  std::vector<double> loading_errors;  // sample L2 per j
  double statistic = 0.0;
  double truth_value = 0.0;
  bool reject = false;
  double runtime_seconds = 0.0;
};

struct McReport {
  SimDesign design;
  McKind kind = McKind::rmse;
  int reps = 0;
  int failures = 0;
  std::vector<McReplication> rows;
  double critical_value = 0.0;  // inference runs only

  double median_factor_rmse() const;
  double median_factor_max_error() const;
  double median_loading_error(int j) const;
  double rejection_rate() const;  // over successful reps
  double coverage_rate() const { return 1.0 - rejection_rate(); }

  /// One row per replication; runtimes are left out so repeated runs give
  /// identical files.
  std::string to_csv() const;
  std::string summary_json() const;
};

McReport run_monte_carlo(const SimDesign& design, const McConfig& config, int reps, McKind kind,
                         std::uint64_t seed, const CriticalValueTable* table = nullptr);

struct RatePoint {
  int n_units = 0;
  int n_periods = 0;
  int reps = 0;
  int failures = 0;
  double median_factor_rmse = 0.0;
  double median_loading_error = 0.0;
};

struct RateStudy {
  std::vector<RatePoint> points;
  double factor_slope = 0.0;
  double loading_slope = 0.0;
  double factor_slope_lo = 0.0, factor_slope_hi = 0.0;   // bootstrap 95% band
  double loading_slope_lo = 0.0, loading_slope_hi = 0.0;
  bool noiseless_floor = false;  // errors at machine precision; slopes meaningless

  std::string to_csv() const;
};

/// Fits log(median error) on log N across designs.
RateStudy convergence_rate_study(const std::vector<SimDesign>& designs, const McConfig& config, int reps,
                                 std::uint64_t seed, int bootstrap_reps = 200);

}  // namespace qfactor
