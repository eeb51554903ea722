#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "qfactor/qreg.hpp"
#include "qfactor/splines.hpp"

namespace qfactor {

/// Balanced panel: y is N x T (units by periods), x is N x J with
/// time-invariant characteristics.
struct Panel {
  Eigen::MatrixXd y;
  Eigen::MatrixXd x;
  std::vector<std::string> unit_ids;
  std::vector<std::string> period_ids;
  std::vector<std::string> characteristic_names;

  int n_units() const { return static_cast<int>(y.rows()); }
  int n_periods() const { return static_cast<int>(y.cols()); }
  int n_characteristics() const { return static_cast<int>(x.cols()); }
};

/// Checks the panel invariants and fills in default labels. Throws Error
/// naming the offending entry ("degenerate covariate" for a constant column).
Panel validate_panel(Panel raw);

struct SplineParams {
  int order = 4;
  int interior_knots = 3;
};

struct ModelConfig {
  double tau = 0.5;
  /// One entry per characteristic, or a single entry shared by all.
  std::vector<SplineParams> splines{SplineParams{}};
  double epsilon = 1e-4;
  int max_iter = 50;
  QregOptions solver{};

  const SplineParams& spline_for(int j) const;
  void validate(int n_characteristics) const;
};

/// Loading function g(x) = B(x)' lambda / normalizer.
struct LoadingState {
  Eigen::VectorXd lambda;
  double normalizer = 1.0;
};

/// One pass of the alternating algorithm. Objectives are pooled means of
/// the check loss: before/after the loading update at fixed factors, and
/// before/after the factor update at fixed (normalized) loadings.
struct IterationRecord {
  int iteration = 0;
  double factor_change = 0.0;
  double lambda_change = 0.0;
  double objective = 0.0;
  double objective_before_loadings = 0.0;
  double objective_after_loadings = 0.0;
  double objective_before_factors = 0.0;
  double normalization_error = 0.0;  // max_j |N^-1 sum g_j^2 - 1|
  double min_factor_mean = 0.0;      // min_j T^-1 sum_t f_jt
};

using IterationTrace = std::vector<IterationRecord>;

/// Estimated model. Immutable; every constructor checks
///  - N^-1 sum_i g_j(X_ji)^2 = 1 (1e-8) for each j,
///  - T^-1 sum_t f_jt >= 0 for each j,
///  - residuals = y - f_u - sum_j g_j f_j (when built from a panel).
class FittedModel {
 public:
  /// Builds the model from estimated pieces; residuals are computed from the
  /// panel.
  static FittedModel assemble(const Panel& panel, ModelConfig config,
                              std::vector<CenteredBasis> bases, std::vector<LoadingState> loadings,
                              Eigen::MatrixXd factors, IterationTrace trace, bool converged);

  /// Restores a model from stored pieces (residuals supplied directly).
  static FittedModel restore(ModelConfig config, std::vector<CenteredBasis> bases,
                             std::vector<LoadingState> loadings, Eigen::MatrixXd factors,
                             Eigen::MatrixXd covariates, Eigen::MatrixXd residuals,
                             IterationTrace trace, bool converged,
                             std::vector<std::string> characteristic_names = {});

  int n_units() const { return static_cast<int>(covariates_.rows()); }
  int n_periods() const { return static_cast<int>(factors_.rows()); }
  int n_characteristics() const { return static_cast<int>(loadings_.size()); }

  const ModelConfig& config() const { return config_; }
  double tau() const { return config_.tau; }
  /// T x (J+1); column 0 is the intercept factor f_u.
  const Eigen::MatrixXd& factors() const { return factors_; }
  const std::vector<LoadingState>& loadings() const { return loadings_; }
  const std::vector<CenteredBasis>& bases() const { return bases_; }
  const Eigen::MatrixXd& covariates() const { return covariates_; }
  /// N x T
  const Eigen::MatrixXd& residuals() const { return residuals_; }
  const IterationTrace& trace() const { return trace_; }
  int iterations_used() const { return static_cast<int>(trace_.size()); }
  bool converged() const { return converged_; }
  const std::vector<std::string>& characteristic_names() const { return names_; }

  /// N x J matrix of g_j(X_ji).
  const Eigen::MatrixXd& loadings_at_sample() const { return g_sample_; }
  /// G_i = (1, g_1(X_1i), ..., g_J(X_Ji)) stacked as an N x (J+1) matrix.
  Eigen::MatrixXd design_matrix() const;

  /// Mean check loss over all (i, t).
  double mean_check_loss() const;

  /// Checks that the stored residuals match y from the panel (1e-10).
  void check_residuals(const Panel& panel) const;

 private:
  FittedModel() = default;
  void finalize(const Eigen::MatrixXd* y);

  ModelConfig config_;
  std::vector<CenteredBasis> bases_;
  std::vector<LoadingState> loadings_;
  Eigen::MatrixXd factors_;
  Eigen::MatrixXd covariates_;
  Eigen::MatrixXd residuals_;
  Eigen::MatrixXd g_sample_;
  IterationTrace trace_;
  bool converged_ = false;
  std::vector<std::string> names_;
};

/// g_j at arbitrary points (clamped to the basis domain). j is 0-based.
Eigen::VectorXd evaluate_loading(const FittedModel& fitted, int j, const Eigen::VectorXd& grid);

/// Evaluates B(x)' lambda / normalizer; throws Error("null loading") when
/// the normalizer is zero.
Eigen::VectorXd evaluate_loading(const CenteredBasis& basis, const LoadingState& state,
                                 const Eigen::VectorXd& grid);

/// f_ut + sum_j g_j(X_ji) f_jt (0-based indices).
double predict_quantile(const FittedModel& fitted, int unit, int period);

/// Versioned JSON document.
std::string to_json(const FittedModel& fitted);
FittedModel fitted_model_from_json(std::string_view text);

void save_model(const FittedModel& fitted, const std::string& path);
FittedModel load_model(const std::string& path);

}  // namespace qfactor
