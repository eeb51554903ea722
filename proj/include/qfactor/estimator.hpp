#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qfactor/model.hpp"

namespace qfactor {

/// Centered bases for every characteristic: knots on the empirical range,
/// centers from the panel sample.
std::vector<CenteredBasis> build_bases(const Panel& panel, const ModelConfig& config);

/// Additive quantile regression for one period:
///   min sum_i rho_tau(y_it - h_ut - sum_j B_j(X_ji)' theta_jt).
struct PeriodAdditiveFit {
  double h_u = 0.0;
  Eigen::VectorXd theta;  // concatenated theta_jt blocks (sum_j K_j)
  double objective = 0.0;
  QregStatus status = QregStatus::converged;
};

PeriodAdditiveFit fit_period_additive(const Panel& panel, const ModelConfig& config,
                                      const std::vector<CenteredBasis>& bases, int t);

struct InitialLoadings {
  std::vector<LoadingState> g0;
  /// N x J matrix of T^-1 sum_t h_jt(X_ji).
  Eigen::MatrixXd mean_components;
};

/// Averages the per-period spline coefficients and normalizes each average
/// by its empirical second moment. `theta` is T x sum_j K_j. Throws
/// Error("unidentified loading j") when a normalizer falls below 1e-12.
InitialLoadings initial_loadings(const Eigen::MatrixXd& theta, const Panel& panel,
                                 const std::vector<CenteredBasis>& bases);

/// Per-period regression of y_.t on (1, g_1(X_1i), ..., g_J(X_Ji)).
/// Used both for the initial factors and for the factor update.
Eigen::MatrixXd update_factors(const Panel& panel, const ModelConfig& config,
                               const std::vector<CenteredBasis>& bases,
                               const std::vector<LoadingState>& loadings);

inline Eigen::MatrixXd initial_factors(const Panel& panel, const ModelConfig& config,
                                       const std::vector<CenteredBasis>& bases,
                                       const std::vector<LoadingState>& g0) {
  return update_factors(panel, config, bases, g0);
}

struct InitialFit {
  Eigen::VectorXd h_u;   // length T
  Eigen::MatrixXd theta; // T x sum_j K_j
  std::vector<LoadingState> g0;
  Eigen::MatrixXd f0;    // T x (J+1)
  Eigen::MatrixXd mean_components;
};

InitialFit initial_fit(const Panel& panel, const ModelConfig& config,
                       const std::vector<CenteredBasis>& bases);

struct LoadingUpdate {
  /// Raw step-2 coefficients with their empirical normalizers.
  std::vector<LoadingState> loadings;
  double objective = 0.0;  // pooled check loss sum at the raw coefficients
  QregStatus status = QregStatus::converged;
};

/// Pooled regression over all (i, t) of y_it - f_ut on rows
/// [B_1(X_1i)' f_1t | ... | B_J(X_Ji)' f_Jt].
LoadingUpdate update_loadings(const Panel& panel, const ModelConfig& config,
                              const std::vector<CenteredBasis>& bases,
                              const Eigen::MatrixXd& factors);

/// Flips (g_j, f_j) so that every factor has a nonnegative time mean.
void canonicalize_signs(std::vector<LoadingState>& loadings, Eigen::MatrixXd& factors);

/// Full estimator: initial fit, then alternate loading and factor updates
/// until both changes drop below epsilon or max_iter passes run.
FittedModel fit(const Panel& panel, const ModelConfig& config);

double bic_value(double mean_check_loss, int n_units, int n_periods, int n_characteristics,
                 int interior_knots, int order);

struct BicPoint {
  int interior_knots = 0;
  double bic = 0.0;
  double mean_check_loss = 0.0;
  double penalty = 0.0;
  int iterations = 0;
  bool converged = false;
  bool ok = false;
  std::string error;
};

struct BicSelection {
  int chosen = 0;
  std::vector<BicPoint> curve;
};

/// L_N with the smallest BIC among successful points; ties go to the
/// smallest L_N. Throws Error when no point succeeded.
int bic_argmin(const std::vector<BicPoint>& curve);

/// Fits the model for every L_N in `grid` (all characteristics share L_N)
/// and returns the BIC argmin; ties go to the smallest L_N.
BicSelection select_knots_bic(const Panel& panel, const ModelConfig& config, const std::vector<int>& grid);

}  // namespace qfactor
