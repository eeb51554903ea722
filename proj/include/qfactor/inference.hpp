#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "qfactor/critical_values.hpp"
#include "qfactor/estimator.hpp"
#include "qfactor/hac.hpp"
#include "qfactor/model.hpp"

namespace qfactor {

/// Cross-sectional ordering used by the HAC estimator.
struct OrderingStrategy {
  enum class Kind { as_given, by_covariate, by_pc1 };
  Kind kind = Kind::as_given;
  int covariate = 0;  // 0-based, by_covariate only

  static OrderingStrategy as_given() { return {}; }
  static OrderingStrategy by_covariate(int j) { return {Kind::by_covariate, j}; }
  static OrderingStrategy by_pc1() { return {Kind::by_pc1, 0}; }
};

/// "given", "covariate:<j>" (1-based j) or "pc1".
OrderingStrategy parse_ordering(std::string_view text);
std::string to_string(const OrderingStrategy& s);

/// Permutation p with p[k] = index of the unit placed at position k.
std::vector<int> order_units(const Eigen::MatrixXd& x, const OrderingStrategy& strategy);
inline std::vector<int> order_units(const Panel& panel, const OrderingStrategy& strategy) {
  return order_units(panel.x, strategy);
}

/// Leading principal direction of the standardized covariates, sign fixed
/// so that its largest-magnitude entry is positive.
Eigen::VectorXd pc1_direction(const Eigen::MatrixXd& x);

double default_bandwidth(int n_units, double kappa);

struct LambdaEstimate {
  int t = 0;
  double h = 0.0;
  Eigen::MatrixXd matrix;  // (J+1) x (J+1)
  int included = 0;        // observations with |resid| <= h
  bool singular_warning = false;
};

/// Powell estimator with the uniform kernel:
///   (N h)^-1 sum_i K(e_it / h) G_i G_i',  K(u) = 1{|u| <= 1} / 2.
/// Residuals come from the fitted model.
LambdaEstimate estimate_lambda(const FittedModel& fitted, int t, double h);

/// Same estimator from raw pieces (design N x (J+1), residual column).
Eigen::MatrixXd powell_lambda(const Eigen::MatrixXd& design, const Eigen::VectorXd& residuals, double h);

struct OmegaEstimate {
  double b = 0.0;
  HacKernel kernel = HacKernel::bartlett;
  std::vector<Eigen::MatrixXd> per_period;
  Eigen::MatrixXd averaged;
  std::vector<int> ordering;
};

/// Fixed-b HAC estimator with bandwidth M = b N, units taken in `ordering`.
OmegaEstimate estimate_omega(const FittedModel& fitted, const std::vector<int>& ordering, double b,
                             HacKernel kernel);

/// One period of the estimator from raw pieces. `design` rows and
/// `residuals` must already be in the chosen order.
Eigen::MatrixXd hac_period(const Eigen::MatrixXd& design, const Eigen::VectorXd& residuals, double tau,
                           double b, HacKernel kernel);

struct FixedBTest {
  StatisticKind kind = StatisticKind::F;
  Eigen::MatrixXd R;
  Eigen::VectorXd r;
  int t = 0;
  double statistic = 0.0;
  double b = 0.0;
  HacKernel kernel = HacKernel::bartlett;
  double tau = 0.5;
  std::map<double, double> critical_values;  // significance level -> value
  double p_value = 1.0;
  bool p_value_upper_bound = false;
  bool has_p_value = false;
};

/// N (R f - r)' {R tau(1-tau) L^-1 W L^-1 R'}^-1 (R f - r) / q.
double f_statistic_value(int n_units, double tau, const Eigen::MatrixXd& R, const Eigen::VectorXd& r,
                         const Eigen::VectorXd& f, const Eigen::MatrixXd& lambda, const Eigen::MatrixXd& omega);

/// N^1/2 (R f - r) / sqrt(R tau(1-tau) L^-1 W L^-1 R').
double t_statistic_value(int n_units, double tau, const Eigen::RowVectorXd& R, double r, const Eigen::VectorXd& f,
                         const Eigen::MatrixXd& lambda, const Eigen::MatrixXd& omega);

/// Tests H0: R f_t = r. When `table` is given the p-value and critical
/// values are attached (the table must match kernel, b and q).
FixedBTest f_statistic(const FittedModel& fitted, const Eigen::MatrixXd& R, const Eigen::VectorXd& r, int t,
                       const LambdaEstimate& lambda, const OmegaEstimate& omega,
                       const CriticalValueTable* table = nullptr);
FixedBTest t_statistic(const FittedModel& fitted, const Eigen::RowVectorXd& R, double r, int t,
                       const LambdaEstimate& lambda, const OmegaEstimate& omega,
                       const CriticalValueTable* table = nullptr);

struct InferenceConfig {
  double kappa = 1.0;
  double b = 0.2;
  HacKernel kernel = HacKernel::bartlett;
  OrderingStrategy ordering{};
  double level = 0.05;             // significance level alpha
  double annualization = 251.0;    // periods per year
};

struct FactorSignificance {
  std::string factor;
  double annualized_vol = 0.0;
  double pct_significant = 0.0;
  double median_p = 1.0;
};

/// Per-period t tests of H0: f_jt = 0 for every factor column (intercept
/// included), summarized per factor.
std::vector<FactorSignificance> significance_summary(const FittedModel& fitted, const InferenceConfig& config,
                                                     const CriticalValueTable& table);

/// Same summary from per-period statistics and p-values (T x (J+1)).
std::vector<FactorSignificance> summarize_tests(const std::vector<std::string>& names, const Eigen::MatrixXd& factors,
                                                const Eigen::MatrixXd& statistics, const Eigen::MatrixXd& p_values,
                                                double critical, double annualization);

/// N^-1 sum_i (T^-1 sum_t h_jt(X_ji))^2 from the initial additive fits.
/// A raw magnitude, not a calibrated test.
double presence_diagnostic(const InitialFit& initial, int j);

}  // namespace qfactor
