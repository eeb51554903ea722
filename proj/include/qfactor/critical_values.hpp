#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "qfactor/hac.hpp"

namespace qfactor {

enum class StatisticKind { F, t };

std::string to_string(StatisticKind k);

/// Simulated quantiles of the tau-free fixed-b limit
///   W_q(1)' Q_b^-1 W_q(1) / q,
/// Q_b the kernel functional of a q-vector Brownian bridge. For q = 1 the
/// signed root W_1(1) / sqrt(Q_b) is tabulated as well.
struct CriticalValueTable {
  HacKernel kernel = HacKernel::bartlett;
  double b = 0.0;
  int q = 1;
  int n_grid = 1000;
  int n_reps = 50000;
  std::uint64_t seed = 0;
  int redraws = 0;  // singular Q_b draws replaced
  std::vector<double> levels;
  std::vector<double> f_quantiles;
  std::vector<double> t_quantiles;  // q = 1 only
  std::string generator;            // free-form provenance note

  /// Base F quantile at `level` (linear interpolation between stored levels).
  double f_quantile(double level) const;
  double max_draw() const { return f_quantiles.back(); }
};

/// 0, 0.001, ..., 0.999, 0.9995, 0.9999, 1 (1 = largest draw).
std::vector<double> table_levels();

struct FixedBOptions {
  int n_grid = 1000;
  int n_reps = 50000;
  std::uint64_t seed = 20240501;
};

CriticalValueTable simulate_fixed_b(HacKernel kernel, double b, int q, const FixedBOptions& options = {});

/// Kernel functional Q_b for one bridge path (rows B(k/n), k = 1..n).
Eigen::MatrixXd fixed_b_functional(HacKernel kernel, double b, const Eigen::MatrixXd& bridge);

/// Standard Brownian motion increments summed on an n-point grid and turned
/// into a bridge; returns the bridge (n x q) and W(1) (q).
void simulate_bridge(std::uint64_t seed, int n, int q, Eigen::MatrixXd& bridge, Eigen::VectorXd& w1);

struct PValue {
  double p_value = 1.0;
  /// True when the statistic exceeds every simulated draw; p_value is then
  /// the upper bound 1/n_reps.
  bool upper_bound = false;
  /// Significance level -> critical value on the statistic's own scale.
  std::map<double, double> critical_values;
};

/// Rescales the base quantiles by 1/(tau(1-tau)) (F) or 1/sqrt(tau(1-tau))
/// (t, two-sided) and returns the empirical tail probability.
PValue lookup_pvalue(const CriticalValueTable& table, double statistic, double tau, StatisticKind kind);

/// Critical value for a test at significance level alpha.
double critical_value(const CriticalValueTable& table, double alpha, double tau, StatisticKind kind);

std::string to_json(const CriticalValueTable& table);
CriticalValueTable critical_value_table_from_json(std::string_view text);

/// Reads the cached table for (kernel, b, q, options) from `cache_dir`, or
/// simulates and stores it. An empty directory disables caching.
CriticalValueTable load_or_simulate(const std::string& cache_dir, HacKernel kernel, double b, int q,
                                    const FixedBOptions& options = {});

std::string table_file_name(HacKernel kernel, double b, int q, const FixedBOptions& options);

}  // namespace qfactor
