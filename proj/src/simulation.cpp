#include "qfactor/simulation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <numeric>
#include <random>
#include <tuple>

#include <fmt/format.h>
#include <json.hpp>

#include "qfactor/common.hpp"
#include "qfactor/estimator.hpp"

namespace qfactor {

std::string to_string(LoadingShape s) {
  switch (s) {
    case LoadingShape::linear: return "linear";
    case LoadingShape::quadratic: return "quadratic";
    case LoadingShape::sine: return "sine";
    case LoadingShape::exponential: return "exponential";
  }
  return "linear";
}

LoadingShape parse_loading_shape(std::string_view name) {
  if (name == "linear") return LoadingShape::linear;
  if (name == "quadratic") return LoadingShape::quadratic;
  if (name == "sine") return LoadingShape::sine;
  if (name == "exponential") return LoadingShape::exponential;
  throw Error(fmt::format("unknown loading shape '{}'", name));
}

TrueLoading::TrueLoading(LoadingShape shape) : shape_(shape) {
  constexpr int n = 4000;  // even number of Simpson panels
  const double h = 1.0 / n;
  double m1 = 0.0, m2 = 0.0;
  for (int k = 0; k <= n; ++k) {
    const double w = (k == 0 || k == n) ? 1.0 : (k % 2 == 1 ? 4.0 : 2.0);
    const double v = raw(k * h);
    m1 += w * v;
    m2 += w * v * v;
  }
  m1 *= h / 3.0;
  m2 *= h / 3.0;
  mean_ = m1;
  sd_ = std::sqrt(m2 - m1 * m1);
}

double TrueLoading::raw(double x) const {
  switch (shape_) {
    case LoadingShape::linear: return x;
    case LoadingShape::quadratic: return (x - 0.3) * (x - 0.3);
    case LoadingShape::sine: return std::sin(2.0 * std::numbers::pi * x);
    case LoadingShape::exponential: return std::exp(2.0 * x);
  }
  return x;
}

LoadingShape SimDesign::loading_shape(int j) const {
  if (!loadings.empty()) return loadings[static_cast<std::size_t>(j)];
  static constexpr LoadingShape cycle[] = {LoadingShape::sine, LoadingShape::quadratic, LoadingShape::linear};
  return cycle[j % 3];
}

double SimDesign::factor_mean(int j) const {
  return factor_means.empty() ? 1.0 : factor_means[static_cast<std::size_t>(j)];
}

void SimDesign::validate() const {
  if (n_units < 2) throw Error("design needs N >= 2");
  if (n_periods < 1) throw Error("design needs T >= 1");
  if (n_characteristics < 1) throw Error("design needs J >= 1");
  if (!loadings.empty() && static_cast<int>(loadings.size()) != n_characteristics) {
    throw Error("one loading shape per characteristic required");
  }
  if (!factor_means.empty() && static_cast<int>(factor_means.size()) != n_characteristics) {
    throw Error("one factor mean per characteristic required");
  }
  for (int j = 0; j < n_characteristics; ++j) {
    if (!(std::abs(factor_mean(j)) > 0.0)) throw Error(fmt::format("factor mean {} must be nonzero", j + 1));
  }
  if (!(rho_x >= 0.0 && rho_x < 1.0)) throw Error("rho_x must lie in [0,1)");
  if (!(rho_t >= 0.0 && rho_t < 1.0)) throw Error("rho_t must lie in [0,1)");
  if (!(std::abs(factor_ar) < 1.0)) throw Error("factor AR coefficient must lie in (-1,1)");
  if (!(factor_sd >= 0.0) || !(intercept_sd >= 0.0)) throw Error("factor innovation sd must be nonnegative");
  if (!(noise_scale >= 0.0)) throw Error("noise scale must be nonnegative");
  if (innovation == Innovation::student_t && !(df > 0.0)) throw Error("degrees of freedom must be positive");
  if (!(tau > 0.0 && tau < 1.0)) throw Error("tau must lie in (0,1)");
  if (sort_by_covariate && (*sort_by_covariate < 0 || *sort_by_covariate >= n_characteristics)) {
    throw Error("sort covariate out of range");
  }
  if (burn_in < 0) throw Error("burn-in must be nonnegative");
}

Eigen::MatrixXd simulate_error_field(const SimDesign& design, int n_units, int n_periods, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::student_t_distribution<double> student(design.innovation == Innovation::student_t ? design.df : 1.0);
  std::normal_distribution<double> normal;
  auto draw = [&] {
    return design.noise_scale * (design.innovation == Innovation::student_t ? student(rng) : normal(rng));
  };

  const double rho = design.rho_x;
  int pad = 0;
  if (rho > 0.0) pad = std::min(static_cast<int>(std::ceil(std::log(1e-14) / std::log(rho))), 10000);
  const int rows = n_units + 2 * pad;

  Eigen::MatrixXd eta(rows, n_periods);
  for (int i = 0; i < rows; ++i) {
    double z = 0.0;
    for (int s = -design.burn_in; s < n_periods; ++s) {
      z = design.rho_t * z + draw();
      if (s >= 0) eta(i, s) = z;
    }
  }
  if (pad == 0) return eta;

  // e_i = sum_k rho^|k| eta_{i+k} via one forward and one backward pass.
  Eigen::MatrixXd out(n_units, n_periods);
  Eigen::VectorXd left(rows), right(rows);
  for (int t = 0; t < n_periods; ++t) {
    left(0) = eta(0, t);
    for (int i = 1; i < rows; ++i) left(i) = eta(i, t) + rho * left(i - 1);
    right(rows - 1) = eta(rows - 1, t);
    for (int i = rows - 2; i >= 0; --i) right(i) = eta(i, t) + rho * right(i + 1);
    for (int i = 0; i < n_units; ++i) out(i, t) = left(pad + i) + right(pad + i) - eta(pad + i, t);
  }
  return out;
}

double recentering_shift(const SimDesign& design) {
  if (design.noise_scale == 0.0) return 0.0;
  if (design.tau == 0.5) return 0.0;  // both innovation laws are symmetric

  using Key = std::tuple<double, double, double, int, double, double, int>;
  static std::mutex mutex;
  static std::map<Key, double> cache;
  const Key key{design.tau, design.rho_x, design.rho_t, static_cast<int>(design.innovation), design.df,
                design.noise_scale, design.burn_in};
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  // 10^4 units x 10^3 periods = 10^7 draws from the stationary field.
  Eigen::MatrixXd field = simulate_error_field(design, 10000, 1000, 0x5eedf00dULL);
  std::vector<double> draws(field.data(), field.data() + field.size());
  const auto k = static_cast<std::size_t>(std::floor(design.tau * static_cast<double>(draws.size())));
  std::nth_element(draws.begin(), draws.begin() + static_cast<std::ptrdiff_t>(k), draws.end());
  const double shift = draws[k];
  std::lock_guard lock(mutex);
  cache.emplace(key, shift);
  return shift;
}

SimulatedPanel generate_panel(const SimDesign& design, std::uint64_t seed) {
  design.validate();
  const int n = design.n_units, T = design.n_periods, J = design.n_characteristics;

  std::mt19937_64 rng_x(mix_seed(seed, 0));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::MatrixXd x(n, J);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < J; ++j) x(i, j) = unif(rng_x);
  if (design.sort_by_covariate) {
    const int c = *design.sort_by_covariate;
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return x(a, c) < x(b, c); });
    Eigen::MatrixXd sorted(n, J);
    for (int i = 0; i < n; ++i) sorted.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
    x = std::move(sorted);
  }

  std::mt19937_64 rng_f(mix_seed(seed, 1));
  std::normal_distribution<double> normal;
  GroundTruth truth;
  truth.factors.resize(T, J + 1);
  for (int c = 0; c <= J; ++c) {
    const double mean = c == 0 ? design.intercept_mean : design.factor_mean(c - 1);
    const double sd = c == 0 ? design.intercept_sd : design.factor_sd;
    double z = 0.0;
    for (int s = -design.burn_in; s < T; ++s) {
      z = design.factor_ar * z + sd * normal(rng_f);
      if (s >= 0) truth.factors(s, c) = mean + z;
    }
  }

  truth.loadings.resize(n, J);
  for (int j = 0; j < J; ++j) {
    const TrueLoading g(design.loading_shape(j));
    for (int i = 0; i < n; ++i) truth.loadings(i, j) = g(x(i, j));
  }

  truth.shift = recentering_shift(design);
  truth.errors = simulate_error_field(design, n, T, mix_seed(seed, 2)).array() - truth.shift;

  SimulatedPanel out;
  out.panel.x = x;
  out.panel.y = Eigen::MatrixXd(n, T);
  for (int t = 0; t < T; ++t) {
    out.panel.y.col(t) = truth.loadings * truth.factors.row(t).tail(J).transpose();
    out.panel.y.col(t).array() += truth.factors(t, 0);
  }
  out.panel.y += truth.errors;

  // The estimator normalizes with sample moments; express the same surface
  // in that normalization.
  truth.aligned_factors = truth.factors;
  truth.aligned_loadings.resize(n, J);
  for (int j = 0; j < J; ++j) {
    const double m = truth.loadings.col(j).mean();
    const Eigen::VectorXd c = truth.loadings.col(j).array() - m;
    const double s = std::sqrt(c.squaredNorm() / n);
    if (!(s > 0.0)) throw Error(fmt::format("loading {} is constant on the sample", j + 1));
    truth.aligned_loadings.col(j) = c / s;
    truth.aligned_factors.col(0) += m * truth.factors.col(j + 1);
    truth.aligned_factors.col(j + 1) = s * truth.factors.col(j + 1);
    if (truth.aligned_factors.col(j + 1).mean() < 0.0) {
      truth.aligned_factors.col(j + 1) *= -1.0;
      truth.aligned_loadings.col(j) *= -1.0;
    }
  }
  out.panel = validate_panel(std::move(out.panel));
  out.truth = std::move(truth);
  return out;
}

std::string to_string(McKind k) {
  switch (k) {
    case McKind::rmse: return "rmse";
    case McKind::coverage: return "coverage";
    case McKind::size: return "size";
  }
  return "rmse";
}

McKind parse_mc_kind(std::string_view name) {
  if (name == "rmse") return McKind::rmse;
  if (name == "coverage") return McKind::coverage;
  if (name == "size") return McKind::size;
  throw Error(fmt::format("unknown Monte Carlo kind '{}' (expected rmse, coverage or size)", name));
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const auto m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

ModelConfig model_for(const SimDesign& design, const McConfig& config) {
  ModelConfig cfg = config.model;
  cfg.tau = design.tau;
  if (config.knots_rule) {
    const double nt = static_cast<double>(design.n_units) * design.n_periods;
    const int knots = static_cast<int>(std::floor(std::pow(nt, 0.2)));
    for (auto& s : cfg.splines) s.interior_knots = knots;
  }
  return cfg;
}

McReplication run_replication(const SimDesign& design, const McConfig& config, McKind kind, int rep,
                              std::uint64_t seed, const CriticalValueTable* table, double critical) {
  McReplication row;
  row.rep = rep;
  row.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto sim = generate_panel(design, seed);
    const auto fitted = fit(sim.panel, model_for(design, config));
    row.iterations = fitted.iterations_used();
    row.converged = fitted.converged();
    const Eigen::MatrixXd diff = fitted.factors() - sim.truth.aligned_factors;
    row.factor_max_error = diff.rowwise().norm().maxCoeff();
    row.factor_rmse = std::sqrt(diff.squaredNorm() / static_cast<double>(diff.size()));
    for (int j = 0; j < design.n_characteristics; ++j) {
      const Eigen::VectorXd e = fitted.loadings_at_sample().col(j) - sim.truth.aligned_loadings.col(j);
      row.loading_errors.push_back(std::sqrt(e.squaredNorm() / static_cast<double>(e.size())));
    }
    if (kind != McKind::rmse) {
      const auto& inf = config.inference;
      const int k = config.test_factor, t = config.test_period;
      const auto ordering = order_units(fitted.covariates(), inf.ordering);
      const auto omega = estimate_omega(fitted, ordering, inf.b, inf.kernel);
      const auto lambda = estimate_lambda(fitted, t, default_bandwidth(fitted.n_units(), inf.kappa));
      row.truth_value = sim.truth.aligned_factors(t, k);
      const auto test =
          t_statistic(fitted, Eigen::RowVectorXd::Unit(design.n_characteristics + 1, k), row.truth_value, t, lambda,
                      omega, table);
      row.statistic = test.statistic;
      row.reject = std::abs(test.statistic) > critical;
    }
    row.ok = true;
  } catch (const Error& e) {
    row.error = e.what();
  }
  row.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return row;
}

}  // namespace

McReport run_monte_carlo(const SimDesign& design, const McConfig& config, int reps, McKind kind,
                         std::uint64_t seed, const CriticalValueTable* table) {
  design.validate();
  if (reps < 1) throw Error("need at least one replication");
  model_for(design, config).validate(design.n_characteristics);
  McReport report;
  report.design = design;
  report.kind = kind;
  report.reps = reps;

  CriticalValueTable own;
  if (kind != McKind::rmse) {
    if (config.test_factor < 0 || config.test_factor > design.n_characteristics) {
      throw Error("tested factor column out of range");
    }
    if (config.test_period < 0 || config.test_period >= design.n_periods) throw Error("tested period out of range");
    if (!table) {
      own = simulate_fixed_b(config.inference.kernel, config.inference.b, 1, config.table_options);
      table = &own;
    }
    report.critical_value = critical_value(*table, config.inference.level, design.tau, StatisticKind::t);
  }

  report.rows.resize(static_cast<std::size_t>(reps));
  parallel_for(report.rows.size(), [&](std::size_t r) {
    report.rows[r] = run_replication(design, config, kind, static_cast<int>(r), mix_seed(seed, r), table,
                                     report.critical_value);
  });
  for (const auto& row : report.rows) report.failures += !row.ok;
  return report;
}

double McReport::median_factor_rmse() const {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.ok) v.push_back(r.factor_rmse);
  return median(std::move(v));
}

double McReport::median_factor_max_error() const {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.ok) v.push_back(r.factor_max_error);
  return median(std::move(v));
}

double McReport::median_loading_error(int j) const {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.ok) v.push_back(r.loading_errors.at(static_cast<std::size_t>(j)));
  return median(std::move(v));
}

double McReport::rejection_rate() const {
  int ok = 0, rejected = 0;
  for (const auto& r : rows) {
    ok += r.ok;
    rejected += r.ok && r.reject;
  }
  return ok == 0 ? std::nan("") : static_cast<double>(rejected) / ok;
}

std::string McReport::to_csv() const {
  std::string out = "rep,seed,ok,iterations,converged,factor_max_error,factor_rmse";
  for (int j = 0; j < design.n_characteristics; ++j) out += fmt::format(",loading_error_{}", j + 1);
  out += ",statistic,truth_value,reject,error\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{}", r.rep, r.seed, r.ok ? 1 : 0, r.iterations, r.converged ? 1 : 0,
                       r.factor_max_error, r.factor_rmse);
    for (int j = 0; j < design.n_characteristics; ++j) {
      out += fmt::format(",{}", r.ok ? r.loading_errors[static_cast<std::size_t>(j)] : std::nan(""));
    }
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out += fmt::format(",{},{},{},{}\n", r.statistic, r.truth_value, r.reject ? 1 : 0, err);
  }
  return out;
}

std::string McReport::summary_json() const {
  nlohmann::json doc;
  doc["kind"] = to_string(kind);
  doc["reps"] = reps;
  doc["failures"] = failures;
  auto& d = doc["design"];
  d["N"] = design.n_units;
  d["T"] = design.n_periods;
  d["J"] = design.n_characteristics;
  d["tau"] = design.tau;
  d["rho_x"] = design.rho_x;
  d["rho_t"] = design.rho_t;
  d["innovation"] = design.innovation == Innovation::student_t ? "student_t" : "normal";
  d["df"] = design.df;
  d["noise_scale"] = design.noise_scale;
  std::vector<std::string> shapes;
  for (int j = 0; j < design.n_characteristics; ++j) shapes.push_back(to_string(design.loading_shape(j)));
  d["loadings"] = shapes;
  const bool any_ok = failures < reps;
  doc["median_factor_rmse"] = any_ok ? median_factor_rmse() : 0.0;
  doc["median_factor_max_error"] = any_ok ? median_factor_max_error() : 0.0;
  std::vector<double> le;
  for (int j = 0; j < design.n_characteristics; ++j) le.push_back(any_ok ? median_loading_error(j) : 0.0);
  doc["median_loading_error"] = le;
  if (kind != McKind::rmse) {
    doc["critical_value"] = critical_value;
    doc["rejection_rate"] = any_ok ? rejection_rate() : 0.0;
    doc["coverage_rate"] = any_ok ? coverage_rate() : 0.0;
  }
  return doc.dump(2) + "\n";
}

namespace {

double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
  }
  return sxy / sxx;
}

double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

RateStudy convergence_rate_study(const std::vector<SimDesign>& designs, const McConfig& config, int reps,
                                 std::uint64_t seed, int bootstrap_reps) {
  std::vector<int> ns;
  for (const auto& d : designs) ns.push_back(d.n_units);
  std::sort(ns.begin(), ns.end());
  if (std::unique(ns.begin(), ns.end()) - ns.begin() < 2) throw Error("need >= 2 distinct N");

  RateStudy study;
  std::vector<std::vector<double>> factor_err, loading_err;
  for (std::size_t d = 0; d < designs.size(); ++d) {
    const auto report = run_monte_carlo(designs[d], config, reps, McKind::rmse, mix_seed(seed, d));
    RatePoint p;
    p.n_units = designs[d].n_units;
    p.n_periods = designs[d].n_periods;
    p.reps = reps;
    p.failures = report.failures;
    if (report.failures == reps) throw Error(fmt::format("every replication failed for N={}", p.n_units));
    std::vector<double> fe, le;
    for (const auto& r : report.rows) {
      if (!r.ok) continue;
      fe.push_back(r.factor_rmse);
      le.push_back(std::accumulate(r.loading_errors.begin(), r.loading_errors.end(), 0.0) /
                   static_cast<double>(r.loading_errors.size()));
    }
    p.median_factor_rmse = median(fe);
    p.median_loading_error = median(le);
    study.points.push_back(p);
    factor_err.push_back(std::move(fe));
    loading_err.push_back(std::move(le));
  }

  std::vector<double> logn, logf, logl;
  for (const auto& p : study.points) {
    logn.push_back(std::log(static_cast<double>(p.n_units)));
    logf.push_back(std::log(p.median_factor_rmse));
    logl.push_back(std::log(p.median_loading_error));
  }
  study.noiseless_floor = std::all_of(study.points.begin(), study.points.end(), [](const RatePoint& p) {
    return p.median_factor_rmse < 1e-8;
  });
  if (study.noiseless_floor) return study;
  study.factor_slope = ols_slope(logn, logf);
  study.loading_slope = ols_slope(logn, logl);

  std::mt19937_64 rng(mix_seed(seed, 0xB007));
  std::vector<double> fs, ls;
  for (int b = 0; b < bootstrap_reps; ++b) {
    std::vector<double> bf, bl;
    for (std::size_t d = 0; d < study.points.size(); ++d) {
      std::uniform_int_distribution<std::size_t> pick(0, factor_err[d].size() - 1);
      std::vector<double> sf, sl;
      for (std::size_t k = 0; k < factor_err[d].size(); ++k) {
        const auto idx = pick(rng);
        sf.push_back(factor_err[d][idx]);
        sl.push_back(loading_err[d][idx]);
      }
      bf.push_back(std::log(median(sf)));
      bl.push_back(std::log(median(sl)));
    }
    fs.push_back(ols_slope(logn, bf));
    ls.push_back(ols_slope(logn, bl));
  }
  if (!fs.empty()) {
    study.factor_slope_lo = percentile(fs, 0.025);
    study.factor_slope_hi = percentile(fs, 0.975);
    study.loading_slope_lo = percentile(ls, 0.025);
    study.loading_slope_hi = percentile(ls, 0.975);
  }
  return study;
}

std::string RateStudy::to_csv() const {
  std::string out = "N,T,reps,failures,median_factor_rmse,median_loading_error\n";
  for (const auto& p : points) {
    out += fmt::format("{},{},{},{},{},{}\n", p.n_units, p.n_periods, p.reps, p.failures, p.median_factor_rmse,
                       p.median_loading_error);
  }
  out += fmt::format("# factor_slope={} [{}, {}] loading_slope={} [{}, {}]{}\n", factor_slope, factor_slope_lo,
                     factor_slope_hi, loading_slope, loading_slope_lo, loading_slope_hi,
                     noiseless_floor ? " noiseless_floor" : "");
  return out;
}

}  // namespace qfactor
