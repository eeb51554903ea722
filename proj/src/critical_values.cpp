#include "qfactor/critical_values.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "qfactor/common.hpp"

namespace qfactor {

using json = nlohmann::json;

namespace {

constexpr int kTableFormatVersion = 1;
constexpr int kMaxRedraws = 100;
const double kReportedAlphas[] = {0.10, 0.05, 0.01};

double empirical_quantile(const std::vector<double>& sorted, double level) {
  const double h = level * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double interpolate(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto it = std::upper_bound(xs.begin(), xs.end(), x);
  const auto k = static_cast<std::size_t>(it - xs.begin());
  const double w = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
  return ys[k - 1] + w * (ys[k] - ys[k - 1]);
}

void check_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw Error(fmt::format("tau must lie in (0,1) (got {})", tau));
}

std::string level_key(double level) { return fmt::format("{:.4f}", level); }

}  // namespace

std::string to_string(StatisticKind k) { return k == StatisticKind::F ? "F" : "t"; }

std::vector<double> table_levels() {
  std::vector<double> levels;
  levels.push_back(0.0);
  for (int k = 1; k <= 999; ++k) levels.push_back(k / 1000.0);
  levels.push_back(0.9995);
  levels.push_back(0.9999);
  levels.push_back(1.0);
  return levels;
}

double CriticalValueTable::f_quantile(double level) const {
  if (!(level >= 0.0 && level <= 1.0)) throw Error(fmt::format("quantile level {} outside [0,1]", level));
  return interpolate(levels, f_quantiles, level);
}

void simulate_bridge(std::uint64_t seed, int n, int q, Eigen::MatrixXd& bridge, Eigen::VectorXd& w1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(n)));
  Eigen::MatrixXd w(n, q);
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(q);
  for (int k = 0; k < n; ++k) {
    for (int c = 0; c < q; ++c) acc(c) += normal(rng);
    w.row(k) = acc;
  }
  w1 = acc.transpose();
  bridge.resize(n, q);
  for (int k = 0; k < n; ++k) bridge.row(k) = w.row(k) - (static_cast<double>(k + 1) / n) * acc;
}

Eigen::MatrixXd fixed_b_functional(HacKernel kernel, double b, const Eigen::MatrixXd& bridge) {
  return kernel == HacKernel::bartlett ? bartlett_functional(bridge, b) : qs_functional(bridge, b);
}

CriticalValueTable simulate_fixed_b(HacKernel kernel, double b, int q, const FixedBOptions& options) {
  if (!(b > 0.0 && b <= 1.0)) throw Error(fmt::format("b must lie in (0,1] (got {})", b));
  if (q < 1) throw Error("number of restrictions q must be at least 1");
  if (options.n_grid < 100) throw Error("n_grid must be at least 100");
  if (options.n_reps < 1000) throw Error("n_reps must be at least 1000");

  const int n = options.n_grid;
  std::unique_ptr<ToeplitzOperator> qs_op;
  if (kernel == HacKernel::quadratic_spectral) {
    const double nb = n * b;
    Eigen::VectorXd w(n);
    for (int d = 0; d < n; ++d) w(d) = -qs_second_derivative(d / nb) / (nb * nb);
    qs_op = std::make_unique<ToeplitzOperator>(std::move(w));
  }

  std::vector<double> f_draws(static_cast<std::size_t>(options.n_reps));
  std::vector<double> t_draws(q == 1 ? f_draws.size() : 0);
  std::vector<int> redraws(f_draws.size(), 0);
  parallel_for(f_draws.size(), [&](std::size_t rep) {
    Eigen::MatrixXd bridge;
    Eigen::VectorXd w1;
    for (int attempt = 0;; ++attempt) {
      if (attempt > kMaxRedraws) throw Error("fixed-b functional is singular on every draw");
      simulate_bridge(mix_seed(mix_seed(options.seed, rep), static_cast<std::uint64_t>(attempt)), n, q, bridge, w1);
      const Eigen::MatrixXd qb = qs_op ? qs_op->quadratic_form(bridge) : bartlett_functional(bridge, b);
      Eigen::LLT<Eigen::MatrixXd> llt(qb);
      if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().minCoeff() > 1e-12)) {
        ++redraws[rep];
        continue;
      }
      f_draws[rep] = w1.dot(llt.solve(w1)) / q;
      if (q == 1) t_draws[rep] = w1(0) / std::sqrt(qb(0, 0));
      break;
    }
  });

  CriticalValueTable table;
  table.kernel = kernel;
  table.b = b;
  table.q = q;
  table.n_grid = n;
  table.n_reps = options.n_reps;
  table.seed = options.seed;
  for (int r : redraws) table.redraws += r;
  table.levels = table_levels();
  std::sort(f_draws.begin(), f_draws.end());
  for (double level : table.levels) table.f_quantiles.push_back(empirical_quantile(f_draws, level));
  if (q == 1) {
    std::sort(t_draws.begin(), t_draws.end());
    for (double level : table.levels) table.t_quantiles.push_back(empirical_quantile(t_draws, level));
  }
  table.generator = fmt::format("bridge grid {} x {} replications", n, options.n_reps);
  return table;
}

PValue lookup_pvalue(const CriticalValueTable& table, double statistic, double tau, StatisticKind kind) {
  check_tau(tau);
  if (!std::isfinite(statistic)) throw Error("statistic is not finite");
  if (kind == StatisticKind::t && table.q != 1) {
    throw Error(fmt::format("t statistic needs a q=1 table (table has q={})", table.q));
  }
  if (kind == StatisticKind::F && statistic < 0.0) throw Error("F statistic must be nonnegative");
  const double scale = tau * (1.0 - tau);
  const double base = kind == StatisticKind::F ? statistic * scale : statistic * statistic * scale;

  PValue out;
  for (double alpha : kReportedAlphas) out.critical_values[alpha] = critical_value(table, alpha, tau, kind);
  if (base >= table.max_draw()) {
    out.p_value = 1.0 / table.n_reps;
    out.upper_bound = true;
    return out;
  }
  out.p_value = base <= table.f_quantiles.front() ? 1.0 : 1.0 - interpolate(table.f_quantiles, table.levels, base);
  return out;
}

double critical_value(const CriticalValueTable& table, double alpha, double tau, StatisticKind kind) {
  check_tau(tau);
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(fmt::format("significance level must lie in (0,1) (got {})", alpha));
  const double scale = tau * (1.0 - tau);
  const double base = table.f_quantile(1.0 - alpha);
  return kind == StatisticKind::F ? base / scale : std::sqrt(base / scale);
}

std::string to_json(const CriticalValueTable& table) {
  json doc;
  doc["format"] = "qfactor.critical_values";
  doc["version"] = kTableFormatVersion;
  doc["kernel"] = to_string(table.kernel);
  doc["b"] = table.b;
  doc["q"] = table.q;
  doc["n_grid"] = table.n_grid;
  doc["n_reps"] = table.n_reps;
  doc["seed"] = table.seed;
  doc["redraws"] = table.redraws;
  doc["generator"] = table.generator;
  json quantiles = json::object();
  json t_quantiles = json::object();
  for (std::size_t k = 0; k < table.levels.size(); ++k) {
    quantiles[level_key(table.levels[k])] = table.f_quantiles[k];
    if (!table.t_quantiles.empty()) t_quantiles[level_key(table.levels[k])] = table.t_quantiles[k];
  }
  doc["quantiles"] = std::move(quantiles);
  if (!table.t_quantiles.empty()) doc["t_quantiles"] = std::move(t_quantiles);
  return doc.dump(2) + "\n";
}

CriticalValueTable critical_value_table_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(fmt::format("critical-value file is not valid JSON: {}", e.what()));
  }
  try {
    if (doc.at("format").get<std::string>() != "qfactor.critical_values") throw Error("not a critical-value document");
    if (doc.at("version").get<int>() != kTableFormatVersion) throw Error("unsupported critical-value format version");
    CriticalValueTable table;
    table.kernel = parse_kernel(doc.at("kernel").get<std::string>());
    table.b = doc.at("b").get<double>();
    table.q = doc.at("q").get<int>();
    table.n_grid = doc.at("n_grid").get<int>();
    table.n_reps = doc.at("n_reps").get<int>();
    table.seed = doc.at("seed").get<std::uint64_t>();
    table.redraws = doc.value("redraws", 0);
    table.generator = doc.value("generator", std::string{});
    for (const auto& [key, value] : doc.at("quantiles").items()) {
      table.levels.push_back(std::stod(key));
      table.f_quantiles.push_back(value.get<double>());
    }
    if (doc.contains("t_quantiles")) {
      for (const auto& [key, value] : doc.at("t_quantiles").items()) table.t_quantiles.push_back(value.get<double>());
      if (table.t_quantiles.size() != table.levels.size()) throw Error("t quantiles do not match the levels");
    }
    if (table.levels.size() < 2 || table.levels.front() != 0.0 || table.levels.back() != 1.0) {
      throw Error("quantile levels must run from 0 to 1");
    }
    if (!std::is_sorted(table.f_quantiles.begin(), table.f_quantiles.end())) {
      throw Error("quantiles are not monotone in the level");
    }
    return table;
  } catch (const json::exception& e) {
    throw Error(fmt::format("malformed critical-value file: {}", e.what()));
  }
}

std::string table_file_name(HacKernel kernel, double b, int q, const FixedBOptions& options) {
  return fmt::format("fixedb_{}_b{}_q{}_n{}_r{}_s{}.json", to_string(kernel), b, q, options.n_grid,
                     options.n_reps, options.seed);
}

CriticalValueTable load_or_simulate(const std::string& cache_dir, HacKernel kernel, double b, int q,
                                    const FixedBOptions& options) {
  namespace fs = std::filesystem;
  if (cache_dir.empty()) return simulate_fixed_b(kernel, b, q, options);
  const fs::path path = fs::path(cache_dir) / table_file_name(kernel, b, q, options);
  if (fs::exists(path)) {
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    auto table = critical_value_table_from_json(buf.str());
    if (table.kernel != kernel || table.b != b || table.q != q || table.n_grid != options.n_grid ||
        table.n_reps != options.n_reps || table.seed != options.seed) {
      throw Error(fmt::format("cached table {} does not match the requested parameters", path.string()));
    }
    return table;
  }
  auto table = simulate_fixed_b(kernel, b, q, options);
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << to_json(table);
    if (!out) throw Error(fmt::format("cannot write critical-value cache {}", tmp.string()));
  }
  fs::rename(tmp, path);
  return table;
}

}  // namespace qfactor
