#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <fmt/format.h>

#include "qfactor/cli.hpp"
#include "qfactor/common.hpp"
#include "qfactor/critical_values.hpp"
#include "qfactor/estimator.hpp"
#include "qfactor/inference.hpp"

namespace qfactor::cli {

namespace fs = std::filesystem;

namespace {

std::string write_output(const RunConfig& config, const std::string& name, const std::string& content) {
  fs::create_directories(config.out);
  const auto path = (fs::path(config.out) / name).string();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(fmt::format("cannot write '{}'", path));
  os << content;
  os.close();
  if (!os) throw Error(fmt::format("write failed for '{}'", path));
  return path;
}

ModelConfig model_config(const RunConfig& c, int knots) {
  ModelConfig m;
  m.tau = c.tau;
  m.splines = {SplineParams{c.order, knots}};
  m.epsilon = c.epsilon;
  m.max_iter = c.max_iter;
  return m;
}

FixedBOptions table_options(const RunConfig& c) {
  FixedBOptions o;
  o.n_grid = c.cv_grid;
  o.n_reps = c.cv_reps;
  o.seed = c.seed;
  return o;
}

std::string bic_csv(const BicSelection& sel) {
  std::string out = "interior_knots,bic,mean_check_loss,penalty,iterations,converged,ok,selected,error\n";
  for (const auto& p : sel.curve) {
    out += fmt::format("{},{},{},{},{},{},{},{},{}\n", p.interior_knots, p.bic, p.mean_check_loss, p.penalty,
                       p.iterations, p.converged ? 1 : 0, p.ok ? 1 : 0, p.interior_knots == sel.chosen ? 1 : 0,
                       p.error);
  }
  return out;
}

std::string number_label(double v) {
  std::string s = fmt::format("{}", v);
  for (auto& ch : s)
    if (ch == '.') ch = 'p';
  return s;
}

void apply_threads(const RunConfig& c) {
  if (c.threads > 0) set_max_threads(static_cast<std::size_t>(c.threads));
}

}  // namespace

void validate(const RunConfig& c) {
  static const std::vector<std::string> commands{"fit", "test", "simulate", "critvals", "knots"};
  if (std::find(commands.begin(), commands.end(), c.subcommand) == commands.end()) {
    throw Error(fmt::format("unknown subcommand '{}'", c.subcommand));
  }
  if (c.out.empty()) throw Error("--out must not be empty");
  if ((c.subcommand == "fit" || c.subcommand == "knots") && c.input.empty()) throw Error("--input is required");
  if (c.subcommand == "knots" && c.knots_grid.empty()) throw Error("--knots-grid is required");
  if (c.subcommand == "test" && c.model.empty()) throw Error("--model is required");
  if (!(c.tau > 0.0 && c.tau < 1.0)) throw Error("--tau must lie in (0,1)");
  if (c.knots < 0) throw Error("--knots must be nonnegative");
  for (int k : c.knots_grid)
    if (k < 0) throw Error("--knots-grid entries must be nonnegative");
  if (c.order < 1) throw Error("--order must be at least 1");
  if (!(c.epsilon > 0.0)) throw Error("--eps must be positive");
  if (c.max_iter < 1) throw Error("--max-iter must be at least 1");
  if (c.grid_points < 2) throw Error("--grid-points must be at least 2");
  if (c.kappas.empty() || c.bs.empty()) throw Error("--kappa and --b need at least one value");
  for (double k : c.kappas)
    if (!(k > 0.0)) throw Error("--kappa must be positive");
  for (double b : c.bs)
    if (!(b > 0.0 && b <= 1.0)) throw Error("--b must lie in (0,1]");
  if (!(c.level > 0.0 && c.level < 1.0)) throw Error("--level must lie in (0,1)");
  if (!(c.annualization > 0.0)) throw Error("--annualization must be positive");
  if (c.q < 1) throw Error("--q must be at least 1");
  if (c.cv_grid < 100) throw Error("--cv-grid must be at least 100");
  if (c.cv_reps < 1000) throw Error("--cv-reps must be at least 1000");
  if (c.threads < 0) throw Error("--threads must be nonnegative");
  parse_ordering(c.ordering);
  if (c.subcommand == "simulate") {
    if (c.reps < 1) throw Error("--reps must be at least 1");
    if (c.test_factor < 0 || c.test_factor > c.design.n_characteristics) throw Error("--test-factor out of range");
    if (c.test_period < 1 || c.test_period > c.design.n_periods) throw Error("--test-period out of range");
    if (c.mc_kind == "rate") {
      if (c.rate_n.size() < 2) throw Error("--rate-n needs at least two sizes");
      if (!(c.rate_alpha > 0.0)) throw Error("--rate-alpha must be positive");
    } else {
      parse_mc_kind(c.mc_kind);
    }
    c.design.validate();
  }
}

std::vector<std::string> cmd_fit(const RunConfig& c) {
  validate(c);
  apply_threads(c);
  const Panel panel = ingest_csv(c.input);
  std::vector<std::string> written;

  int knots = c.knots;
  if (!c.knots_grid.empty()) {
    const auto sel = select_knots_bic(panel, model_config(c, c.knots), c.knots_grid);
    written.push_back(write_output(c, "bic.csv", bic_csv(sel)));
    knots = sel.chosen;
  }
  const auto fitted = fit(panel, model_config(c, knots));
  if (!fitted.converged()) {
    std::cerr << fmt::format("warning: no convergence within {} iterations\n", c.max_iter);
  }
  written.push_back(write_output(c, "model.json", to_json(fitted)));

  const int J = fitted.n_characteristics();
  std::string factors = "period,f_u";
  for (const auto& name : fitted.characteristic_names()) factors += ",f_" + name;
  factors += "\n";
  for (int t = 0; t < fitted.n_periods(); ++t) {
    factors += panel.period_ids[static_cast<std::size_t>(t)];
    for (int k = 0; k <= J; ++k) factors += fmt::format(",{}", fitted.factors()(t, k));
    factors += "\n";
  }
  written.push_back(write_output(c, "factors.csv", factors));

  for (int j = 0; j < J; ++j) {
    const auto& spec = fitted.bases()[static_cast<std::size_t>(j)].spec();
    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(c.grid_points, spec.lower, spec.upper);
    const Eigen::VectorXd g = evaluate_loading(fitted, j, grid);
    std::string curve = fmt::format("x,g_{}\n", fitted.characteristic_names()[static_cast<std::size_t>(j)]);
    for (int k = 0; k < c.grid_points; ++k) curve += fmt::format("{},{}\n", grid(k), g(k));
    written.push_back(write_output(c, fmt::format("loading_{}.csv", j + 1), curve));
  }

  std::string trace = "iteration,factor_change,lambda_change,objective,normalization_error,min_factor_mean\n";
  for (const auto& r : fitted.trace()) {
    trace += fmt::format("{},{},{},{},{},{}\n", r.iteration, r.factor_change, r.lambda_change, r.objective,
                         r.normalization_error, r.min_factor_mean);
  }
  written.push_back(write_output(c, "trace.csv", trace));
  return written;
}

std::vector<std::string> cmd_knots(const RunConfig& c) {
  validate(c);
  apply_threads(c);
  const Panel panel = ingest_csv(c.input);
  const auto sel = select_knots_bic(panel, model_config(c, c.knots), c.knots_grid);
  std::cout << fmt::format("selected interior knots: {}\n", sel.chosen);
  return {write_output(c, "bic.csv", bic_csv(sel))};
}

std::vector<std::string> cmd_test(const RunConfig& c) {
  validate(c);
  apply_threads(c);
  const auto fitted = load_model(c.model);
  if (!c.input.empty()) fitted.check_residuals(ingest_csv(c.input));
  const char* cache = std::getenv("QFACTOR_CACHE_DIR");
  const bool sweep = c.kappas.size() > 1 || c.bs.size() > 1;

  std::vector<std::string> written;
  std::string provenance = "kappa,b,kernel,ordering,level,table_seed,table_grid,table_reps,table_redraws,table_source\n";
  for (double b : c.bs) {
    const auto options = table_options(c);
    const bool cached = cache && *cache;
    const auto table = cached ? load_or_simulate(cache, c.kernel, b, 1, options)
                              : simulate_fixed_b(c.kernel, b, 1, options);
    for (double kappa : c.kappas) {
      InferenceConfig inf;
      inf.kappa = kappa;
      inf.b = b;
      inf.kernel = c.kernel;
      inf.ordering = parse_ordering(c.ordering);
      inf.level = c.level;
      inf.annualization = c.annualization;
      const auto rows = significance_summary(fitted, inf, table);
      std::string csv = "factor,annualized_vol,pct_significant,median_p\n";
      for (const auto& r : rows) {
        csv += fmt::format("{},{},{},{}\n", r.factor, r.annualized_vol, r.pct_significant, r.median_p);
      }
      const auto name = sweep ? fmt::format("significance_kappa{}_b{}.csv", number_label(kappa), number_label(b))
                              : std::string("significance.csv");
      written.push_back(write_output(c, name, csv));
      provenance += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", kappa, b, to_string(c.kernel), c.ordering,
                                c.level, table.seed, table.n_grid, table.n_reps, table.redraws,
                                cached ? table_file_name(c.kernel, b, 1, options) : "simulated");
    }
  }
  written.push_back(write_output(c, "test_runs.csv", provenance));
  return written;
}

std::vector<std::string> cmd_critvals(const RunConfig& c) {
  validate(c);
  apply_threads(c);
  std::vector<std::string> written;
  for (double b : c.bs) {
    const auto options = table_options(c);
    const auto table = simulate_fixed_b(c.kernel, b, c.q, options);
    written.push_back(write_output(c, table_file_name(c.kernel, b, c.q, options), to_json(table)));
  }
  return written;
}

std::vector<std::string> cmd_simulate(const RunConfig& c) {
  validate(c);
  apply_threads(c);
  McConfig mc;
  mc.model = model_config(c, c.knots);
  mc.knots_rule = c.knots_rule;
  mc.inference.kappa = c.kappas.front();
  mc.inference.b = c.bs.front();
  mc.inference.kernel = c.kernel;
  mc.inference.ordering = parse_ordering(c.ordering);
  mc.inference.level = c.level;
  mc.table_options = table_options(c);
  mc.test_factor = c.test_factor;
  mc.test_period = c.test_period - 1;

  if (c.emit_panel) {
    const auto sim = generate_panel(c.design, c.seed);
    std::string truth = "period,f_u";
    for (int j = 0; j < c.design.n_characteristics; ++j) truth += fmt::format(",f_x{}", j + 1);
    truth += "\n";
    for (int t = 0; t < c.design.n_periods; ++t) {
      truth += sim.panel.period_ids[static_cast<std::size_t>(t)];
      for (Eigen::Index k = 0; k < sim.truth.aligned_factors.cols(); ++k) {
        truth += fmt::format(",{}", sim.truth.aligned_factors(t, k));
      }
      truth += "\n";
    }
    return {write_output(c, "panel.csv", panel_to_csv(sim.panel)), write_output(c, "truth_factors.csv", truth)};
  }

  if (c.mc_kind == "rate") {
    std::vector<SimDesign> designs;
    for (int n : c.rate_n) {
      SimDesign d = c.design;
      d.n_units = n;
      d.n_periods = static_cast<int>(std::ceil(std::pow(static_cast<double>(n), c.rate_alpha)));
      designs.push_back(d);
    }
    const auto study = convergence_rate_study(designs, mc, c.reps, c.seed);
    return {write_output(c, "rate_study.csv", study.to_csv())};
  }
  const auto report = run_monte_carlo(c.design, mc, c.reps, parse_mc_kind(c.mc_kind), c.seed);
  return {write_output(c, "mc_replications.csv", report.to_csv()),
          write_output(c, "mc_summary.json", report.summary_json())};
}

std::vector<std::string> run(const RunConfig& c) {
  if (c.subcommand == "fit") return cmd_fit(c);
  if (c.subcommand == "knots") return cmd_knots(c);
  if (c.subcommand == "test") return cmd_test(c);
  if (c.subcommand == "simulate") return cmd_simulate(c);
  if (c.subcommand == "critvals") return cmd_critvals(c);
  throw Error(fmt::format("unknown subcommand '{}'", c.subcommand));
}

}  // namespace qfactor::cli
