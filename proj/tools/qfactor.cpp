#include <iostream>

#include <CLI11.hpp>

#include "qfactor/cli.hpp"
#include "qfactor/common.hpp"

using qfactor::cli::RunConfig;

namespace {

void estimation_flags(CLI::App* app, RunConfig& c) {
  app->add_option("--tau", c.tau, "Quantile level")->capture_default_str();
  app->add_option("--knots", c.knots, "Interior knots L_N")->capture_default_str();
  app->add_option("--knots-grid", c.knots_grid, "Candidate L_N values for BIC selection")->delimiter(',');
  app->add_option("--order", c.order, "Spline order m")->capture_default_str();
  app->add_option("--eps", c.epsilon, "Convergence tolerance")->capture_default_str();
  app->add_option("--max-iter", c.max_iter, "Iteration cap")->capture_default_str();
}

void inference_flags(CLI::App* app, RunConfig& c, std::string& kernel) {
  app->add_option("--kappa", c.kappas, "Bandwidth constant(s) for Lambda")->delimiter(',');
  app->add_option("--b", c.bs, "Fixed-b bandwidth ratio(s)")->delimiter(',');
  app->add_option("--kernel", kernel, "bartlett or qs")->capture_default_str();
  app->add_option("--ordering", c.ordering, "given, covariate:<j> or pc1")->capture_default_str();
  app->add_option("--level", c.level, "Significance level")->capture_default_str();
  app->add_option("--cv-grid", c.cv_grid, "Grid size of the simulated bridges")->capture_default_str();
  app->add_option("--cv-reps", c.cv_reps, "Replications for critical values")->capture_default_str();
}

void common_flags(CLI::App* app, RunConfig& c) {
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app->add_option("--threads", c.threads, "Worker threads (0 = all cores)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semiparametric quantile factor panel models"};
  app.require_subcommand(1);
  RunConfig c;
  std::string kernel = "bartlett";
  std::string innovation = "student_t";
  std::vector<std::string> shapes;
  int sort_covariate = 0;

  auto* fit = app.add_subcommand("fit", "Fit the model and write factors and loading curves");
  fit->add_option("--input", c.input, "Panel CSV (unit,time,y,x1,...)")->required();
  fit->add_option("--grid-points", c.grid_points, "Points per loading curve")->capture_default_str();
  estimation_flags(fit, c);
  common_flags(fit, c);

  auto* knots = app.add_subcommand("knots", "BIC curve over a knot grid");
  knots->add_option("--input", c.input, "Panel CSV")->required();
  estimation_flags(knots, c);
  common_flags(knots, c);

  auto* test = app.add_subcommand("test", "Per-period fixed-b t tests summarized per factor");
  test->add_option("--model", c.model, "Model JSON written by fit")->required();
  test->add_option("--input", c.input, "Panel CSV used for the fit (optional residual check)");
  test->add_option("--annualization", c.annualization, "Periods per year")->capture_default_str();
  inference_flags(test, c, kernel);
  common_flags(test, c);

  auto* critvals = app.add_subcommand("critvals", "Simulate fixed-b critical value tables");
  critvals->add_option("--q", c.q, "Number of restrictions")->capture_default_str();
  inference_flags(critvals, c, kernel);
  common_flags(critvals, c);

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo studies");
  simulate->add_option("--kind", c.mc_kind, "rmse, coverage, size or rate")->capture_default_str();
  simulate->add_option("--reps", c.reps, "Replications")->capture_default_str();
  simulate->add_option("--n", c.design.n_units, "Units")->capture_default_str();
  simulate->add_option("--t", c.design.n_periods, "Periods")->capture_default_str();
  simulate->add_option("--j", c.design.n_characteristics, "Characteristics")->capture_default_str();
  simulate->add_option("--loadings", shapes, "Loading shapes (linear, quadratic, sine, exponential)")
      ->delimiter(',');
  simulate->add_option("--factor-means", c.design.factor_means, "Factor means mu_j")->delimiter(',');
  simulate->add_option("--factor-sd", c.design.factor_sd, "Factor innovation sd")->capture_default_str();
  simulate->add_option("--rho-x", c.design.rho_x, "Cross-sectional MA decay")->capture_default_str();
  simulate->add_option("--rho-t", c.design.rho_t, "Error AR coefficient")->capture_default_str();
  simulate->add_option("--innovation", innovation, "student_t or normal")->capture_default_str();
  simulate->add_option("--df", c.design.df, "Student-t degrees of freedom")->capture_default_str();
  simulate->add_option("--noise-scale", c.design.noise_scale, "Error scale")->capture_default_str();
  simulate->add_option("--sort-covariate", sort_covariate, "Sort units by covariate j (1-based) before errors");
  simulate->add_option("--rate-n", c.rate_n, "Unit counts for the rate study")->delimiter(',');
  simulate->add_option("--rate-alpha", c.rate_alpha, "T = ceil(N^alpha) in the rate study")->capture_default_str();
  simulate->add_option("--test-factor", c.test_factor, "Factor column tested (0 = intercept)")->capture_default_str();
  simulate->add_option("--test-period", c.test_period, "Period tested (1-based)")->capture_default_str();
  simulate->add_flag("--knots-rule", c.knots_rule, "Use floor((NT)^(1/5)) interior knots");
  simulate->add_flag("--emit-panel", c.emit_panel, "Write one simulated panel and its true factors");
  estimation_flags(simulate, c);
  inference_flags(simulate, c, kernel);
  common_flags(simulate, c);

  CLI11_PARSE(app, argc, argv);

  try {
    c.subcommand = app.get_subcommands().front()->get_name();
    c.kernel = qfactor::parse_kernel(kernel);
    c.design.tau = c.tau;
    c.design.innovation = innovation == "normal" ? qfactor::Innovation::normal : qfactor::Innovation::student_t;
    if (innovation != "normal" && innovation != "student_t") throw qfactor::Error("unknown innovation " + innovation);
    for (const auto& s : shapes) c.design.loadings.push_back(qfactor::parse_loading_shape(s));
    if (sort_covariate > 0) c.design.sort_by_covariate = sort_covariate - 1;
    for (const auto& path : qfactor::cli::run(c)) std::cout << path << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
