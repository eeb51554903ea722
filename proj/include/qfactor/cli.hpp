#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "qfactor/hac.hpp"
#include "qfactor/model.hpp"
#include "qfactor/simulation.hpp"

namespace qfactor::cli {

/// Long-format panel `unit,time,y,x1,...,xJ`. Units and periods are indexed
/// by first appearance. Errors carry the source name and line number.
Panel ingest_csv(const std::string& path);
Panel parse_panel_csv(std::istream& in, const std::string& source = "<input>");

/// Writes the panel in the same long format (unit-major rows).
std::string panel_to_csv(const Panel& panel);

struct RunConfig {
  std::string subcommand;  // fit, test, simulate, critvals, knots
  std::string input;       // panel CSV
  std::string model;       // model JSON (test)
  std::string out = ".";

  // Estimation
  double tau = 0.5;
  int knots = 3;
  std::vector<int> knots_grid;
  int order = 4;
  double epsilon = 1e-4;
  int max_iter = 50;
  int grid_points = 201;

  // Inference. Several kappa / b values make a sweep.
  std::vector<double> kappas{1.0};
  std::vector<double> bs{0.2};
  HacKernel kernel = HacKernel::bartlett;
  std::string ordering = "given";
  double level = 0.05;
  double annualization = 251.0;
  int q = 1;
  int cv_grid = 1000;
  int cv_reps = 50000;

  std::uint64_t seed = 20240501;
  int threads = 0;  // 0 keeps the default

  // Simulation
  std::string mc_kind = "rmse";  // rmse, coverage, size, rate
  int reps = 100;
  SimDesign design{};
  std::vector<int> rate_n;
  double rate_alpha = 0.4;
  bool knots_rule = false;
  int test_factor = 1;  // column tested in coverage/size runs (0 = intercept)
  int test_period = 1;  // 1-based
  bool emit_panel = false;
};

/// Flag checks done before any computation; throws Error.
void validate(const RunConfig& config);

/// Each command writes its files under config.out and returns the list of
/// paths written.
std::vector<std::string> cmd_fit(const RunConfig& config);
std::vector<std::string> cmd_knots(const RunConfig& config);
std::vector<std::string> cmd_test(const RunConfig& config);
std::vector<std::string> cmd_simulate(const RunConfig& config);
std::vector<std::string> cmd_critvals(const RunConfig& config);

std::vector<std::string> run(const RunConfig& config);

}  // namespace qfactor::cli
