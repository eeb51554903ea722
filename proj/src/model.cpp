#include "qfactor/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "qfactor/common.hpp"

namespace qfactor {

using json = nlohmann::json;

namespace {

constexpr int kModelFormatVersion = 1;
constexpr double kNormalizationTol = 1e-8;

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& rows, Eigen::Index cols_hint = -1) {
  const auto n_rows = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index n_cols = n_rows ? static_cast<Eigen::Index>(rows.at(0).size()) : std::max<Eigen::Index>(cols_hint, 0);
  Eigen::MatrixXd m(n_rows, n_cols);
  for (Eigen::Index r = 0; r < n_rows; ++r) {
    const auto& row = rows.at(static_cast<std::size_t>(r));
    if (static_cast<Eigen::Index>(row.size()) != n_cols) throw Error("ragged matrix in model file");
    for (Eigen::Index c = 0; c < n_cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

json vector_to_json(const Eigen::VectorXd& v) {
  return json(std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::VectorXd vector_from_json(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace

Panel validate_panel(Panel raw) {
  const auto n = raw.y.rows();
  const auto t = raw.y.cols();
  const auto j = raw.x.cols();
  if (n < 2) throw Error(fmt::format("panel needs at least 2 units (got {})", n));
  if (t < 1) throw Error("panel needs at least 1 period");
  if (j < 1) throw Error("panel needs at least 1 characteristic");
  if (raw.x.rows() != n) {
    throw Error(fmt::format("dimension mismatch: y has {} units, x has {}", n, raw.x.rows()));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index s = 0; s < t; ++s) {
      if (!std::isfinite(raw.y(i, s))) {
        throw Error(fmt::format("non-finite response at unit {}, period {}", i + 1, s + 1));
      }
    }
    for (Eigen::Index k = 0; k < j; ++k) {
      if (!std::isfinite(raw.x(i, k))) {
        throw Error(fmt::format("non-finite characteristic {} at unit {}", k + 1, i + 1));
      }
    }
  }
  for (Eigen::Index k = 0; k < j; ++k) {
    if (raw.x.col(k).maxCoeff() == raw.x.col(k).minCoeff()) throw Error("degenerate covariate");
  }

  auto fill = [](std::vector<std::string>& labels, Eigen::Index count, std::string_view what,
                 std::string_view prefix) {
    if (labels.empty()) {
      for (Eigen::Index i = 0; i < count; ++i) labels.push_back(fmt::format("{}{}", prefix, i + 1));
    } else if (static_cast<Eigen::Index>(labels.size()) != count) {
      throw Error(fmt::format("dimension mismatch: {} {} labels for {} entries", labels.size(), what, count));
    }
  };
  fill(raw.unit_ids, n, "unit", "");
  fill(raw.period_ids, t, "period", "");
  fill(raw.characteristic_names, j, "characteristic", "x");
  return raw;
}

const SplineParams& ModelConfig::spline_for(int j) const {
  if (splines.size() == 1) return splines.front();
  return splines.at(static_cast<std::size_t>(j));
}

void ModelConfig::validate(int n_characteristics) const {
  if (!(tau > 0.0 && tau < 1.0)) throw Error(fmt::format("tau must lie in (0,1) (got {})", tau));
  if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
  if (max_iter < 1) throw Error("max_iter must be at least 1");
  if (splines.empty()) throw Error("no spline parameters given");
  if (splines.size() != 1 && static_cast<int>(splines.size()) != n_characteristics) {
    throw Error(fmt::format("{} spline parameter sets for {} characteristics", splines.size(),
                            n_characteristics));
  }
  for (const auto& s : splines) {
    if (s.order < 2) throw Error("spline order must be >= 2");
    if (s.interior_knots < 0) throw Error("number of interior knots must be nonnegative");
  }
}

Eigen::VectorXd evaluate_loading(const CenteredBasis& basis, const LoadingState& state,
                                 const Eigen::VectorXd& grid) {
  if (!(state.normalizer > 0.0) || !std::isfinite(state.normalizer)) throw Error("null loading");
  if (state.lambda.size() != basis.size()) throw Error("loading coefficients do not match basis");
  Eigen::VectorXd out(grid.size());
  for (Eigen::Index g = 0; g < grid.size(); ++g) {
    out(g) = basis.eval(grid(g)).dot(state.lambda) / state.normalizer;
  }
  return out;
}

Eigen::VectorXd evaluate_loading(const FittedModel& fitted, int j, const Eigen::VectorXd& grid) {
  if (j < 0 || j >= fitted.n_characteristics()) {
    throw Error(fmt::format("loading index {} out of range (J={})", j, fitted.n_characteristics()));
  }
  return evaluate_loading(fitted.bases()[static_cast<std::size_t>(j)],
                          fitted.loadings()[static_cast<std::size_t>(j)], grid);
}

double predict_quantile(const FittedModel& fitted, int unit, int period) {
  if (unit < 0 || unit >= fitted.n_units()) throw Error(fmt::format("unit index {} out of range", unit));
  if (period < 0 || period >= fitted.n_periods()) {
    throw Error(fmt::format("period index {} out of range", period));
  }
  const auto& f = fitted.factors();
  double q = f(period, 0);
  for (int j = 0; j < fitted.n_characteristics(); ++j) {
    q += fitted.loadings_at_sample()(unit, j) * f(period, j + 1);
  }
  return q;
}

FittedModel FittedModel::assemble(const Panel& panel, ModelConfig config,
                                  std::vector<CenteredBasis> bases, std::vector<LoadingState> loadings,
                                  Eigen::MatrixXd factors, IterationTrace trace, bool converged) {
  FittedModel m;
  m.config_ = std::move(config);
  m.bases_ = std::move(bases);
  m.loadings_ = std::move(loadings);
  m.factors_ = std::move(factors);
  m.covariates_ = panel.x;
  m.trace_ = std::move(trace);
  m.converged_ = converged;
  m.names_ = panel.characteristic_names;
  if (m.factors_.rows() != panel.n_periods()) throw Error("factor matrix does not match panel periods");
  m.finalize(&panel.y);
  return m;
}

FittedModel FittedModel::restore(ModelConfig config, std::vector<CenteredBasis> bases,
                                 std::vector<LoadingState> loadings, Eigen::MatrixXd factors,
                                 Eigen::MatrixXd covariates, Eigen::MatrixXd residuals,
                                 IterationTrace trace, bool converged,
                                 std::vector<std::string> characteristic_names) {
  FittedModel m;
  m.config_ = std::move(config);
  m.bases_ = std::move(bases);
  m.loadings_ = std::move(loadings);
  m.factors_ = std::move(factors);
  m.covariates_ = std::move(covariates);
  m.residuals_ = std::move(residuals);
  m.trace_ = std::move(trace);
  m.converged_ = converged;
  m.names_ = std::move(characteristic_names);
  if (m.residuals_.rows() != m.covariates_.rows() || m.residuals_.cols() != m.factors_.rows()) {
    throw Error("residual matrix has the wrong shape");
  }
  m.finalize(nullptr);
  return m;
}

void FittedModel::finalize(const Eigen::MatrixXd* y) {
  const auto n = covariates_.rows();
  const auto J = static_cast<Eigen::Index>(loadings_.size());
  if (static_cast<Eigen::Index>(bases_.size()) != J || covariates_.cols() != J) {
    throw Error("number of loading functions does not match characteristics");
  }
  if (factors_.cols() != J + 1) throw Error("factor matrix must have J+1 columns");
  if (names_.empty()) {
    for (Eigen::Index j = 0; j < J; ++j) names_.push_back(fmt::format("x{}", j + 1));
  }

  g_sample_.resize(n, J);
  for (Eigen::Index j = 0; j < J; ++j) {
    g_sample_.col(j) = evaluate_loading(bases_[static_cast<std::size_t>(j)],
                                        loadings_[static_cast<std::size_t>(j)], covariates_.col(j));
    const double second_moment = g_sample_.col(j).squaredNorm() / static_cast<double>(n);
    if (std::abs(second_moment - 1.0) > kNormalizationTol) {
      throw Error(fmt::format("loading {} violates the normalization (mean square {})", j + 1, second_moment));
    }
    if (factors_.col(j + 1).mean() < 0.0) {
      throw Error(fmt::format("factor {} has negative time-series mean", j + 1));
    }
  }
  if (y) {
    residuals_ = *y - (design_matrix() * factors_.transpose());
  }
}

Eigen::MatrixXd FittedModel::design_matrix() const {
  Eigen::MatrixXd g(n_units(), n_characteristics() + 1);
  g.col(0).setOnes();
  g.rightCols(n_characteristics()) = g_sample_;
  return g;
}

double FittedModel::mean_check_loss() const {
  double total = 0.0;
  for (Eigen::Index i = 0; i < residuals_.size(); ++i) total += check_loss(residuals_.data()[i], tau());
  return total / static_cast<double>(residuals_.size());
}

void FittedModel::check_residuals(const Panel& panel) const {
  if (panel.n_units() != n_units() || panel.n_periods() != n_periods() ||
      panel.n_characteristics() != n_characteristics()) {
    throw Error("panel dimensions do not match the fitted model");
  }
  if ((panel.x - covariates_).cwiseAbs().maxCoeff() > 0.0) {
    throw Error("panel characteristics differ from those used for fitting");
  }
  const Eigen::MatrixXd expected = panel.y - design_matrix() * factors_.transpose();
  const double err = (expected - residuals_).cwiseAbs().maxCoeff();
  if (err > 1e-10 * (1.0 + panel.y.cwiseAbs().maxCoeff())) {
    throw Error(fmt::format("stored residuals disagree with the panel (max error {})", err));
  }
}

std::string to_json(const FittedModel& fitted) {
  const auto& cfg = fitted.config();
  json doc;
  doc["format"] = "qfactor.fitted_model";
  doc["version"] = kModelFormatVersion;
  json splines = json::array();
  for (const auto& s : cfg.splines) splines.push_back({{"order", s.order}, {"interior_knots", s.interior_knots}});
  doc["config"] = {{"tau", cfg.tau},
                   {"epsilon", cfg.epsilon},
                   {"max_iter", cfg.max_iter},
                   {"splines", splines},
                   {"solver_tol", cfg.solver.tol},
                   {"solver_max_iter", cfg.solver.max_iter}};
  doc["n_units"] = fitted.n_units();
  doc["n_periods"] = fitted.n_periods();
  doc["characteristics"] = fitted.characteristic_names();
  doc["covariates"] = matrix_to_json(fitted.covariates());
  doc["factors"] = matrix_to_json(fitted.factors());
  json loadings = json::array();
  for (int j = 0; j < fitted.n_characteristics(); ++j) {
    const auto& basis = fitted.bases()[static_cast<std::size_t>(j)];
    const auto& state = fitted.loadings()[static_cast<std::size_t>(j)];
    const auto& spec = basis.spec();
    loadings.push_back({{"order", spec.order},
                        {"interior_knots", spec.interior_knots},
                        {"lower", spec.lower},
                        {"upper", spec.upper},
                        {"knots", spec.knots},
                        {"centers", vector_to_json(basis.centers())},
                        {"scale", basis.scale()},
                        {"sample_size", basis.sample_size()},
                        {"lambda", vector_to_json(state.lambda)},
                        {"normalizer", state.normalizer}});
  }
  doc["loadings"] = loadings;
  doc["residuals"] = matrix_to_json(fitted.residuals());
  json trace = json::array();
  for (const auto& r : fitted.trace()) {
    trace.push_back({{"iteration", r.iteration},
                     {"factor_change", r.factor_change},
                     {"lambda_change", r.lambda_change},
                     {"objective", r.objective},
                     {"objective_before_loadings", r.objective_before_loadings},
                     {"objective_after_loadings", r.objective_after_loadings},
                     {"objective_before_factors", r.objective_before_factors},
                     {"normalization_error", r.normalization_error},
                     {"min_factor_mean", r.min_factor_mean}});
  }
  doc["diagnostics"] = {{"iterations", fitted.iterations_used()},
                        {"converged", fitted.converged()},
                        {"mean_check_loss", fitted.mean_check_loss()},
                        {"trace", trace}};
  return doc.dump(1);
}

FittedModel fitted_model_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(fmt::format("model file is not valid JSON: {}", e.what()));
  }
  try {
    if (doc.at("format").get<std::string>() != "qfactor.fitted_model") throw Error("not a fitted-model document");
    const int version = doc.at("version").get<int>();
    if (version != kModelFormatVersion) throw Error(fmt::format("unsupported model format version {}", version));

    ModelConfig cfg;
    const auto& c = doc.at("config");
    cfg.tau = c.at("tau").get<double>();
    cfg.epsilon = c.at("epsilon").get<double>();
    cfg.max_iter = c.at("max_iter").get<int>();
    cfg.solver.tol = c.at("solver_tol").get<double>();
    cfg.solver.max_iter = c.at("solver_max_iter").get<int>();
    cfg.splines.clear();
    for (const auto& s : c.at("splines")) {
      cfg.splines.push_back({s.at("order").get<int>(), s.at("interior_knots").get<int>()});
    }

    std::vector<CenteredBasis> bases;
    std::vector<LoadingState> states;
    for (const auto& l : doc.at("loadings")) {
      SplineSpec spec = make_knots_on(l.at("lower").get<double>(), l.at("upper").get<double>(),
                                      l.at("interior_knots").get<int>(), l.at("order").get<int>());
      spec.knots = l.at("knots").get<std::vector<double>>();
      if (static_cast<int>(spec.knots.size()) != spec.basis_size() + spec.order) {
        throw Error("knot vector has the wrong length");
      }
      bases.push_back(CenteredBasis::from_parts(std::move(spec), vector_from_json(l.at("centers")),
                                                l.at("sample_size").get<int>()));
      states.push_back({vector_from_json(l.at("lambda")), l.at("normalizer").get<double>()});
    }
    const auto J = static_cast<Eigen::Index>(states.size());

    IterationTrace trace;
    const auto& diag = doc.at("diagnostics");
    for (const auto& r : diag.at("trace")) {
      IterationRecord rec;
      rec.iteration = r.at("iteration").get<int>();
      rec.factor_change = r.at("factor_change").get<double>();
      rec.lambda_change = r.at("lambda_change").get<double>();
      rec.objective = r.at("objective").get<double>();
      rec.objective_before_loadings = r.at("objective_before_loadings").get<double>();
      rec.objective_after_loadings = r.at("objective_after_loadings").get<double>();
      rec.objective_before_factors = r.at("objective_before_factors").get<double>();
      rec.normalization_error = r.at("normalization_error").get<double>();
      rec.min_factor_mean = r.at("min_factor_mean").get<double>();
      trace.push_back(rec);
    }

    return FittedModel::restore(std::move(cfg), std::move(bases), std::move(states),
                                matrix_from_json(doc.at("factors"), J + 1),
                                matrix_from_json(doc.at("covariates"), J),
                                matrix_from_json(doc.at("residuals")), std::move(trace),
                                diag.at("converged").get<bool>(),
                                doc.at("characteristics").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw Error(fmt::format("malformed model file: {}", e.what()));
  }
}

void save_model(const FittedModel& fitted, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot open {} for writing", path));
  out << to_json(fitted) << '\n';
  if (!out) throw Error(fmt::format("failed writing {}", path));
}

FittedModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open model file {}", path));
  std::stringstream buffer;
  buffer << in.rdbuf();
  return fitted_model_from_json(buffer.str());
}

}  // namespace qfactor
