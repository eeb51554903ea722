#include "qfactor/estimator.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "qfactor/common.hpp"

namespace qfactor {

namespace {

constexpr double kMinNormalizer = 1e-12;

// Each centered block satisfies sum_k B_jk(x) = 0, so the constant vector
// spans its null space. Regressions drop the last column of every block and
// the coefficients are mapped back to the mean-zero (least-norm)
// representative.
Eigen::VectorXd expand_block(const Eigen::VectorXd& reduced) {
  Eigen::VectorXd full(reduced.size() + 1);
  full.head(reduced.size()) = reduced;
  full(reduced.size()) = 0.0;
  full.array() -= full.mean();
  return full;
}

std::vector<Eigen::MatrixXd> basis_matrices(const Panel& panel, const std::vector<CenteredBasis>& bases) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(bases.size());
  for (int j = 0; j < panel.n_characteristics(); ++j) {
    out.push_back(bases[static_cast<std::size_t>(j)].matrix(Eigen::VectorXd(panel.x.col(j))));
  }
  return out;
}

int total_basis_size(const std::vector<CenteredBasis>& bases) {
  int total = 0;
  for (const auto& b : bases) total += b.size();
  return total;
}

void check_bases(const Panel& panel, const std::vector<CenteredBasis>& bases) {
  if (static_cast<int>(bases.size()) != panel.n_characteristics()) {
    throw Error(fmt::format("{} bases supplied for {} characteristics", bases.size(), panel.n_characteristics()));
  }
}

// N x J matrix of the normalized loadings at the sample points.
Eigen::MatrixXd loadings_matrix(const std::vector<Eigen::MatrixXd>& basis_at_sample,
                                const std::vector<LoadingState>& loadings, bool normalize) {
  const auto n = basis_at_sample.front().rows();
  Eigen::MatrixXd g(n, static_cast<Eigen::Index>(loadings.size()));
  for (std::size_t j = 0; j < loadings.size(); ++j) {
    g.col(static_cast<Eigen::Index>(j)) = basis_at_sample[j] * loadings[j].lambda;
    if (normalize) g.col(static_cast<Eigen::Index>(j)) /= loadings[j].normalizer;
  }
  return g;
}

double pooled_mean_loss(const Panel& panel, const Eigen::MatrixXd& g, const Eigen::MatrixXd& factors, double tau) {
  Eigen::MatrixXd design(g.rows(), g.cols() + 1);
  design.col(0).setOnes();
  design.rightCols(g.cols()) = g;
  const Eigen::MatrixXd resid = panel.y - design * factors.transpose();
  double total = 0.0;
  for (Eigen::Index i = 0; i < resid.size(); ++i) total += check_loss(resid.data()[i], tau);
  return total / static_cast<double>(resid.size());
}

double empirical_normalizer(const Eigen::VectorXd& values) {
  return std::sqrt(values.squaredNorm() / static_cast<double>(values.size()));
}

Eigen::VectorXd stack_lambda(const std::vector<LoadingState>& loadings, bool normalized) {
  Eigen::Index total = 0;
  for (const auto& l : loadings) total += l.lambda.size();
  Eigen::VectorXd out(total);
  Eigen::Index offset = 0;
  for (const auto& l : loadings) {
    out.segment(offset, l.lambda.size()) = normalized ? Eigen::VectorXd(l.lambda / l.normalizer) : l.lambda;
    offset += l.lambda.size();
  }
  return out;
}

}  // namespace

std::vector<CenteredBasis> build_bases(const Panel& panel, const ModelConfig& config) {
  config.validate(panel.n_characteristics());
  std::vector<CenteredBasis> bases;
  for (int j = 0; j < panel.n_characteristics(); ++j) {
    const auto& params = config.spline_for(j);
    const Eigen::VectorXd col = panel.x.col(j);
    const std::span<const double> sample(col.data(), static_cast<std::size_t>(col.size()));
    bases.push_back(CenteredBasis::fit(make_knots(sample, params.interior_knots, params.order), sample));
  }
  return bases;
}

PeriodAdditiveFit fit_period_additive(const Panel& panel, const ModelConfig& config,
                                      const std::vector<CenteredBasis>& bases, int t) {
  check_bases(panel, bases);
  if (t < 0 || t >= panel.n_periods()) throw Error(fmt::format("period index {} out of range", t));
  const auto mats = basis_matrices(panel, bases);
  const auto n = panel.y.rows();

  Eigen::Index reduced_cols = 1;
  for (const auto& m : mats) reduced_cols += m.cols() - 1;
  QregProblem prob;
  prob.tau = config.tau;
  prob.design.resize(n, reduced_cols);
  prob.design.col(0).setOnes();
  Eigen::Index col = 1;
  for (const auto& m : mats) {
    prob.design.middleCols(col, m.cols() - 1) = m.leftCols(m.cols() - 1);
    col += m.cols() - 1;
  }
  prob.response = panel.y.col(t);

  QregSolution sol;
  try {
    sol = solve(prob, config.solver);
  } catch (const Error& e) {
    throw Error(fmt::format("additive fit for period {}: {}", t + 1, e.what()));
  }

  PeriodAdditiveFit out;
  out.h_u = sol.coefficients(0);
  out.theta.resize(total_basis_size(bases));
  Eigen::Index reduced_offset = 1, full_offset = 0;
  for (const auto& m : mats) {
    out.theta.segment(full_offset, m.cols()) = expand_block(sol.coefficients.segment(reduced_offset, m.cols() - 1));
    reduced_offset += m.cols() - 1;
    full_offset += m.cols();
  }
  out.objective = sol.objective;
  out.status = sol.status;
  return out;
}

InitialLoadings initial_loadings(const Eigen::MatrixXd& theta, const Panel& panel,
                                 const std::vector<CenteredBasis>& bases) {
  check_bases(panel, bases);
  if (theta.rows() < 1) throw Error("initial loadings need at least one period");
  if (theta.cols() != total_basis_size(bases)) throw Error("theta does not match the basis sizes");
  const auto mats = basis_matrices(panel, bases);

  InitialLoadings out;
  out.mean_components.resize(panel.n_units(), panel.n_characteristics());
  const Eigen::VectorXd mean_theta = theta.colwise().mean().transpose();
  Eigen::Index offset = 0;
  for (int j = 0; j < panel.n_characteristics(); ++j) {
    const auto& m = mats[static_cast<std::size_t>(j)];
    LoadingState state;
    state.lambda = mean_theta.segment(offset, m.cols());
    offset += m.cols();
    out.mean_components.col(j) = m * state.lambda;
    state.normalizer = empirical_normalizer(out.mean_components.col(j));
    if (!(state.normalizer >= kMinNormalizer)) {
      throw Error(fmt::format("unidentified loading {}", j + 1));
    }
    out.g0.push_back(std::move(state));
  }
  return out;
}

Eigen::MatrixXd update_factors(const Panel& panel, const ModelConfig& config,
                               const std::vector<CenteredBasis>& bases,
                               const std::vector<LoadingState>& loadings) {
  check_bases(panel, bases);
  const int n = panel.n_units();
  const int J = panel.n_characteristics();
  if (J + 1 > n) throw Error(fmt::format("factor regression has J+1={} parameters but only N={} units", J + 1, n));
  const auto mats = basis_matrices(panel, bases);
  for (const auto& l : loadings) {
    if (!(l.normalizer > 0.0)) throw Error("null loading");
  }

  Eigen::MatrixXd design(n, J + 1);
  design.col(0).setOnes();
  design.rightCols(J) = loadings_matrix(mats, loadings, true);

  const int T = panel.n_periods();
  Eigen::MatrixXd factors(T, J + 1);
  parallel_for(static_cast<std::size_t>(T), [&](std::size_t ts) {
    const auto t = static_cast<Eigen::Index>(ts);
    QregProblem prob;
    prob.tau = config.tau;
    prob.design = design;
    prob.response = panel.y.col(t);
    try {
      factors.row(t) = solve(prob, config.solver).coefficients.transpose();
    } catch (const Error& e) {
      throw Error(fmt::format("factor regression for period {}: {}", t + 1, e.what()));
    }
  });
  return factors;
}

InitialFit initial_fit(const Panel& panel, const ModelConfig& config, const std::vector<CenteredBasis>& bases) {
  check_bases(panel, bases);
  const int T = panel.n_periods();
  InitialFit out;
  out.h_u.resize(T);
  out.theta.resize(T, total_basis_size(bases));
  parallel_for(static_cast<std::size_t>(T), [&](std::size_t ts) {
    const auto t = static_cast<int>(ts);
    const auto period = fit_period_additive(panel, config, bases, t);
    out.h_u(t) = period.h_u;
    out.theta.row(t) = period.theta.transpose();
  });
  auto loadings = initial_loadings(out.theta, panel, bases);
  out.g0 = std::move(loadings.g0);
  out.mean_components = std::move(loadings.mean_components);
  out.f0 = initial_factors(panel, config, bases, out.g0);
  return out;
}

LoadingUpdate update_loadings(const Panel& panel, const ModelConfig& config,
                              const std::vector<CenteredBasis>& bases, const Eigen::MatrixXd& factors) {
  check_bases(panel, bases);
  const auto n = static_cast<Eigen::Index>(panel.n_units());
  const auto T = static_cast<Eigen::Index>(panel.n_periods());
  const int J = panel.n_characteristics();
  if (factors.rows() != T || factors.cols() != J + 1) throw Error("factor matrix has the wrong shape");
  if (!factors.allFinite()) throw Error("factor matrix contains non-finite values");
  const auto mats = basis_matrices(panel, bases);

  Eigen::Index reduced_cols = 0;
  for (const auto& m : mats) reduced_cols += m.cols() - 1;

  // Rows are ordered period-major: row t*N + i.
  QregProblem prob;
  prob.tau = config.tau;
  prob.design.resize(n * T, reduced_cols);
  prob.response.resize(n * T);
  for (Eigen::Index t = 0; t < T; ++t) {
    Eigen::Index col = 0;
    for (int j = 0; j < J; ++j) {
      const auto& m = mats[static_cast<std::size_t>(j)];
      prob.design.block(t * n, col, n, m.cols() - 1) = m.leftCols(m.cols() - 1) * factors(t, j + 1);
      col += m.cols() - 1;
    }
    prob.response.segment(t * n, n) = panel.y.col(t).array() - factors(t, 0);
  }

  QregSolution sol;
  try {
    sol = solve(prob, config.solver);
  } catch (const Error& e) {
    throw Error(fmt::format("pooled loading regression: {}", e.what()));
  }

  LoadingUpdate out;
  out.objective = sol.objective;
  out.status = sol.status;
  Eigen::Index offset = 0;
  for (int j = 0; j < J; ++j) {
    const auto& m = mats[static_cast<std::size_t>(j)];
    LoadingState state;
    state.lambda = expand_block(sol.coefficients.segment(offset, m.cols() - 1));
    offset += m.cols() - 1;
    state.normalizer = empirical_normalizer(m * state.lambda);
    if (!(state.normalizer >= kMinNormalizer)) throw Error(fmt::format("unidentified loading {}", j + 1));
    out.loadings.push_back(std::move(state));
  }
  return out;
}

void canonicalize_signs(std::vector<LoadingState>& loadings, Eigen::MatrixXd& factors) {
  for (std::size_t j = 0; j < loadings.size(); ++j) {
    auto col = factors.col(static_cast<Eigen::Index>(j + 1));
    if (col.mean() < 0.0) {
      col = -col;
      loadings[j].lambda = -loadings[j].lambda;
    }
  }
}

FittedModel fit(const Panel& raw_panel, const ModelConfig& config) {
  const Panel panel = validate_panel(raw_panel);
  config.validate(panel.n_characteristics());
  const auto bases = build_bases(panel, config);
  const auto mats = basis_matrices(panel, bases);
  const double tau = config.tau;

  InitialFit init = initial_fit(panel, config, bases);
  std::vector<LoadingState> g = std::move(init.g0);
  Eigen::MatrixXd f = std::move(init.f0);
  canonicalize_signs(g, f);
  Eigen::VectorXd lambda_prev = stack_lambda(g, true);

  IterationTrace trace;
  bool converged = false;
  for (int it = 1; it <= config.max_iter; ++it) {
    IterationRecord rec;
    rec.iteration = it;
    rec.objective_before_loadings = pooled_mean_loss(panel, loadings_matrix(mats, g, true), f, tau);

    auto update = update_loadings(panel, config, bases, f);
    std::vector<LoadingState> g_new = std::move(update.loadings);
    rec.objective_after_loadings = pooled_mean_loss(panel, loadings_matrix(mats, g_new, false), f, tau);
    rec.objective_before_factors = pooled_mean_loss(panel, loadings_matrix(mats, g_new, true), f, tau);

    Eigen::MatrixXd f_new = update_factors(panel, config, bases, g_new);
    canonicalize_signs(g_new, f_new);
    const Eigen::MatrixXd g_sample = loadings_matrix(mats, g_new, true);
    rec.objective = pooled_mean_loss(panel, g_sample, f_new, tau);

    const Eigen::VectorXd lambda_new = stack_lambda(g_new, false);
    rec.factor_change = (f_new - f).norm();
    rec.lambda_change = (lambda_new - lambda_prev).norm();
    rec.normalization_error =
        ((g_sample.colwise().squaredNorm() / static_cast<double>(panel.n_units())).array() - 1.0).abs().maxCoeff();
    rec.min_factor_mean = f_new.rightCols(panel.n_characteristics()).colwise().mean().minCoeff();
    trace.push_back(rec);

    g = std::move(g_new);
    f = std::move(f_new);
    lambda_prev = lambda_new;
    if (rec.factor_change < config.epsilon && rec.lambda_change < config.epsilon) {
      converged = true;
      break;
    }
  }
  return FittedModel::assemble(panel, config, bases, std::move(g), std::move(f), std::move(trace), converged);
}

double bic_value(double mean_check_loss, int n_units, int n_periods, int n_characteristics,
                 int interior_knots, int order) {
  const double nt = static_cast<double>(n_units) * n_periods;
  return std::log(mean_check_loss) +
         std::log(nt) / (2.0 * nt) * n_characteristics * (interior_knots + order);
}

int bic_argmin(const std::vector<BicPoint>& curve) {
  const BicPoint* best = nullptr;
  for (const auto& p : curve) {
    if (!p.ok) continue;
    if (!best || p.bic < best->bic || (p.bic == best->bic && p.interior_knots < best->interior_knots)) best = &p;
  }
  if (!best) throw Error("knot selection failed for every grid point");
  return best->interior_knots;
}

BicSelection select_knots_bic(const Panel& panel, const ModelConfig& config, const std::vector<int>& grid) {
  if (grid.empty()) throw Error("knot grid is empty");
  BicSelection out;
  const int J = panel.n_characteristics();
  for (int knots : grid) {
    BicPoint point;
    point.interior_knots = knots;
    ModelConfig cfg = config;
    for (auto& s : cfg.splines) s.interior_knots = knots;
    try {
      const FittedModel fitted = fit(panel, cfg);
      point.mean_check_loss = fitted.mean_check_loss();
      point.penalty = 0.0;
      for (int j = 0; j < J; ++j) {
        point.penalty += bic_value(1.0, panel.n_units(), panel.n_periods(), 1, knots, cfg.spline_for(j).order);
      }
      point.bic = std::log(point.mean_check_loss) + point.penalty;
      point.iterations = fitted.iterations_used();
      point.converged = fitted.converged();
      point.ok = true;
    } catch (const Error& e) {
      point.error = e.what();
    }
    out.curve.push_back(std::move(point));
  }
  out.chosen = bic_argmin(out.curve);
  return out;
}

}  // namespace qfactor
