#include "qfactor/qreg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <fmt/format.h>

#include "qfactor/common.hpp"

namespace qfactor {

std::string_view to_string(QregStatus status) {
  switch (status) {
    case QregStatus::converged: return "converged";
    case QregStatus::max_iter: return "max-iter";
    case QregStatus::degenerate: return "degenerate";
  }
  return "unknown";
}

void validate(const QregProblem& problem) {
  const auto n = problem.design.rows();
  const auto p = problem.design.cols();
  if (p < 1) throw Error("quantile regression needs at least one column");
  if (n < p) throw Error(fmt::format("quantile regression needs N >= p (N={}, p={})", n, p));
  if (problem.response.size() != n) {
    throw Error(fmt::format("response has length {}, design has {} rows", problem.response.size(), n));
  }
  if (!(problem.tau > 0.0 && problem.tau < 1.0)) {
    throw Error(fmt::format("tau must lie in (0,1) (got {})", problem.tau));
  }
  if (!problem.design.allFinite() || !problem.response.allFinite()) {
    throw Error("quantile regression input contains NaN or Inf");
  }
  if (problem.weights.size() != 0) {
    if (problem.weights.size() != n) throw Error("weight vector length does not match design");
    if (!problem.weights.allFinite() || (problem.weights.array() < 0.0).any()) {
      throw Error("weights must be finite and nonnegative");
    }
  }
}

double objective(const QregProblem& problem, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd r = problem.response - problem.design * beta;
  double total = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    const double w = problem.weights.size() ? problem.weights(i) : 1.0;
    total += w * check_loss(r(i), problem.tau);
  }
  return total;
}

namespace {

// Largest step in (0, 1] keeping v + alpha * dv >= 0.
double max_step(const Eigen::VectorXd& v, const Eigen::VectorXd& dv) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (dv(i) < 0.0) alpha = std::min(alpha, -v(i) / dv(i));
  }
  return alpha;
}

class NormalSolver {
 public:
  NormalSolver(const Eigen::MatrixXd& z, bool jitter) : z_(z), jitter_(jitter) {}

  // Factorizes Z' diag(d) Z (+ jitter).
  void factor(const Eigen::VectorXd& d) {
    const auto p = z_.cols();
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(p, p);
    const Eigen::MatrixXd scaled = z_.array().colwise() * d.array().sqrt();
    m.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose());
    m.triangularView<Eigen::Upper>() = m.transpose();
    const double ridge = 1e-10 * std::max(m.diagonal().maxCoeff(), std::numeric_limits<double>::min());
    if (jitter_) m.diagonal().array() += ridge;
    llt_.compute(m);
    if (llt_.info() != Eigen::Success) {
      m.diagonal().array() += ridge;
      llt_.compute(m);
    }
    use_ldlt_ = llt_.info() != Eigen::Success;
    if (use_ldlt_) ldlt_.compute(m);
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    return use_ldlt_ ? Eigen::VectorXd(ldlt_.solve(rhs)) : Eigen::VectorXd(llt_.solve(rhs));
  }

 private:
  const Eigen::MatrixXd& z_;
  bool jitter_;
  bool use_ldlt_ = false;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::LDLT<Eigen::MatrixXd> ldlt_;
};

// Picks p linearly independent rows in order of increasing |residual| and
// returns the interpolating coefficients, if such rows exist.
bool vertex_polish(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, const Eigen::VectorXd& beta,
                   Eigen::VectorXd& vertex) {
  const auto n = z.rows();
  const auto p = z.cols();
  const Eigen::VectorXd r = (y - z * beta).cwiseAbs();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return r(a) < r(b); });

  Eigen::MatrixXd basis(p, p);  // orthonormal rows of the accepted set
  std::vector<Eigen::Index> chosen;
  chosen.reserve(static_cast<std::size_t>(p));
  for (Eigen::Index i : order) {
    const double norm = z.row(i).norm();
    if (norm == 0.0) continue;
    Eigen::VectorXd v = z.row(i).transpose();
    for (std::size_t k = 0; k < chosen.size(); ++k) {
      const auto row = static_cast<Eigen::Index>(k);
      v -= basis.row(row).dot(v) * basis.row(row).transpose();
    }
    const double residual = v.norm();
    if (residual <= 1e-9 * norm) continue;
    basis.row(static_cast<Eigen::Index>(chosen.size())) = v.transpose() / residual;
    chosen.push_back(i);
    if (static_cast<Eigen::Index>(chosen.size()) == p) break;
  }
  if (static_cast<Eigen::Index>(chosen.size()) < p) return false;

  Eigen::MatrixXd zs(p, p);
  Eigen::VectorXd ys(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    zs.row(k) = z.row(chosen[static_cast<std::size_t>(k)]);
    ys(k) = y(chosen[static_cast<std::size_t>(k)]);
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(zs);
  if (!lu.isInvertible()) return false;
  vertex = lu.solve(ys);
  return vertex.allFinite();
}

}  // namespace

QregSolution solve(const QregProblem& problem, const QregOptions& options) {
  validate(problem);
  const double tau = problem.tau;
  const auto n = problem.design.rows();
  const auto p = problem.design.cols();

  // Weights are folded into the rows: w * rho(u) = rho(w * u) for w >= 0.
  Eigen::MatrixXd weighted_z;
  Eigen::VectorXd weighted_y;
  const Eigen::MatrixXd* zp = &problem.design;
  const Eigen::VectorXd* yp = &problem.response;
  if (problem.weights.size() != 0) {
    weighted_z = problem.design.array().colwise() * problem.weights.array();
    weighted_y = problem.response.cwiseProduct(problem.weights);
    zp = &weighted_z;
    yp = &weighted_y;
  }
  const Eigen::MatrixXd& z = *zp;
  const Eigen::VectorXd& y = *yp;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> rank_qr(z);
  rank_qr.setThreshold(1e-10);
  const bool degenerate = rank_qr.rank() < p;

  NormalSolver normal(z, degenerate);
  const Eigen::VectorXd c = -y;
  const Eigen::VectorXd b = (1.0 - tau) * z.colwise().sum().transpose();
  const double y_scale = 1.0 + y.cwiseAbs().maxCoeff();

  Eigen::VectorXd x = Eigen::VectorXd::Constant(n, 1.0 - tau);
  Eigen::VectorXd s = Eigen::VectorXd::Constant(n, tau);
  normal.factor(Eigen::VectorXd::Ones(n));
  Eigen::VectorXd dual = normal.solve(z.transpose() * c);
  Eigen::VectorXd r = c - z * dual;
  const double shift = std::max(0.1 * r.cwiseAbs().mean(), 1e-8 * y_scale);
  Eigen::VectorXd zv = r.cwiseMax(0.0).array() + shift;
  Eigen::VectorXd wv = (-r).cwiseMax(0.0).array() + shift;

  QregSolution solution;
  solution.status = QregStatus::max_iter;
  constexpr double kStepFraction = 0.99995;

  Eigen::VectorXd dx, ds, dz, dw, dual_step, d, rhat;
  int iter = 0;
  for (; iter < options.max_iter; ++iter) {
    const double gap = x.dot(zv) + s.dot(wv);
    const double bound = tau * wv.sum() + (1.0 - tau) * zv.sum();
    const Eigen::VectorXd primal_res = b - z.transpose() * x;
    if (gap <= options.tol * (1.0 + std::abs(bound)) &&
        primal_res.norm() <= 1e-8 * (1.0 + b.norm())) {
      solution.status = QregStatus::converged;
      break;
    }
    const Eigen::VectorXd dual_res = c - z * dual - zv + wv;

    d = ((zv.array() / x.array()) + (wv.array() / s.array())).inverse().matrix();
    normal.factor(d);

    // Solves the reduced Newton system for complementarity targets
    // x_i z_i + rxz_i and s_i w_i + rsw_i.
    auto newton = [&](const Eigen::VectorXd& rxz, const Eigen::VectorXd& rsw) {
      rhat = dual_res.array() - rxz.array() / x.array() + rsw.array() / s.array();
      dual_step = normal.solve(primal_res + z.transpose() * d.cwiseProduct(rhat));
      dx = d.cwiseProduct(z * dual_step - rhat);
      ds = -dx;
      dz = (rxz.array() - zv.array() * dx.array()) / x.array();
      dw = (rsw.array() - wv.array() * ds.array()) / s.array();
    };

    // Predictor.
    newton(-x.cwiseProduct(zv), -s.cwiseProduct(wv));
    double ap = std::min(1.0, kStepFraction * std::min(max_step(x, dx), max_step(s, ds)));
    double ad = std::min(1.0, kStepFraction * std::min(max_step(zv, dz), max_step(wv, dw)));
    const double gap_aff = (x + ap * dx).dot(zv + ad * dz) + (s + ap * ds).dot(wv + ad * dw);
    const double sigma = std::pow(gap_aff / gap, 3.0);
    const double mu = sigma * gap / static_cast<double>(2 * n);

    // Corrector.
    const Eigen::VectorXd rxz = (mu - x.array() * zv.array() - dx.array() * dz.array()).matrix();
    const Eigen::VectorXd rsw = (mu - s.array() * wv.array() - ds.array() * dw.array()).matrix();
    newton(rxz, rsw);
    ap = std::min(1.0, kStepFraction * std::min(max_step(x, dx), max_step(s, ds)));
    ad = std::min(1.0, kStepFraction * std::min(max_step(zv, dz), max_step(wv, dw)));

    x += ap * dx;
    s += ap * ds;
    dual += ad * dual_step;
    zv += ad * dz;
    wv += ad * dw;
  }
  solution.iterations = iter;

  // The primal quantile-regression coefficients are the negated LP duals.
  solution.coefficients = -dual;
  solution.objective = objective(problem, solution.coefficients);

  if (!degenerate) {
    Eigen::VectorXd vertex;
    if (vertex_polish(z, y, solution.coefficients, vertex)) {
      const double vertex_objective = objective(problem, vertex);
      if (vertex_objective <= solution.objective) {
        solution.coefficients = std::move(vertex);
        solution.objective = vertex_objective;
      }
    }
  } else {
    solution.status = QregStatus::degenerate;
  }
  return solution;
}

QregSolution solve_oracle(const QregProblem& problem) {
  validate(problem);
  const auto n = static_cast<int>(problem.design.rows());
  const auto p = static_cast<int>(problem.design.cols());
  if (n > 15 || p > 4) throw Error("instance too large for oracle");

  QregSolution best;
  best.objective = std::numeric_limits<double>::infinity();
  std::vector<int> idx(static_cast<std::size_t>(p));
  std::iota(idx.begin(), idx.end(), 0);
  Eigen::MatrixXd zs(p, p);
  Eigen::VectorXd ys(p);
  int candidates = 0;
  while (true) {
    bool usable = true;
    for (int k = 0; k < p; ++k) {
      const int row = idx[static_cast<std::size_t>(k)];
      if (problem.weights.size() && problem.weights(row) == 0.0) usable = false;
      zs.row(k) = problem.design.row(row);
      ys(k) = problem.response(row);
    }
    if (usable) {
      Eigen::FullPivLU<Eigen::MatrixXd> lu(zs);
      if (lu.isInvertible()) {
        Eigen::VectorXd beta = lu.solve(ys);
        const double value = objective(problem, beta);
        ++candidates;
        if (value < best.objective) {
          best.objective = value;
          best.coefficients = std::move(beta);
        }
      }
    }
    // Next combination in lexicographic order.
    int k = p - 1;
    while (k >= 0 && idx[static_cast<std::size_t>(k)] == n - p + k) --k;
    if (k < 0) break;
    ++idx[static_cast<std::size_t>(k)];
    for (int m = k + 1; m < p; ++m) idx[static_cast<std::size_t>(m)] = idx[static_cast<std::size_t>(m - 1)] + 1;
  }
  if (candidates == 0) throw Error("no nonsingular p-subset: design is rank deficient");
  best.iterations = candidates;
  best.status = QregStatus::converged;
  return best;
}

}  // namespace qfactor
