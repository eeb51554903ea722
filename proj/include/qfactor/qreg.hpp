#pragma once

#include <string_view>

#include <Eigen/Dense>

namespace qfactor {

/// Quantile check function rho_tau(u) = u * (tau - 1{u < 0}).
inline double check_loss(double u, double tau) { return u * (tau - (u < 0.0 ? 1.0 : 0.0)); }

/// min_beta sum_i w_i * rho_tau(y_i - Z_i beta)
struct QregProblem {
  Eigen::MatrixXd design;    // N x p
  Eigen::VectorXd response;  // N
  double tau = 0.5;
  Eigen::VectorXd weights;   // empty means all ones
};

enum class QregStatus { converged, max_iter, degenerate };

std::string_view to_string(QregStatus status);

struct QregSolution {
  Eigen::VectorXd coefficients;
  double objective = 0.0;
  int iterations = 0;
  QregStatus status = QregStatus::converged;
};

struct QregOptions {
  double tol = 1e-9;  // duality gap / (1 + |objective|)
  int max_iter = 200;
};

/// Throws Error if the problem violates its invariants.
void validate(const QregProblem& problem);

/// Weighted check loss of the residuals y - Z beta.
double objective(const QregProblem& problem, const Eigen::VectorXd& beta);

/// Primal-dual (Mehrotra predictor-corrector) interior point method on the
/// bounded dual LP
///   max y'a  s.t.  Z'a = (1 - tau) Z'1,  0 <= a <= 1,
/// followed by a vertex polish step. A rank-deficient design is solved with
/// 1e-10 diagonal jitter on the normal equations (least-norm optimum) and
/// reported as QregStatus::degenerate.
QregSolution solve(const QregProblem& problem, const QregOptions& options = {});

/// Exact optimum by enumerating every p-subset of observations and solving
/// the p x p interpolation system. Only for N <= 15 and p <= 4.
QregSolution solve_oracle(const QregProblem& problem);

}  // namespace qfactor
