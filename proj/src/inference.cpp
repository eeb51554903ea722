#include "qfactor/inference.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "qfactor/common.hpp"

namespace qfactor {

OrderingStrategy parse_ordering(std::string_view text) {
  if (text == "given") return OrderingStrategy::as_given();
  if (text == "pc1") return OrderingStrategy::by_pc1();
  constexpr std::string_view prefix = "covariate:";
  if (text.substr(0, prefix.size()) == prefix) {
    const auto rest = text.substr(prefix.size());
    int j = 0;
    const auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), j);
    if (ec == std::errc() && ptr == rest.data() + rest.size() && j >= 1) return OrderingStrategy::by_covariate(j - 1);
  }
  throw Error(fmt::format("unknown ordering '{}' (expected given, covariate:<j> or pc1)", text));
}

std::string to_string(const OrderingStrategy& s) {
  switch (s.kind) {
    case OrderingStrategy::Kind::as_given: return "given";
    case OrderingStrategy::Kind::by_covariate: return fmt::format("covariate:{}", s.covariate + 1);
    case OrderingStrategy::Kind::by_pc1: return "pc1";
  }
  return "given";
}

Eigen::VectorXd pc1_direction(const Eigen::MatrixXd& x) {
  const auto n = x.rows();
  if (n < 2 || x.cols() < 1) throw Error("pc1 ordering needs at least 2 units and 1 covariate");
  Eigen::MatrixXd z = x.rowwise() - x.colwise().mean();
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double sd = std::sqrt(z.col(j).squaredNorm() / static_cast<double>(n - 1));
    if (!(sd > 0.0)) throw Error(fmt::format("constant covariate {} cannot be standardized", j + 1));
    z.col(j) /= sd;
  }
  const Eigen::MatrixXd cov = z.transpose() * z / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::VectorXd v = eig.eigenvectors().col(cov.cols() - 1);
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v(arg) < 0.0) v = -v;
  return v;
}

std::vector<int> order_units(const Eigen::MatrixXd& x, const OrderingStrategy& strategy) {
  const auto n = static_cast<int>(x.rows());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Eigen::VectorXd key;
  switch (strategy.kind) {
    case OrderingStrategy::Kind::as_given:
      return perm;
    case OrderingStrategy::Kind::by_covariate:
      if (strategy.covariate < 0 || strategy.covariate >= x.cols()) {
        throw Error(fmt::format("ordering covariate {} out of range (J={})", strategy.covariate + 1, x.cols()));
      }
      key = x.col(strategy.covariate);
      break;
    case OrderingStrategy::Kind::by_pc1: {
      const Eigen::VectorXd v = pc1_direction(x);
      const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
      Eigen::VectorXd scale(x.cols());
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        scale(j) = std::sqrt(centered.col(j).squaredNorm() / static_cast<double>(n - 1));
      }
      key = centered * v.cwiseQuotient(scale);
      break;
    }
  }
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) { return key(a) < key(b); });
  return perm;
}

double default_bandwidth(int n_units, double kappa) {
  if (n_units < 1) throw Error("bandwidth needs N >= 1");
  if (!(kappa > 0.0)) throw Error("kappa must be positive");
  return kappa * std::pow(static_cast<double>(n_units), -0.2);
}

Eigen::MatrixXd powell_lambda(const Eigen::MatrixXd& design, const Eigen::VectorXd& residuals, double h) {
  if (!(h > 0.0)) throw Error(fmt::format("bandwidth h must be positive (got {})", h));
  if (design.rows() != residuals.size()) throw Error("design and residuals differ in length");
  const auto n = design.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(design.cols(), design.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(residuals(i) / h) <= 1.0) out.selfadjointView<Eigen::Lower>().rankUpdate(design.row(i).transpose(), 0.5);
  }
  out = out.selfadjointView<Eigen::Lower>();
  return out / (static_cast<double>(n) * h);
}

LambdaEstimate estimate_lambda(const FittedModel& fitted, int t, double h) {
  if (t < 0 || t >= fitted.n_periods()) throw Error(fmt::format("period index {} out of range", t));
  LambdaEstimate out;
  out.t = t;
  out.h = h;
  const Eigen::VectorXd resid = fitted.residuals().col(t);
  out.matrix = powell_lambda(fitted.design_matrix(), resid, h);
  for (Eigen::Index i = 0; i < resid.size(); ++i) out.included += std::abs(resid(i) / h) <= 1.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.matrix, Eigen::EigenvaluesOnly);
  const double top = eig.eigenvalues().maxCoeff();
  out.singular_warning = out.included == 0 || !(eig.eigenvalues().minCoeff() > 1e-12 * top);
  return out;
}

namespace {

// Cross-term weights K*(d/M) for d >= 1; the d = 0 term is the separate
// tau(1-tau) piece.
ToeplitzOperator cross_operator(int n, double b, HacKernel kernel) {
  if (!(b > 0.0 && b <= 1.0)) throw Error(fmt::format("b must lie in (0,1] (got {})", b));
  Eigen::VectorXd w = lag_weights(kernel, n, b * n);
  w(0) = 0.0;
  return ToeplitzOperator(std::move(w));
}

Eigen::MatrixXd hac_with(const ToeplitzOperator& op, const Eigen::MatrixXd& design, const Eigen::VectorXd& residuals,
                         double tau) {
  const auto n = static_cast<double>(design.rows());
  Eigen::MatrixXd v = design;
  for (Eigen::Index i = 0; i < design.rows(); ++i) v.row(i) *= tau - (residuals(i) < 0.0 ? 1.0 : 0.0);
  Eigen::MatrixXd omega = tau * (1.0 - tau) * (design.transpose() * design) / n + op.quadratic_form(v) / n;
  return 0.5 * (omega + omega.transpose());
}

}  // namespace

Eigen::MatrixXd hac_period(const Eigen::MatrixXd& design, const Eigen::VectorXd& residuals, double tau, double b,
                           HacKernel kernel) {
  if (design.rows() != residuals.size()) throw Error("design and residuals differ in length");
  return hac_with(cross_operator(static_cast<int>(design.rows()), b, kernel), design, residuals, tau);
}

OmegaEstimate estimate_omega(const FittedModel& fitted, const std::vector<int>& ordering, double b, HacKernel kernel) {
  const int n = fitted.n_units();
  if (static_cast<int>(ordering.size()) != n) throw Error("ordering length does not match N");
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (int k : ordering) {
    if (k < 0 || k >= n || seen[static_cast<std::size_t>(k)]) throw Error("ordering is not a permutation");
    seen[static_cast<std::size_t>(k)] = 1;
  }
  const auto op = cross_operator(n, b, kernel);
  const Eigen::MatrixXd g = fitted.design_matrix();
  Eigen::MatrixXd g_ordered(n, g.cols());
  for (int k = 0; k < n; ++k) g_ordered.row(k) = g.row(ordering[static_cast<std::size_t>(k)]);

  OmegaEstimate out;
  out.b = b;
  out.kernel = kernel;
  out.ordering = ordering;
  out.per_period.resize(static_cast<std::size_t>(fitted.n_periods()));
  parallel_for(out.per_period.size(), [&](std::size_t t) {
    Eigen::VectorXd e(n);
    for (int k = 0; k < n; ++k) e(k) = fitted.residuals()(ordering[static_cast<std::size_t>(k)], static_cast<Eigen::Index>(t));
    out.per_period[t] = hac_with(op, g_ordered, e, fitted.tau());
  });
  out.averaged = Eigen::MatrixXd::Zero(g.cols(), g.cols());
  for (const auto& m : out.per_period) out.averaged += m;
  out.averaged /= static_cast<double>(out.per_period.size());
  return out;
}

namespace {

Eigen::MatrixXd middle_matrix(double tau, const Eigen::MatrixXd& R, const Eigen::MatrixXd& lambda,
                              const Eigen::MatrixXd& omega) {
  const auto p = lambda.rows();
  if (lambda.cols() != p || omega.rows() != p || omega.cols() != p || R.cols() != p) {
    throw Error("restriction, Lambda and Omega dimensions disagree");
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(lambda);
  if (!lu.isInvertible()) throw Error("Lambda estimate is singular");
  const Eigen::MatrixXd a = lu.solve(R.transpose());  // Lambda^-1 R'
  Eigen::MatrixXd mid = tau * (1.0 - tau) * a.transpose() * omega * a;
  mid = 0.5 * (mid + mid.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(mid, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 1e-14 * std::max(hi, 0.0)) || !(hi > 0.0)) {
    throw Error(fmt::format("singular middle matrix (condition number {:.3g})", lo > 0.0 ? hi / lo : INFINITY));
  }
  return mid;
}

void check_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw Error(fmt::format("tau must lie in (0,1) (got {})", tau));
}

}  // namespace

double f_statistic_value(int n_units, double tau, const Eigen::MatrixXd& R, const Eigen::VectorXd& r,
                         const Eigen::VectorXd& f, const Eigen::MatrixXd& lambda, const Eigen::MatrixXd& omega) {
  check_tau(tau);
  const auto q = R.rows();
  if (q < 1 || r.size() != q || f.size() != R.cols()) throw Error("restriction dimensions disagree");
  if (Eigen::FullPivLU<Eigen::MatrixXd>(R).rank() != q) throw Error("restriction matrix R must have full row rank");
  const Eigen::MatrixXd mid = middle_matrix(tau, R, lambda, omega);
  const Eigen::LLT<Eigen::MatrixXd> llt(mid);
  if (llt.info() != Eigen::Success) throw Error("estimated covariance of R f is not positive definite");
  const Eigen::VectorXd diff = R * f - r;
  return n_units * diff.dot(llt.solve(diff)) / static_cast<double>(q);
}

double t_statistic_value(int n_units, double tau, const Eigen::RowVectorXd& R, double r, const Eigen::VectorXd& f,
                         const Eigen::MatrixXd& lambda, const Eigen::MatrixXd& omega) {
  check_tau(tau);
  if (f.size() != R.size()) throw Error("restriction dimensions disagree");
  if (R.cwiseAbs().maxCoeff() == 0.0) throw Error("restriction matrix R must have full row rank");
  const Eigen::MatrixXd mid = middle_matrix(tau, R, lambda, omega);
  if (!(mid(0, 0) > 0.0)) throw Error("estimated variance of R f is not positive");
  return std::sqrt(static_cast<double>(n_units)) * (R.dot(f) - r) / std::sqrt(mid(0, 0));
}

namespace {

FixedBTest base_test(const FittedModel& fitted, int t, const LambdaEstimate& lambda, const OmegaEstimate& omega) {
  if (t < 0 || t >= fitted.n_periods()) throw Error(fmt::format("period index {} out of range", t));
  if (lambda.t != t) throw Error(fmt::format("Lambda estimate is for period {}, test for period {}", lambda.t, t));
  FixedBTest out;
  out.t = t;
  out.b = omega.b;
  out.kernel = omega.kernel;
  out.tau = fitted.tau();
  return out;
}

void attach(FixedBTest& test, const CriticalValueTable* table, int q) {
  if (!table) return;
  if (table->kernel != test.kernel || table->b != test.b || table->q != q) {
    throw Error(fmt::format("critical-value table ({}, b={}, q={}) does not match the test ({}, b={}, q={})",
                            to_string(table->kernel), table->b, table->q, to_string(test.kernel), test.b, q));
  }
  const auto pv = lookup_pvalue(*table, test.statistic, test.tau, test.kind);
  test.p_value = pv.p_value;
  test.p_value_upper_bound = pv.upper_bound;
  test.critical_values = pv.critical_values;
  test.has_p_value = true;
}

}  // namespace

FixedBTest f_statistic(const FittedModel& fitted, const Eigen::MatrixXd& R, const Eigen::VectorXd& r, int t,
                       const LambdaEstimate& lambda, const OmegaEstimate& omega, const CriticalValueTable* table) {
  auto out = base_test(fitted, t, lambda, omega);
  out.kind = StatisticKind::F;
  out.R = R;
  out.r = r;
  out.statistic = f_statistic_value(fitted.n_units(), fitted.tau(), R, r, fitted.factors().row(t).transpose(),
                                    lambda.matrix, omega.averaged);
  attach(out, table, static_cast<int>(R.rows()));
  return out;
}

FixedBTest t_statistic(const FittedModel& fitted, const Eigen::RowVectorXd& R, double r, int t,
                       const LambdaEstimate& lambda, const OmegaEstimate& omega, const CriticalValueTable* table) {
  auto out = base_test(fitted, t, lambda, omega);
  out.kind = StatisticKind::t;
  out.R = R;
  out.r = Eigen::VectorXd::Constant(1, r);
  out.statistic = t_statistic_value(fitted.n_units(), fitted.tau(), R, r, fitted.factors().row(t).transpose(),
                                    lambda.matrix, omega.averaged);
  attach(out, table, 1);
  return out;
}

std::vector<FactorSignificance> summarize_tests(const std::vector<std::string>& names, const Eigen::MatrixXd& factors,
                                                const Eigen::MatrixXd& statistics, const Eigen::MatrixXd& p_values,
                                                double critical, double annualization) {
  const auto T = factors.rows();
  if (T < 2) throw Error("significance summary needs at least 2 periods");
  if (statistics.rows() != T || p_values.rows() != T || statistics.cols() != factors.cols() ||
      p_values.cols() != factors.cols() || static_cast<Eigen::Index>(names.size()) != factors.cols()) {
    throw Error("significance summary inputs disagree in shape");
  }
  if (!(annualization > 0.0)) throw Error("annualization factor must be positive");
  std::vector<FactorSignificance> out;
  for (Eigen::Index k = 0; k < factors.cols(); ++k) {
    FactorSignificance s;
    s.factor = names[static_cast<std::size_t>(k)];
    const Eigen::VectorXd col = factors.col(k);
    const double var = (col.array() - col.mean()).square().sum() / static_cast<double>(T - 1);
    s.annualized_vol = std::sqrt(var * annualization);
    int hits = 0;
    for (Eigen::Index t = 0; t < T; ++t) hits += std::abs(statistics(t, k)) > critical;
    s.pct_significant = 100.0 * hits / static_cast<double>(T);
    std::vector<double> ps(p_values.col(k).data(), p_values.col(k).data() + T);
    std::sort(ps.begin(), ps.end());
    const auto mid = static_cast<std::size_t>(T / 2);
    s.median_p = T % 2 == 1 ? ps[mid] : 0.5 * (ps[mid - 1] + ps[mid]);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<FactorSignificance> significance_summary(const FittedModel& fitted, const InferenceConfig& config,
                                                     const CriticalValueTable& table) {
  const int T = fitted.n_periods();
  const int p = fitted.n_characteristics() + 1;
  if (T < 2) throw Error("significance summary needs at least 2 periods");
  const auto ordering = order_units(fitted.covariates(), config.ordering);
  const auto omega = estimate_omega(fitted, ordering, config.b, config.kernel);
  const double h = default_bandwidth(fitted.n_units(), config.kappa);
  const double critical = critical_value(table, config.level, fitted.tau(), StatisticKind::t);

  Eigen::MatrixXd stats(T, p), pvals(T, p);
  for (int t = 0; t < T; ++t) {
    const auto lambda = estimate_lambda(fitted, t, h);
    for (int k = 0; k < p; ++k) {
      Eigen::RowVectorXd R = Eigen::RowVectorXd::Zero(p);
      R(k) = 1.0;
      try {
        const auto test = t_statistic(fitted, R, 0.0, t, lambda, omega, &table);
        stats(t, k) = test.statistic;
        pvals(t, k) = test.p_value;
      } catch (const Error& e) {
        throw Error(fmt::format("t test for factor {} in period {}: {}", k, t + 1, e.what()));
      }
    }
  }
  std::vector<std::string> names{"intercept"};
  for (const auto& n : fitted.characteristic_names()) names.push_back(n);
  return summarize_tests(names, fitted.factors(), stats, pvals, critical, config.annualization);
}

double presence_diagnostic(const InitialFit& initial, int j) {
  if (j < 0 || j >= initial.mean_components.cols()) throw Error(fmt::format("characteristic index {} out of range", j));
  return initial.mean_components.col(j).squaredNorm() / static_cast<double>(initial.mean_components.rows());
}

}  // namespace qfactor
