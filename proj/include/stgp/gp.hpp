#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <string>
#include <vector>

#include "stgp/data.hpp"
#include "stgp/errors.hpp"
#include "stgp/kernels.hpp"
#include "stgp/util.hpp"

namespace stgp {

// Latent GP machinery: stabilized Cholesky factorization, grid inducing-input
// selection, the low-rank latent projection f = K_nm K_mm^{-1} u with
// whitened u = L v, and exact Gaussian conditioning for reference use.

struct chol_result {
  Eigen::MatrixXd L;    // lower factor of K + jitter*I
  double jitter = 0.0;  // absolute jitter added to the diagonal
  double factor = 0.0;  // jitter / mean(diag K)
};

// Duplicate space-time coordinates make these Grams near-singular; escalate a
// diagonal jitter from 1e-10*mean(diag) by decades up to 1e-2*mean(diag).
inline chol_result chol_with_jitter(const Eigen::MatrixXd& K, double start_factor = 1e-10,
                                    double max_factor = 1e-2) {
  if (K.rows() != K.cols()) throw validation_error("chol_with_jitter: matrix not square");
  // LLT can report success on NaN input, so reject it up front
  if (!K.allFinite()) throw numerical_error("chol_with_jitter: matrix has non-finite entries");
  const double scale = K.diagonal().mean();
  Eigen::LLT<Eigen::MatrixXd> llt;
  for (double factor = start_factor; factor <= max_factor * (1.0 + 1e-12); factor *= 10.0) {
    const double jitter = factor * scale;
    llt.compute(K + jitter * Eigen::MatrixXd::Identity(K.rows(), K.cols()));
    if (llt.info() == Eigen::Success)
      return {Eigen::MatrixXd(llt.matrixL()), jitter, factor};
  }
  throw numerical_error("Cholesky failed after escalating jitter to " +
                        format_double(max_factor * scale) + " (factor " + format_double(max_factor) +
                        " of mean diagonal " + format_double(scale) + ")");
}

struct inducing_grid {
  std::vector<int> week_positions; // indices into the dataset week vector
  Eigen::MatrixXd points;          // M x 3, location-major: m = loc * n_sel_weeks + w
  int n_locations = 0;
  int n_sel_weeks = 0;

  Eigen::Index size() const { return points.rows(); }
};

// Keeps every location and samples weeks by position: the first, every
// stride-th after it, and the final week when requested.
inline inducing_grid select_inducing_grid(const std::vector<int>& weeks,
                                          const std::vector<location>& locations, int stride,
                                          bool include_final) {
  if (weeks.empty()) throw validation_error("select_inducing_grid: no weeks");
  if (locations.empty()) throw validation_error("select_inducing_grid: no locations");
  if (stride < 1) throw validation_error("select_inducing_grid: stride must be >= 1");

  inducing_grid g;
  for (std::size_t j = 0; j < weeks.size(); j += static_cast<std::size_t>(stride))
    g.week_positions.push_back(static_cast<int>(j));
  const int last = static_cast<int>(weeks.size()) - 1;
  if (include_final && g.week_positions.back() != last) g.week_positions.push_back(last);

  g.n_locations = static_cast<int>(locations.size());
  g.n_sel_weeks = static_cast<int>(g.week_positions.size());
  g.points.resize(static_cast<Eigen::Index>(g.n_locations) * g.n_sel_weeks, 3);
  Eigen::Index m = 0;
  for (const auto& L : locations)
    for (int jp : g.week_positions) {
      g.points(m, 0) = static_cast<double>(weeks[static_cast<std::size_t>(jp)]);
      g.points(m, 1) = L.lon;
      g.points(m, 2) = L.lat;
      ++m;
    }
  return g;
}

// f = K_nm K_mm^{-1} u with u = L v; K_mm^{-1} L = L^{-T}, so one triangular
// solve suffices and no inverse is ever formed. Under v ~ N(0, I) the
// resulting f has covariance Q_nn = K_nm K_mm^{-1} K_mn.
inline Eigen::VectorXd sor_project(const Eigen::VectorXd& v, const Eigen::MatrixXd& L,
                                   const Eigen::MatrixXd& Knm) {
  if (v.size() != L.rows()) throw validation_error("sor_project: latent size mismatch");
  if (Knm.cols() != L.rows()) throw validation_error("sor_project: Gram shape mismatch");
  const Eigen::VectorXd u = L.transpose().triangularView<Eigen::Upper>().solve(v);
  return Knm * u;
}

inline Eigen::VectorXd sor_project(const Eigen::VectorXd& v, const inducing_grid& grid,
                                   const Eigen::MatrixXd& X_train, const kernel_expr& expr) {
  const Eigen::MatrixXd Kmm = eval_gram(expr, grid.points);
  const chol_result ch = chol_with_jitter(Kmm);
  const Eigen::MatrixXd Knm = eval_gram(expr, X_train, grid.points);
  return sor_project(v, ch.L, Knm);
}

struct predictive_moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Joint-Gaussian conditioning with a constant mean function, one Cholesky of
// the training Gram and triangular solves only. Empty X returns the prior.
inline predictive_moments exact_condition(const kernel_expr& expr, const Eigen::MatrixXd& X,
                                          const Eigen::VectorXd& f, const Eigen::MatrixXd& X_star,
                                          double mean_const = 0.0, double fixed_jitter_factor = -1.0) {
  predictive_moments out;
  const Eigen::MatrixXd Kss = eval_gram(expr, X_star);
  if (X.rows() == 0) {
    out.mean = Eigen::VectorXd::Constant(X_star.rows(), mean_const);
    out.cov = Kss;
    return out;
  }
  if (f.size() != X.rows()) throw validation_error("exact_condition: f length mismatch");

  const Eigen::MatrixXd K = eval_gram(expr, X);
  chol_result ch;
  if (fixed_jitter_factor > 0.0)
    ch = chol_with_jitter(K, fixed_jitter_factor, fixed_jitter_factor);
  else
    ch = chol_with_jitter(K);

  const Eigen::MatrixXd Ks = eval_gram(expr, X, X_star); // n x n*
  const Eigen::MatrixXd A = ch.L.triangularView<Eigen::Lower>().solve(Ks);
  const Eigen::VectorXd b =
      ch.L.triangularView<Eigen::Lower>().solve((f.array() - mean_const).matrix());
  out.mean = Eigen::VectorXd::Constant(X_star.rows(), mean_const) + A.transpose() * b;
  Eigen::MatrixXd cov = Kss - A.transpose() * A;
  out.cov = 0.5 * (cov + cov.transpose());
  return out;
}

// Diagonal of the low-rank predictive covariance Q** = K*m K_mm^{-1} K_m*,
// and the residual K** - Q** the projection truncates (clamped at zero).
inline Eigen::VectorXd sor_q_diag(const Eigen::MatrixXd& L, const Eigen::MatrixXd& Ksm) {
  const Eigen::MatrixXd A = L.triangularView<Eigen::Lower>().solve(Ksm.transpose()); // M x n*
  return A.colwise().squaredNorm();
}

inline Eigen::VectorXd sor_residual_var(const kernel_expr& expr, const Eigen::MatrixXd& L,
                                        const Eigen::MatrixXd& Ksm, const Eigen::MatrixXd& X_star) {
  Eigen::VectorXd prior(X_star.rows());
  for (Eigen::Index i = 0; i < X_star.rows(); ++i)
    prior[i] = detail::eval_node(*expr, X_star, i, X_star, i);
  return (prior - sor_q_diag(L, Ksm)).cwiseMax(0.0);
}

} // namespace stgp
