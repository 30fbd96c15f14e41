#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "stgp/data.hpp"
#include "stgp/gp.hpp"
#include "stgp/kernels.hpp"
#include "stgp/rng.hpp"

namespace testutil {

// Random composite kernel over panel inputs (week, lon, lat). Sums and
// products of valid trees stay positive semi-definite, so any draw is a
// legal covariance. Periodic stays on the 1-D week axis.
inline stgp::kernel_expr random_kernel_tree(std::mt19937_64& rng, int depth) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto positive = [&](double lo, double hi) { return lo + (hi - lo) * unif(rng); };
  if (depth <= 0 || unif(rng) < 0.35) {
    const int pick = static_cast<int>(unif(rng) * 5.0);
    const bool time_axis = unif(rng) < 0.5;
    const std::vector<int> dims = time_axis ? std::vector<int>{0} : std::vector<int>{1, 2};
    const double var = positive(0.2, 3.0);
    const double len = positive(0.3, 5.0);
    switch (pick) {
      case 0: return stgp::k_exponential(var, len, dims);
      case 1: return stgp::k_matern32(var, len, dims);
      case 2: return stgp::k_rbf(var, len, dims);
      case 3: return stgp::k_periodic(var, len, positive(2.0, 60.0), {0});
      default: return stgp::k_bias(var);
    }
  }
  auto left = random_kernel_tree(rng, depth - 1);
  auto right = random_kernel_tree(rng, depth - 1);
  return unif(rng) < 0.5 ? stgp::k_sum(left, right) : stgp::k_product(left, right);
}

inline Eigen::MatrixXd random_inputs(std::mt19937_64& rng, Eigen::Index n) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::MatrixXd X(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = 52.0 * unif(rng);
    X(i, 1) = 3.0 * unif(rng);
    X(i, 2) = 3.0 * unif(rng);
  }
  return X;
}

// Dense conditioning oracle: jittered joint solve with a general-purpose
// factorization, no triangular shortcuts.
struct brute_moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline brute_moments brute_force_condition(const stgp::kernel_expr& expr, const Eigen::MatrixXd& X,
                                           const Eigen::VectorXd& f, const Eigen::MatrixXd& Xs,
                                           double mean_const, double jitter_factor) {
  const Eigen::MatrixXd K = stgp::eval_gram(expr, X);
  const Eigen::MatrixXd Ks = stgp::eval_gram(expr, X, Xs);
  const Eigen::MatrixXd Kss = stgp::eval_gram(expr, Xs);
  Eigen::MatrixXd Kj = K;
  Kj.diagonal().array() += jitter_factor * K.diagonal().mean();
  const Eigen::LDLT<Eigen::MatrixXd> solver(Kj);
  brute_moments out;
  out.mean = Eigen::VectorXd::Constant(Xs.rows(), mean_const) +
             Ks.transpose() * solver.solve((f.array() - mean_const).matrix());
  out.cov = Kss - Ks.transpose() * solver.solve(Ks);
  return out;
}

// Small fully observed panel with deterministic synthetic counts; weeks are
// 1..W and ids zero-padded.
inline stgp::dataset tiny_panel(Eigen::Index n_loc, Eigen::Index n_weeks, std::uint64_t seed = 7) {
  stgp::dataset d;
  std::mt19937_64 rng = stgp::substream(seed, 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (Eigen::Index i = 0; i < n_loc; ++i) {
    stgp::location loc;
    loc.id = "L" + std::string(i + 1 < 10 ? "0" : "") + std::to_string(i + 1);
    loc.lon = 3.0 * unif(rng);
    loc.lat = 3.0 * unif(rng);
    d.locations.push_back(loc);
  }
  for (Eigen::Index j = 0; j < n_weeks; ++j) d.weeks.push_back(static_cast<int>(j) + 1);
  d.counts.resize(n_loc, n_weeks);
  d.observed.setConstant(n_loc, n_weeks, true);
  d.populations.resize(n_loc, n_weeks);
  for (Eigen::Index i = 0; i < n_loc; ++i) {
    const double pop = 5e4 + 1.5e5 * unif(rng);
    for (Eigen::Index j = 0; j < n_weeks; ++j) {
      d.populations(i, j) = pop;
      d.counts(i, j) = static_cast<std::int64_t>((i * 7 + j * 3) % 11);
    }
  }
  return d;
}

// Conjugate normal-normal location model with known observation sd: exact
// posterior and exact leave-one-out predictive densities.
struct conjugate_normal {
  Eigen::VectorXd y;
  double obs_sd = 1.0;
  double prior_mean = 0.0;
  double prior_sd = 1.0;

  void posterior(double& mean, double& sd) const { posterior_excluding(-1, mean, sd); }

  void posterior_excluding(Eigen::Index skip, double& mean, double& sd) const {
    const double prec0 = 1.0 / (prior_sd * prior_sd);
    const double preco = 1.0 / (obs_sd * obs_sd);
    double prec = prec0, num = prior_mean * prec0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (i == skip) continue;
      prec += preco;
      num += y[i] * preco;
    }
    mean = num / prec;
    sd = std::sqrt(1.0 / prec);
  }

  double exact_loo_elpd() const {
    double total = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      double m, s;
      posterior_excluding(i, m, s);
      const double var = s * s + obs_sd * obs_sd;
      const double resid = y[i] - m;
      total += -0.5 * std::log(2.0 * M_PI * var) - 0.5 * resid * resid / var;
    }
    return total;
  }
};

} // namespace testutil
