#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "stgp/errors.hpp"

namespace stgp {

namespace detail {

// Splits each chain column in half, dropping the middle draw when odd.
inline std::vector<Eigen::VectorXd> split_halves(const Eigen::MatrixXd& draws) {
  const Eigen::Index n = draws.rows();
  const Eigen::Index half = n / 2;
  std::vector<Eigen::VectorXd> seqs;
  if (half == 0) return seqs;
  seqs.reserve(static_cast<std::size_t>(2 * draws.cols()));
  for (Eigen::Index c = 0; c < draws.cols(); ++c) {
    seqs.push_back(draws.col(c).head(half));
    seqs.push_back(draws.col(c).tail(half));
  }
  return seqs;
}

inline double seq_mean(const Eigen::VectorXd& x) { return x.mean(); }

inline double seq_var(const Eigen::VectorXd& x) { // ddof = 1
  if (x.size() < 2) return 0.0;
  const double m = x.mean();
  return (x.array() - m).square().sum() / static_cast<double>(x.size() - 1);
}

// Autocovariance at lag t with 1/n normalization.
inline double autocov(const Eigen::VectorXd& x, double mean, Eigen::Index t) {
  const Eigen::Index n = x.size();
  double s = 0.0;
  for (Eigen::Index i = 0; i + t < n; ++i) s += (x[i] - mean) * (x[i + t] - mean);
  return s / static_cast<double>(n);
}

} // namespace detail

// Split-chain potential scale reduction factor, floored at 1. Returns +inf
// when within-sequence variance vanishes while sequences disagree, and for
// non-finite draws.
inline double split_rhat(const Eigen::MatrixXd& draws) {
  if (draws.rows() < 4 || draws.cols() < 1)
    throw validation_error("split_rhat: need at least 4 draws per chain");
  if (!draws.allFinite()) return std::numeric_limits<double>::infinity();
  const auto seqs = detail::split_halves(draws);
  const std::size_t m = seqs.size();
  const double n = static_cast<double>(seqs[0].size());
  double mean_of_means = 0.0, W = 0.0;
  std::vector<double> means(m);
  for (std::size_t k = 0; k < m; ++k) {
    means[k] = detail::seq_mean(seqs[k]);
    mean_of_means += means[k];
    W += detail::seq_var(seqs[k]);
  }
  mean_of_means /= static_cast<double>(m);
  W /= static_cast<double>(m);
  double B = 0.0; // between-sequence variance times n
  for (std::size_t k = 0; k < m; ++k) {
    const double d = means[k] - mean_of_means;
    B += d * d;
  }
  B *= n / std::max<double>(1.0, static_cast<double>(m) - 1.0);
  if (W <= 0.0) return B <= 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  const double var_plus = (n - 1.0) / n * W + B / n;
  return std::max(1.0, std::sqrt(var_plus / W));
}

// Effective sample size over split chains, combining per-sequence
// autocovariances with Geyer's initial monotone positive sequence.
inline double ess_split(const Eigen::MatrixXd& draws) {
  if (draws.rows() < 4 || draws.cols() < 1)
    throw validation_error("ess_split: need at least 4 draws per chain");
  if (!draws.allFinite()) return std::numeric_limits<double>::quiet_NaN();
  const auto seqs = detail::split_halves(draws);
  const std::size_t m = seqs.size();
  const Eigen::Index n = seqs[0].size();
  const double dn = static_cast<double>(n);

  std::vector<double> means(m), acov0(m);
  double mean_var = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    means[k] = detail::seq_mean(seqs[k]);
    acov0[k] = detail::autocov(seqs[k], means[k], 0);
    mean_var += acov0[k] * dn / (dn - 1.0);
  }
  mean_var /= static_cast<double>(m);

  double var_plus = mean_var * (dn - 1.0) / dn;
  if (m > 1) {
    double mm = 0.0;
    for (double v : means) mm += v;
    mm /= static_cast<double>(m);
    double B = 0.0;
    for (double v : means) B += (v - mm) * (v - mm);
    var_plus += B / (static_cast<double>(m) - 1.0);
  }
  if (!(var_plus > 0.0)) return static_cast<double>(draws.rows() * draws.cols());

  auto rho = [&](Eigen::Index t) {
    double ac = 0.0;
    for (std::size_t k = 0; k < m; ++k) ac += detail::autocov(seqs[k], means[k], t);
    ac /= static_cast<double>(m);
    return 1.0 - (mean_var - ac) / var_plus;
  };

  // Geyer pairs P_k = rho(2k) + rho(2k+1): accumulate while positive, then
  // enforce monotone non-increasing pair sums. tau = -1 + 2 sum P_k.
  double pair_sum = 0.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 0; t + 1 < n; t += 2) {
    const double rho_even = t == 0 ? 1.0 : rho(t);
    double pair = rho_even + rho(t + 1);
    if (!(pair > 0.0)) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    pair_sum += pair;
  }
  double tau = -1.0 + 2.0 * pair_sum;
  const double total = static_cast<double>(n * static_cast<Eigen::Index>(m));
  tau = std::max(tau, 1.0 / std::log10(total + 10.0));
  return total / tau;
}

// Monte Carlo standard error of the posterior mean.
inline double mcse_mean(const Eigen::MatrixXd& draws) {
  const double ess = ess_split(draws);
  if (!(ess > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd all(draws.size());
  Eigen::Index k = 0;
  for (Eigen::Index c = 0; c < draws.cols(); ++c)
    for (Eigen::Index i = 0; i < draws.rows(); ++i) all[k++] = draws(i, c);
  const double sd = std::sqrt(detail::seq_var(all));
  return sd / std::sqrt(ess);
}

} // namespace stgp
