#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "stgp/data.hpp"
#include "stgp/diagnostics.hpp"
#include "stgp/errors.hpp"
#include "stgp/likelihoods.hpp"
#include "stgp/model.hpp"
#include "stgp/posterior.hpp"
#include "stgp/util.hpp"

namespace stgp {

// T = sum_i (sqrt(y_i) - sqrt(E_i))^2; robust to small counts.
inline double freeman_tukey(const Eigen::VectorXd& y, const Eigen::VectorXd& expected) {
  if (y.size() != expected.size()) throw validation_error("freeman_tukey: shape mismatch");
  if ((y.array() < 0.0).any()) throw validation_error("freeman_tukey: negative counts");
  if (!(expected.array() > 0.0).all()) throw validation_error("freeman_tukey: expected must be positive");
  return (y.array().sqrt() - expected.array().sqrt()).square().sum();
}

struct tukey_result {
  Eigen::VectorXd obs, sim; // discrepancy per posterior draw
  double p = 0.0;           // mean(obs > sim)
};

// Posterior predictive check: per draw, compare the observed discrepancy to
// the discrepancy of a replicate sampled from the fitted family. forced_yrep
// (draws x cells), when given, replaces the sampled replicates.
inline tukey_result bayesian_pvalue(const latent_count_model& model, const posterior_samples& samples,
                                    int S = 200, std::uint64_t seed = 0,
                                    const Eigen::MatrixXd* forced_yrep = nullptr) {
  if (samples.total_draws() < 1) throw validation_error("bayesian_pvalue: empty posterior");
  latent_count_model local(model);
  const auto idx = thin_indices(samples.n_chains(), samples.n_draws(), S);
  const Eigen::Index n = static_cast<Eigen::Index>(local.cells().size());
  const Eigen::Index Sd = static_cast<Eigen::Index>(idx.size());
  if (forced_yrep && (forced_yrep->rows() != Sd || forced_yrep->cols() != n))
    throw validation_error("bayesian_pvalue: forced replicate matrix has wrong shape");

  Eigen::VectorXd y(n);
  for (Eigen::Index c = 0; c < n; ++c) y[c] = static_cast<double>(local.cell_count(c));

  tukey_result out;
  out.obs.resize(Sd);
  out.sim.resize(Sd);
  Eigen::Index hits = 0;
  for (Eigen::Index s = 0; s < Sd; ++s) {
    const auto [chain, iter] = idx[static_cast<std::size_t>(s)];
    const Eigen::VectorXd row =
        samples.chains[static_cast<std::size_t>(chain)].row(iter).transpose();
    const Eigen::VectorXd z = local.unconstrain(row);
    Eigen::VectorXd f, mu;
    local.latent_field(z, f, mu);
    const obs_family fam = local.family_at(z);

    Eigen::VectorXd expected(n), yrep(n);
    auto rng = substream(seed, 0x74756b65ull + static_cast<std::uint64_t>(s));
    for (Eigen::Index c = 0; c < n; ++c) {
      expected[c] = family_mean(fam, mu[c]);
      yrep[c] = forced_yrep ? (*forced_yrep)(s, c)
                            : static_cast<double>(sample_counts(fam, mu[c], rng));
    }
    out.obs[s] = freeman_tukey(y, expected);
    out.sim[s] = freeman_tukey(yrep, expected);
    if (out.obs[s] > out.sim[s]) ++hits;
  }
  out.p = static_cast<double>(hits) / static_cast<double>(Sd);
  return out;
}

// Energy-form CRPS from two independent predictive samples:
//   mean_a |X_a - y| - (1/2) mean_{a,b} |X_a - X2_b|.
inline double crps_empirical(const std::vector<double>& X, const std::vector<double>& X2, double y) {
  if (X.empty() || X2.empty()) throw validation_error("crps: empty sample");
  double t1 = 0.0;
  for (double x : X) t1 += std::abs(x - y);
  t1 /= static_cast<double>(X.size());
  double t2 = 0.0;
  for (double a : X)
    for (double b : X2) t2 += std::abs(a - b);
  t2 /= static_cast<double>(X.size()) * static_cast<double>(X2.size());
  return t1 - 0.5 * t2;
}

// Splits one predictive sample into halves (first half = X, second = X2).
inline double crps_split(const Eigen::VectorXd& draws, double y) {
  const Eigen::Index S = draws.size();
  if (S < 2) throw validation_error("crps: need at least two draws to split");
  const Eigen::Index h = S / 2;
  std::vector<double> X(draws.data(), draws.data() + h);
  std::vector<double> X2(draws.data() + h, draws.data() + S);
  return crps_empirical(X, X2, y);
}

// Per-cell log pmf under S thinned posterior draws, chain labels kept for
// effective-sample computations.
struct loglik_matrix {
  Eigen::MatrixXd ll;         // S x N, rows grouped by chain
  std::vector<int> chain_ids; // length S
  int n_chains = 0;
  int per_chain = 0;
};

inline loglik_matrix build_loglik_matrix(const latent_count_model& model,
                                         const posterior_samples& samples, int S = 200) {
  latent_count_model local(model);
  const auto idx = thin_indices(samples.n_chains(), samples.n_draws(), S);
  loglik_matrix out;
  out.n_chains = static_cast<int>(samples.n_chains());
  out.per_chain = static_cast<int>(idx.size()) / out.n_chains;
  out.ll.resize(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(local.cells().size()));
  out.chain_ids.reserve(idx.size());
  for (std::size_t s = 0; s < idx.size(); ++s) {
    const auto [chain, iter] = idx[s];
    out.chain_ids.push_back(chain);
    const Eigen::VectorXd row =
        samples.chains[static_cast<std::size_t>(chain)].row(iter).transpose();
    out.ll.row(static_cast<Eigen::Index>(s)) = local.cell_loglik(local.unconstrain(row)).transpose();
  }
  return out;
}

namespace detail {

struct gpd_params {
  double khat = 0.0;  // shape, weakly prior-adjusted
  double sigma = 1.0; // scale
  bool ok = false;
};

// Zhang-Stephens (2009) profile-posterior fit of the generalized Pareto
// distribution to positive exceedances (ascending order).
inline gpd_params gpd_fit(const std::vector<double>& x) {
  gpd_params out;
  const std::size_t n = x.size();
  if (n < 5) return out;
  const double n_d = static_cast<double>(n);
  const std::size_t M = 30 + static_cast<std::size_t>(std::floor(std::sqrt(n_d)));
  const std::size_t quart = static_cast<std::size_t>(std::floor(n_d / 4.0 + 0.5));
  const double xstar = x[quart - 1];
  const double xmax = x[n - 1];
  if (!(xstar > 0.0) || !(xmax > 0.0)) return out;

  std::vector<double> theta(M), lpost(M);
  auto k_of = [&](double th) {
    double s = 0.0;
    for (double xi : x) s += std::log1p(-th * xi);
    return s / n_d;
  };
  for (std::size_t j = 0; j < M; ++j) {
    theta[j] = 1.0 / xmax +
               (1.0 - std::sqrt(static_cast<double>(M) / (static_cast<double>(j) + 0.5))) /
                   (3.0 * xstar);
    const double k = k_of(theta[j]);
    const double l = std::log(-theta[j] / k) - k - 1.0;
    lpost[j] = std::isfinite(l) ? n_d * l : -std::numeric_limits<double>::infinity();
  }
  const double lmax = *std::max_element(lpost.begin(), lpost.end());
  if (!std::isfinite(lmax)) return out;
  double wsum = 0.0, theta_hat = 0.0;
  for (std::size_t j = 0; j < M; ++j) {
    const double w = std::exp(lpost[j] - lmax);
    wsum += w;
    theta_hat += w * theta[j];
  }
  theta_hat /= wsum;
  const double k_raw = k_of(theta_hat);
  if (!std::isfinite(k_raw) || theta_hat == 0.0) return out;
  out.sigma = -k_raw / theta_hat;
  out.khat = (k_raw * n_d + 5.0) / (n_d + 10.0); // weak prior toward 0.5
  out.ok = std::isfinite(out.sigma) && out.sigma > 0.0;
  return out;
}

inline double gpd_quantile(double p, double khat, double sigma) {
  if (std::abs(khat) < 1e-12) return -sigma * std::log1p(-p);
  return sigma / khat * (std::pow(1.0 - p, -khat) - 1.0);
}

} // namespace detail

struct psis_weights {
  Eigen::VectorXd lw; // normalized: logsumexp(lw) = 0
  double khat = 0.0;
  bool truncated_is = false; // tail too short for a Pareto fit
};

// Pareto-smoothed importance weights from unnormalized log ratios. The
// heaviest ceil(min(0.2 S, 3 sqrt(S / r_eff))) ratios are replaced by
// expected order statistics of a generalized Pareto fit, then truncated at
// the raw maximum. Short tails fall back to plain truncated importance
// sampling.
inline psis_weights psis_smooth(const Eigen::VectorXd& log_ratios, double r_eff = 1.0) {
  const Eigen::Index S = log_ratios.size();
  if (S < 2) throw validation_error("psis: need at least two draws");
  if (!(r_eff > 0.0) || !std::isfinite(r_eff)) r_eff = 1.0;

  psis_weights out;
  Eigen::VectorXd lr = log_ratios;
  const double lr_max = lr.maxCoeff();
  lr.array() -= lr_max; // normalization-invariant shift

  // Degenerate spread: uniform weights.
  if (lr.maxCoeff() - lr.minCoeff() <= 0.0) {
    out.lw = Eigen::VectorXd::Constant(S, -std::log(static_cast<double>(S)));
    return out;
  }

  const double S_d = static_cast<double>(S);
  const Eigen::Index tail_len = static_cast<Eigen::Index>(
      std::ceil(std::min(0.2 * S_d, 3.0 * std::sqrt(S_d / r_eff))));

  std::vector<double> lrv(lr.data(), lr.data() + S);
  auto fallback = [&]() {
    std::vector<double> all(lrv);
    const double cutoff = logsumexp(all) - 0.5 * std::log(S_d);
    out.lw = lr.cwiseMin(cutoff);
    out.truncated_is = true;
    out.khat = std::numeric_limits<double>::infinity();
  };

  if (tail_len < 5) {
    fallback();
  } else {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(S));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return lr[a] < lr[b]; });
    const Eigen::Index cut_pos = S - tail_len - 1;
    const double cutoff_lr = lr[order[static_cast<std::size_t>(cut_pos)]];
    const double cutoff_w = std::exp(cutoff_lr);

    std::vector<double> exceed;
    std::vector<Eigen::Index> tail_idx;
    for (Eigen::Index t = cut_pos + 1; t < S; ++t) {
      const Eigen::Index i = order[static_cast<std::size_t>(t)];
      const double ex = std::exp(lr[i]) - cutoff_w;
      if (ex > 0.0) {
        exceed.push_back(ex);
        tail_idx.push_back(i);
      }
    }
    const auto fit = detail::gpd_fit(exceed);
    if (!fit.ok) {
      fallback();
    } else {
      out.khat = fit.khat;
      const double n_tail = static_cast<double>(exceed.size());
      out.lw = lr;
      for (std::size_t j = 0; j < tail_idx.size(); ++j) {
        const double p = (static_cast<double>(j) + 0.5) / n_tail;
        const double w = cutoff_w + detail::gpd_quantile(p, fit.khat, fit.sigma);
        out.lw[tail_idx[j]] = std::min(std::log(w), 0.0); // truncate at raw max (shifted to 0)
      }
    }
  }

  std::vector<double> lws(out.lw.data(), out.lw.data() + S);
  out.lw.array() -= logsumexp(lws);
  return out;
}

struct loo_result {
  double elpd = 0.0, looic = 0.0, p_loo = 0.0;
  Eigen::VectorXd elpd_cell, khat, r_eff;
  int n_high_khat = 0;  // khat > 0.7
  int n_fallback = 0;   // cells that used truncated IS
  std::vector<std::string> warnings;
};

// Importance-sampling leave-one-out over cells: ratios are 1/p(y_n|draw),
// smoothed by PSIS with a relative effective sample size computed from the
// split-chain autocorrelation of exp(ll).
inline loo_result loo_estimate(const loglik_matrix& llm) {
  const Eigen::Index S = llm.ll.rows();
  const Eigen::Index N = llm.ll.cols();
  if (S < 2) throw validation_error("loo: need at least two draws");
  if (llm.n_chains < 1 || llm.per_chain * llm.n_chains != static_cast<int>(S))
    throw validation_error("loo: chain layout does not match the matrix");
  for (int s = 0; s < static_cast<int>(S); ++s)
    if (llm.chain_ids[static_cast<std::size_t>(s)] != s / llm.per_chain)
      throw validation_error("loo: rows must be grouped by chain");

  loo_result out;
  out.elpd_cell.resize(N);
  out.khat.resize(N);
  out.r_eff.resize(N);

  for (Eigen::Index c = 0; c < N; ++c) {
    const Eigen::VectorXd ll = llm.ll.col(c);

    double reff = 1.0;
    if (llm.per_chain >= 4) {
      Eigen::MatrixXd lik(llm.per_chain, llm.n_chains);
      const double shift = ll.maxCoeff();
      for (int ch = 0; ch < llm.n_chains; ++ch)
        for (int i = 0; i < llm.per_chain; ++i)
          lik(i, ch) = std::exp(ll[static_cast<Eigen::Index>(ch) * llm.per_chain + i] - shift);
      const double ess = ess_split(lik);
      if (std::isfinite(ess) && ess > 0.0) reff = ess / static_cast<double>(S);
    }
    out.r_eff[c] = reff;

    const psis_weights w = psis_smooth(-ll, reff);
    if (w.truncated_is) ++out.n_fallback;
    out.khat[c] = w.khat;
    if (std::isfinite(w.khat) && w.khat > 0.7) ++out.n_high_khat;

    std::vector<double> acc(static_cast<std::size_t>(S));
    for (Eigen::Index s = 0; s < S; ++s) acc[static_cast<std::size_t>(s)] = w.lw[s] + ll[s];
    out.elpd_cell[c] = logsumexp(acc); // lw already normalized
  }

  out.elpd = out.elpd_cell.sum();
  out.looic = -2.0 * out.elpd;
  double lpd = 0.0;
  for (Eigen::Index c = 0; c < N; ++c) {
    std::vector<double> col(llm.ll.col(c).data(), llm.ll.col(c).data() + S);
    lpd += logsumexp(col) - std::log(static_cast<double>(S));
  }
  out.p_loo = lpd - out.elpd;
  if (out.n_fallback > 0)
    out.warnings.push_back(std::to_string(out.n_fallback) +
                           " cells had too short a tail for a Pareto fit; used truncated importance sampling");
  if (out.n_high_khat > 0)
    out.warnings.push_back(std::to_string(out.n_high_khat) +
                           " cells have Pareto k > 0.7; elpd may be unreliable there");
  return out;
}

struct score_report {
  std::string model_name;
  double elpd = std::numeric_limits<double>::quiet_NaN();
  double looic = std::numeric_limits<double>::quiet_NaN();
  double p_loo = std::numeric_limits<double>::quiet_NaN();
  double bayes_p = std::numeric_limits<double>::quiet_NaN();
  double crps_mean = std::numeric_limits<double>::quiet_NaN();
  double coverage95 = std::numeric_limits<double>::quiet_NaN();
  std::map<int, double> crps_by_week;
  Eigen::VectorXd pareto_k, tukey_obs, tukey_sim;
  std::uint64_t data_hash = 0;
};

inline void write_score_csv(const std::string& path, const score_report& r) {
  std::ofstream out(path);
  if (!out) throw validation_error(path + ": cannot write");
  out << "metric,value\n";
  out << "model," << r.model_name << '\n';
  out << "elpd," << format_double(r.elpd) << '\n';
  out << "looic," << format_double(r.looic) << '\n';
  out << "p_loo," << format_double(r.p_loo) << '\n';
  out << "bayes_p," << format_double(r.bayes_p) << '\n';
  out << "crps_mean," << format_double(r.crps_mean) << '\n';
  out << "coverage95," << format_double(r.coverage95) << '\n';
  double kmax = 0.0;
  int khigh = 0;
  for (Eigen::Index i = 0; i < r.pareto_k.size(); ++i) {
    if (std::isfinite(r.pareto_k[i])) kmax = std::max(kmax, r.pareto_k[i]);
    if (r.pareto_k[i] > 0.7) ++khigh;
  }
  out << "max_pareto_k," << format_double(r.pareto_k.size() ? kmax : std::numeric_limits<double>::quiet_NaN()) << '\n';
  out << "n_pareto_k_above_0.7," << khigh << '\n';
  out << "dataset_hash," << hex64(r.data_hash) << '\n';
}

inline void write_crps_by_week_csv(const std::string& path, const score_report& r) {
  std::ofstream out(path);
  if (!out) throw validation_error(path + ": cannot write");
  out << "week,crps\n";
  for (const auto& [week, crps] : r.crps_by_week)
    out << week << ',' << format_double(crps) << '\n';
}

inline void write_score_text(std::ostream& out, const score_report& r) {
  out << "model:        " << r.model_name << "\n"
      << "elpd:         " << format_double(r.elpd) << "\n"
      << "looic:        " << format_double(r.looic) << "\n"
      << "p_loo:        " << format_double(r.p_loo) << "\n"
      << "bayes_p:      " << format_double(r.bayes_p) << "\n"
      << "crps (mean):  " << format_double(r.crps_mean) << "\n"
      << "coverage 95%: " << format_double(r.coverage95) << "\n";
}

inline score_report read_score_csv(const std::string& path) {
  const auto t = detail::read_csv(path);
  detail::expect_header(t, {"metric", "value"});
  score_report r;
  for (std::size_t row = 0; row < t.rows.size(); ++row) {
    detail::expect_cols(t, row, 2);
    const std::string& key = t.rows[row][0];
    const std::string& val = t.rows[row][1];
    if (key == "model") r.model_name = val;
    else if (key == "elpd") r.elpd = detail::parse_double(t, row, 1);
    else if (key == "looic") r.looic = detail::parse_double(t, row, 1);
    else if (key == "p_loo") r.p_loo = detail::parse_double(t, row, 1);
    else if (key == "bayes_p") r.bayes_p = detail::parse_double(t, row, 1);
    else if (key == "crps_mean") r.crps_mean = detail::parse_double(t, row, 1);
    else if (key == "coverage95") r.coverage95 = detail::parse_double(t, row, 1);
    else if (key == "dataset_hash") r.data_hash = std::stoull(val, nullptr, 16);
    // other metrics are derived; ignore on read
  }
  return r;
}

// Ranked by looic ascending, stable on ties; refuses reports from different
// datasets when hashes are present.
inline std::vector<score_report> compare_models(std::vector<score_report> reports) {
  if (reports.size() < 2) throw validation_error("compare: need at least two score reports");
  std::uint64_t h = 0;
  for (const auto& r : reports)
    if (r.data_hash != 0) {
      if (h == 0) h = r.data_hash;
      else if (r.data_hash != h)
        throw validation_error("compare: score reports come from different datasets");
    }
  std::stable_sort(reports.begin(), reports.end(),
                   [](const score_report& a, const score_report& b) { return a.looic < b.looic; });
  return reports;
}

inline void write_compare_csv(const std::string& path, const std::vector<score_report>& ranked) {
  std::ofstream out(path);
  if (!out) throw validation_error(path + ": cannot write");
  out << "rank,model,looic,elpd,bayes_p,crps_mean\n";
  for (std::size_t i = 0; i < ranked.size(); ++i)
    out << (i + 1) << ',' << ranked[i].model_name << ',' << format_double(ranked[i].looic) << ','
        << format_double(ranked[i].elpd) << ',' << format_double(ranked[i].bayes_p) << ','
        << format_double(ranked[i].crps_mean) << '\n';
}

} // namespace stgp
