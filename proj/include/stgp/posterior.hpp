#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "stgp/data.hpp"
#include "stgp/diagnostics.hpp"
#include "stgp/errors.hpp"
#include "stgp/hmc.hpp"
#include "stgp/model.hpp"
#include "stgp/util.hpp"

namespace stgp {

struct summary_row {
  std::string name;
  double mean = 0.0, q025 = 0.0, q50 = 0.0, q975 = 0.0, rhat = 0.0;
};

// Posterior draws on the constrained (reporting) scale, kept per chain so
// convergence diagnostics stay computable after a round-trip through disk.
struct posterior_samples {
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> chains; // each n_draws x n_params

  Eigen::Index n_chains() const { return static_cast<Eigen::Index>(chains.size()); }
  Eigen::Index n_draws() const { return chains.empty() ? 0 : chains.front().rows(); }
  Eigen::Index n_params() const { return static_cast<Eigen::Index>(names.size()); }
  Eigen::Index total_draws() const { return n_chains() * n_draws(); }

  int param_index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }

  // draws x chains layout for one coordinate, as diagnostics expect.
  Eigen::MatrixXd coord_matrix(Eigen::Index j) const {
    Eigen::MatrixXd m(n_draws(), n_chains());
    for (Eigen::Index c = 0; c < n_chains(); ++c) m.col(c) = chains[static_cast<std::size_t>(c)].col(j);
    return m;
  }

  std::vector<double> coord_flat(Eigen::Index j) const {
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(total_draws()));
    for (const auto& ch : chains)
      for (Eigen::Index i = 0; i < ch.rows(); ++i) v.push_back(ch(i, j));
    return v;
  }

  std::vector<summary_row> summarize() const {
    std::vector<summary_row> rows;
    rows.reserve(names.size());
    for (Eigen::Index j = 0; j < n_params(); ++j) {
      summary_row r;
      r.name = names[static_cast<std::size_t>(j)];
      const auto flat = coord_flat(j);
      double s = 0.0;
      for (double x : flat) s += x;
      r.mean = s / static_cast<double>(flat.size());
      r.q025 = quantile(flat, 0.025);
      r.q50 = quantile(flat, 0.5);
      r.q975 = quantile(flat, 0.975);
      r.rhat = n_draws() >= 4 ? split_rhat(coord_matrix(j)) : std::numeric_limits<double>::quiet_NaN();
      rows.push_back(std::move(r));
    }
    return rows;
  }

  double max_rhat() const {
    double m = 1.0;
    for (Eigen::Index j = 0; j < n_params(); ++j) m = std::max(m, split_rhat(coord_matrix(j)));
    return m;
  }
};

inline void write_samples_csv(const std::string& path, const posterior_samples& s) {
  std::ofstream out(path);
  if (!out) throw validation_error(path + ": cannot write");
  out << "chain,iteration";
  for (const auto& n : s.names) out << ',' << n;
  out << '\n';
  for (Eigen::Index c = 0; c < s.n_chains(); ++c) {
    const auto& m = s.chains[static_cast<std::size_t>(c)];
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      out << c << ',' << i;
      for (Eigen::Index j = 0; j < m.cols(); ++j) out << ',' << format_double(m(i, j));
      out << '\n';
    }
  }
}

inline posterior_samples read_samples_csv(const std::string& path) {
  const auto t = detail::read_csv(path);
  if (t.header.size() < 3 || t.header[0] != "chain" || t.header[1] != "iteration")
    throw validation_error(path + ": expected header starting 'chain,iteration'");
  posterior_samples s;
  s.names.assign(t.header.begin() + 2, t.header.end());
  const std::size_t P = s.names.size();

  std::vector<std::vector<Eigen::VectorXd>> rows_by_chain;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    detail::expect_cols(t, r, P + 2);
    const std::int64_t chain = detail::parse_int(t, r, 0);
    const std::int64_t iter = detail::parse_int(t, r, 1);
    if (chain < 0 || chain > 1'000'000)
      throw validation_error(detail::row_context(t, r) + ": bad chain index");
    if (static_cast<std::size_t>(chain) >= rows_by_chain.size())
      rows_by_chain.resize(static_cast<std::size_t>(chain) + 1);
    auto& rows = rows_by_chain[static_cast<std::size_t>(chain)];
    if (iter != static_cast<std::int64_t>(rows.size()))
      throw validation_error(detail::row_context(t, r) + ": iterations must be contiguous from 0 per chain");
    Eigen::VectorXd v(static_cast<Eigen::Index>(P));
    for (std::size_t j = 0; j < P; ++j) v[static_cast<Eigen::Index>(j)] = detail::parse_double(t, r, j + 2);
    rows.push_back(std::move(v));
  }
  if (rows_by_chain.empty()) throw validation_error(path + ": no draws");
  const std::size_t nd = rows_by_chain.front().size();
  for (const auto& rows : rows_by_chain)
    if (rows.size() != nd || nd == 0)
      throw validation_error(path + ": chains must have the same nonzero number of draws");
  for (const auto& rows : rows_by_chain) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(nd), static_cast<Eigen::Index>(P));
    for (std::size_t i = 0; i < nd; ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i];
    s.chains.push_back(std::move(m));
  }
  return s;
}

// Evenly spaced post-warmup draws, chain ids preserved; used to thin the
// posterior to a manageable number of scoring draws.
inline std::vector<std::pair<int, int>> thin_indices(Eigen::Index n_chains, Eigen::Index n_draws,
                                                     Eigen::Index target_total) {
  if (n_chains < 1 || n_draws < 1) throw validation_error("thin_indices: empty posterior");
  if (target_total < 1) throw validation_error("thin_indices: need a positive target");
  Eigen::Index per = (target_total + n_chains - 1) / n_chains;
  per = std::min(per, n_draws);
  std::vector<std::pair<int, int>> idx;
  idx.reserve(static_cast<std::size_t>(per * n_chains));
  for (Eigen::Index c = 0; c < n_chains; ++c)
    for (Eigen::Index k = 0; k < per; ++k) {
      const Eigen::Index i = (k * n_draws) / per;
      idx.emplace_back(static_cast<int>(c), static_cast<int>(i));
    }
  return idx;
}

struct fit_result {
  posterior_samples samples; // constrained scale
  std::vector<chain_result> chains;
  double max_rhat = 0.0;
  std::uint64_t clamp_count = 0;
  std::uint64_t grad_evals = 0;
};

// Samples the joint posterior with one model copy per chain; draws are
// reported on the constrained scale.
inline fit_result fit_hmc(const latent_count_model& model, const hmc_options& opt) {
  std::vector<std::shared_ptr<latent_count_model>> copies;
  copies.reserve(static_cast<std::size_t>(opt.n_chains));
  for (int c = 0; c < opt.n_chains; ++c) copies.push_back(std::make_shared<latent_count_model>(model));

  auto make_target = [&](int c) {
    auto m = copies[static_cast<std::size_t>(c)];
    return [m](const Eigen::VectorXd& q, Eigen::VectorXd& g) { return m->log_posterior_and_grad(q, g); };
  };
  auto init = [&](int c) { return model.init_z(opt.seed, c); };

  hmc_result raw = hmc_run(make_target, init, opt);

  fit_result out;
  out.samples.names = model.names();
  for (auto& ch : raw.chains) {
    Eigen::MatrixXd m(ch.draws.rows(), ch.draws.cols());
    for (Eigen::Index i = 0; i < ch.draws.rows(); ++i)
      m.row(i) = model.constrain(ch.draws.row(i).transpose()).transpose();
    out.samples.chains.push_back(std::move(m));
    out.grad_evals += ch.grad_evals;
  }
  out.chains = std::move(raw.chains);
  for (const auto& c : copies) out.clamp_count += c->clamp_count();
  out.max_rhat = out.samples.max_rhat();
  return out;
}

} // namespace stgp
