#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "stgp/data.hpp"
#include "stgp/errors.hpp"
#include "stgp/gp.hpp"
#include "stgp/kernels.hpp"
#include "stgp/likelihoods.hpp"
#include "stgp/model.hpp"
#include "stgp/posterior.hpp"
#include "stgp/util.hpp"

namespace stgp {

struct forecast_options {
  int n_draws = 1000;
  bool perturb = true;      // add leftover variance diag(K** - Q**) to the field
  std::uint64_t seed = 0;
  // test hooks
  bool force_zero_latents = false; // act as if every posterior v draw were 0
  bool deterministic_mean = false; // skip field noise and count sampling
};

struct forecast_result {
  std::vector<std::string> location_ids;
  std::vector<int> weeks;
  // cells are location-major: cell = loc * n_weeks + week_pos
  Eigen::MatrixXd count_draws;  // n_draws x cells
  Eigen::MatrixXd latent_draws; // n_draws x cells
  Eigen::VectorXd q025, q50, q975, mean; // per cell, over count draws

  Eigen::Index n_cells() const { return q50.size(); }
};

// Posterior-predictive counts at every location for the requested weeks.
// Each predictive draw t recycles posterior draw t mod S, rebuilds the
// inducing Gram under that draw's hyperparameters, projects the whitened
// latents to the target cells, optionally adds the unexplained variance, and
// samples counts from the observation family.
inline forecast_result forecast_counts(const latent_count_model& model,
                                       const posterior_samples& samples,
                                       const std::vector<int>& future_weeks,
                                       const Eigen::MatrixXd& future_pops, // locations x weeks
                                       const forecast_options& opt) {
  if (future_weeks.empty()) throw validation_error("forecast: no target weeks");
  if (opt.n_draws < 1) throw validation_error("forecast: need at least one draw");
  if (samples.total_draws() < 1) throw validation_error("forecast: empty posterior");
  const Eigen::Index L = model.data().n_locations();
  const Eigen::Index H = static_cast<Eigen::Index>(future_weeks.size());
  if (future_pops.rows() != L || future_pops.cols() != H)
    throw validation_error("forecast: population panel must be locations x horizon");
  if (!(future_pops.array() > 0.0).all())
    throw validation_error("forecast: populations must be positive");
  if (samples.names != model.names())
    throw validation_error("forecast: samples do not match the model's parameters");

  // Prediction inputs, location-major.
  const Eigen::Index n_star = L * H;
  Eigen::MatrixXd Xs(n_star, 3);
  Eigen::VectorXd e_star(n_star);
  for (Eigen::Index i = 0; i < L; ++i)
    for (Eigen::Index h = 0; h < H; ++h) {
      const Eigen::Index c = i * H + h;
      Xs(c, 0) = static_cast<double>(future_weeks[static_cast<std::size_t>(h)]);
      Xs(c, 1) = model.data().locations[static_cast<std::size_t>(i)].lon;
      Xs(c, 2) = model.data().locations[static_cast<std::size_t>(i)].lat;
      e_star[c] = future_pops(i, h) * model.offsets().R;
    }

  latent_count_model local(model); // private kernel state for mutation
  const Eigen::Index S = samples.total_draws();
  const Eigen::Index M = local.grid().size();

  forecast_result out;
  for (const auto& loc : local.data().locations) out.location_ids.push_back(loc.id);
  out.weeks = future_weeks;
  out.count_draws.resize(opt.n_draws, n_star);
  out.latent_draws.resize(opt.n_draws, n_star);

  for (int t = 0; t < opt.n_draws; ++t) {
    const Eigen::Index flat = static_cast<Eigen::Index>(t) % S;
    const Eigen::Index chain = flat / samples.n_draws();
    const Eigen::Index iter = flat % samples.n_draws();
    const Eigen::VectorXd row = samples.chains[static_cast<std::size_t>(chain)].row(iter).transpose();
    const Eigen::VectorXd z = local.unconstrain(row);

    const kernel_expr& k = local.apply_kernel_params(z);
    const obs_family fam = local.family_at(z);
    Eigen::VectorXd v = z.tail(M);
    if (opt.force_zero_latents) v.setZero();

    const Eigen::MatrixXd Kmm = eval_gram(k, local.grid().points);
    const chol_result ch = chol_with_jitter(Kmm);
    const Eigen::VectorXd uprime = ch.L.transpose().triangularView<Eigen::Upper>().solve(v);
    const Eigen::MatrixXd Ksm = eval_gram(k, Xs, local.grid().points);
    Eigen::VectorXd fstar = Ksm * uprime;

    auto rng = substream(opt.seed, 0x70726564ull + static_cast<std::uint64_t>(t));
    if (opt.perturb && !opt.deterministic_mean) {
      const Eigen::VectorXd resid = sor_residual_var(k, ch.L, Ksm, Xs);
      std::normal_distribution<double> nd(0.0, 1.0);
      for (Eigen::Index c = 0; c < n_star; ++c) fstar[c] += std::sqrt(resid[c]) * nd(rng);
    }

    for (Eigen::Index c = 0; c < n_star; ++c) {
      const double mu = mean_counts(e_star[c], fstar[c]);
      out.latent_draws(t, c) = fstar[c];
      out.count_draws(t, c) =
          opt.deterministic_mean ? family_mean(fam, mu)
                                 : static_cast<double>(sample_counts(fam, mu, rng));
    }
  }

  out.q025.resize(n_star);
  out.q50.resize(n_star);
  out.q975.resize(n_star);
  out.mean.resize(n_star);
  std::vector<double> col(static_cast<std::size_t>(opt.n_draws));
  for (Eigen::Index c = 0; c < n_star; ++c) {
    for (int t = 0; t < opt.n_draws; ++t) col[static_cast<std::size_t>(t)] = out.count_draws(t, c);
    out.q025[c] = quantile(col, 0.025);
    out.q50[c] = quantile(col, 0.5);
    out.q975[c] = quantile(col, 0.975);
    out.mean[c] = out.count_draws.col(c).mean();
  }
  return out;
}

inline void write_forecast_csv(const std::string& path, const forecast_result& fc) {
  std::ofstream out(path);
  if (!out) throw validation_error(path + ": cannot write");
  out << "location_id,week,q02.5,q50,q97.5,mean\n";
  const Eigen::Index H = static_cast<Eigen::Index>(fc.weeks.size());
  for (std::size_t i = 0; i < fc.location_ids.size(); ++i)
    for (Eigen::Index h = 0; h < H; ++h) {
      const Eigen::Index c = static_cast<Eigen::Index>(i) * H + h;
      out << fc.location_ids[i] << ',' << fc.weeks[static_cast<std::size_t>(h)] << ','
          << format_double(fc.q025[c]) << ',' << format_double(fc.q50[c]) << ','
          << format_double(fc.q975[c]) << ',' << format_double(fc.mean[c]) << '\n';
    }
}

// One point feature per location-week with the same properties as the CSV.
inline void write_forecast_geojson(const std::string& path, const forecast_result& fc,
                                   const std::vector<location>& locations) {
  if (locations.size() != fc.location_ids.size())
    throw validation_error("forecast geojson: location list mismatch");
  std::ofstream out(path);
  if (!out) throw validation_error(path + ": cannot write");
  out << "{\"type\":\"FeatureCollection\",\"features\":[";
  const Eigen::Index H = static_cast<Eigen::Index>(fc.weeks.size());
  bool first = true;
  for (std::size_t i = 0; i < fc.location_ids.size(); ++i) {
    if (locations[i].id != fc.location_ids[i])
      throw validation_error("forecast geojson: location order mismatch");
    for (Eigen::Index h = 0; h < H; ++h) {
      const Eigen::Index c = static_cast<Eigen::Index>(i) * H + h;
      if (!first) out << ',';
      first = false;
      out << "{\"type\":\"Feature\",\"geometry\":{\"type\":\"Point\",\"coordinates\":["
          << format_double(locations[i].lon) << ',' << format_double(locations[i].lat)
          << "]},\"properties\":{\"location_id\":\"" << fc.location_ids[i]
          << "\",\"week\":" << fc.weeks[static_cast<std::size_t>(h)]
          << ",\"q02.5\":" << format_double(fc.q025[c]) << ",\"q50\":" << format_double(fc.q50[c])
          << ",\"q97.5\":" << format_double(fc.q975[c]) << ",\"mean\":" << format_double(fc.mean[c])
          << "}}";
    }
  }
  out << "]}\n";
}

} // namespace stgp
