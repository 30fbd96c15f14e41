#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "stgp/data.hpp"
#include "stgp/errors.hpp"
#include "stgp/gp.hpp"
#include "stgp/kernels.hpp"
#include "stgp/likelihoods.hpp"
#include "stgp/model.hpp"

namespace stgp {

// Generative setup for synthetic panels; spec carries the true kernel
// hyperparameters and observation family.
struct sim_config {
  int n_locations = 10;
  int n_weeks = 30;
  double base_rate = 2e-4; // true incidence rate per person-week
  double pop_min = 5e4, pop_max = 2e5;
  double lon_min = 0.0, lon_max = 3.0;
  double lat_min = 0.0, lat_max = 3.0;
  model_spec spec;
  double phi = 0.25;    // true overdispersion (non-Poisson families)
  double lambda = -1.0; // true zero-inflation logit (ZINB)
  std::uint64_t seed = 0;
};

struct sim_result {
  dataset data;
  Eigen::MatrixXd latent; // true field, locations x weeks
  std::vector<std::pair<std::string, double>> truth; // free parameters, reporting scale
};

// Draws the latent field from the full joint Gaussian prior (no low-rank
// shortcut), then counts from the observation family. Separate RNG substreams
// per stage keep the geometry stable when only the field or counts change.
inline sim_result simulate(const sim_config& cfg) {
  if (cfg.n_locations < 1 || cfg.n_weeks < 1)
    throw validation_error("simulate: dimensions must be positive");
  if (!(cfg.base_rate > 0.0)) throw validation_error("simulate: base_rate must be positive");
  if (!(cfg.pop_min > 0.0) || cfg.pop_max < cfg.pop_min)
    throw validation_error("simulate: bad population range");

  const Eigen::Index L = cfg.n_locations;
  const Eigen::Index W = cfg.n_weeks;

  sim_result out;
  dataset& d = out.data;

  const int width = static_cast<int>(std::to_string(cfg.n_locations).size());
  {
    auto rng = substream(cfg.seed, 1); // coordinates
    std::uniform_real_distribution<double> ulon(cfg.lon_min, cfg.lon_max);
    std::uniform_real_distribution<double> ulat(cfg.lat_min, cfg.lat_max);
    for (Eigen::Index i = 0; i < L; ++i) {
      std::string id = std::to_string(i + 1);
      while (static_cast<int>(id.size()) < width) id.insert(id.begin(), '0');
      d.locations.push_back({"L" + id, ulon(rng), ulat(rng)});
    }
  }
  d.weeks.resize(static_cast<std::size_t>(W));
  for (Eigen::Index j = 0; j < W; ++j) d.weeks[static_cast<std::size_t>(j)] = static_cast<int>(j + 1);

  {
    auto rng = substream(cfg.seed, 2); // populations, static per location
    std::uniform_real_distribution<double> upop(cfg.pop_min, cfg.pop_max);
    d.populations.resize(L, W);
    for (Eigen::Index i = 0; i < L; ++i) d.populations.row(i).setConstant(std::floor(upop(rng)));
  }

  // Latent draw over every cell, location-major to match observed_cells().
  kernel_expr truth_bias;
  const kernel_expr k = assemble_kernel(cfg.spec, &truth_bias);
  std::vector<cell_index> cells;
  for (Eigen::Index i = 0; i < L; ++i)
    for (Eigen::Index j = 0; j < W; ++j) cells.push_back({static_cast<int>(i), static_cast<int>(j)});
  d.counts.setZero(L, W);
  d.observed.setConstant(L, W, true);
  const Eigen::MatrixXd X = build_inputs(d, cells);
  const Eigen::MatrixXd K = eval_gram(k, X);
  const chol_result ch = chol_with_jitter(K);

  Eigen::VectorXd zvec(X.rows());
  {
    auto rng = substream(cfg.seed, 3); // field
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Eigen::Index i = 0; i < zvec.size(); ++i) zvec[i] = nd(rng);
  }
  const Eigen::VectorXd f = ch.L.triangularView<Eigen::Lower>() * zvec;

  out.latent.resize(L, W);
  {
    auto rng = substream(cfg.seed, 4); // counts
    Eigen::Index c = 0;
    obs_family fam;
    fam.kind = cfg.spec.family;
    fam.phi = cfg.phi;
    fam.lambda = cfg.lambda;
    for (Eigen::Index i = 0; i < L; ++i)
      for (Eigen::Index j = 0; j < W; ++j, ++c) {
        out.latent(i, j) = f[c];
        const double e = d.populations(i, j) * cfg.base_rate;
        const double mu = mean_counts(e, f[c]);
        d.counts(i, j) = sample_counts(fam, mu, rng);
      }
  }

  // Reporting-scale truths under the same names the sampler reports.
  for (const auto& slot : collect_slots(k)) {
    double value;
    if (slot.is_lengthscale)
      value = slot.node->params.lengthscale;
    else if (slot.node == truth_bias.get())
      value = slot.node->params.variance; // bias reported as a variance
    else
      value = std::sqrt(slot.node->params.variance);
    out.truth.emplace_back(slot.name, value);
  }
  if (cfg.spec.family != family_kind::poisson) out.truth.emplace_back("phi", cfg.phi);
  if (cfg.spec.family == family_kind::zi_neg_binomial)
    out.truth.emplace_back("lambda", cfg.lambda);

  return out;
}

} // namespace stgp
