#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "stgp/diagnostics.hpp"
#include "stgp/hmc.hpp"

using namespace stgp;

namespace {

// standard bivariate normal: logp = -||q||^2 / 2
double std_normal_target(const Eigen::VectorXd& q, Eigen::VectorXd& grad) {
  grad = -q;
  return -0.5 * q.squaredNorm();
}

hmc_result run_std_normal(std::uint64_t seed, int chains = 4, int draws = 500) {
  hmc_options opt;
  opt.n_chains = chains;
  opt.n_warmup = 400;
  opt.n_samples = draws;
  opt.seed = seed;
  auto make_target = [](int) { return std_normal_target; };
  auto init = [](int chain) {
    return Eigen::VectorXd::Constant(2, 0.1 * (chain + 1)).eval();
  };
  return hmc_run(make_target, init, opt);
}

Eigen::MatrixXd coord_matrix(const hmc_result& res, Eigen::Index coord) {
  const Eigen::Index n = res.chains.front().draws.rows();
  Eigen::MatrixXd m(n, static_cast<Eigen::Index>(res.chains.size()));
  for (std::size_t c = 0; c < res.chains.size(); ++c) m.col(static_cast<Eigen::Index>(c)) =
      res.chains[c].draws.col(coord);
  return m;
}

} // namespace

TEST_CASE("leapfrog conserves energy at small step sizes", "[hmc]") {
  leapfrog_state st;
  st.q = Eigen::VectorXd::Constant(2, 0.7);
  st.p = Eigen::VectorXd::Zero(2);
  st.p << 0.3, -1.1;
  Eigen::VectorXd g;
  st.logp = std_normal_target(st.q, g);
  st.grad = g;
  const Eigen::VectorXd metric = Eigen::VectorXd::Ones(2);

  const double h0 = hamiltonian(st.logp, st.p, metric);
  const leapfrog_state end = leapfrog(std_normal_target, st, 1e-4, 1000, metric);
  const double h1 = hamiltonian(end.logp, end.p, metric);
  CHECK(std::abs(h1 - h0) < 1e-4);

  // reversibility: integrate forward then backward with flipped momentum
  leapfrog_state back = end;
  back.p = -back.p;
  const leapfrog_state home = leapfrog(std_normal_target, back, 1e-4, 1000, metric);
  CHECK((home.q - st.q).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("sampler recovers a bivariate standard normal", "[hmc]") {
  const hmc_result res = run_std_normal(2024, 4, 500);
  REQUIRE(res.chains.size() == 4);
  for (const auto& c : res.chains) {
    REQUIRE(c.draws.rows() == 500); // warmup iterations are never emitted
    REQUIRE(c.draws.cols() == 2);
    CHECK(c.accept_rate > 0.5);
    CHECK(c.step_size > 0.0);
    CHECK(c.divergences == 0);
  }

  for (Eigen::Index coord = 0; coord < 2; ++coord) {
    const Eigen::MatrixXd m = coord_matrix(res, coord);
    CHECK(split_rhat(m) < 1.05);
    const double mean = m.mean();
    const double mcse = mcse_mean(m);
    CHECK(std::abs(mean - 0.0) < 3.0 * mcse);

    const Eigen::Map<const Eigen::VectorXd> flat(m.data(), m.size());
    const double var = (flat.array() - mean).square().sum() / (flat.size() - 1);
    // 2000 correlated draws put roughly 4% of Monte Carlo noise on the variance
    CHECK(var > 0.85);
    CHECK(var < 1.15);
  }
}

TEST_CASE("sampling is a pure function of the seed", "[hmc]") {
  const hmc_result a = run_std_normal(7, 2, 50);
  const hmc_result b = run_std_normal(7, 2, 50);
  const hmc_result c = run_std_normal(8, 2, 50);
  for (std::size_t i = 0; i < a.chains.size(); ++i) {
    CHECK(a.chains[i].draws == b.chains[i].draws);
    CHECK(a.chains[i].step_size == b.chains[i].step_size);
  }
  CHECK(a.chains[0].draws != c.chains[0].draws);
  // chains differ from each other
  CHECK(a.chains[0].draws != a.chains[1].draws);
}

TEST_CASE("thread count does not change the draws", "[hmc]") {
  hmc_options opt;
  opt.n_chains = 3;
  opt.n_warmup = 200;
  opt.n_samples = 60;
  opt.seed = 31;
  auto make_target = [](int) { return std_normal_target; };
  auto init = [](int chain) { return Eigen::VectorXd::Constant(2, 0.2 * chain).eval(); };

  hmc_options opt4 = opt;
  opt4.threads = 4;
  const hmc_result st = hmc_run(make_target, init, opt);
  const hmc_result mt = hmc_run(make_target, init, opt4);
  for (std::size_t i = 0; i < st.chains.size(); ++i)
    CHECK(st.chains[i].draws == mt.chains[i].draws);
}

TEST_CASE("step size adaptation lands near the acceptance target", "[hmc]") {
  const hmc_result res = run_std_normal(99, 2, 400);
  for (const auto& c : res.chains) {
    CHECK(c.accept_rate > 0.6);
    CHECK(c.accept_rate <= 1.0);
  }
}

TEST_CASE("invalid sampler options are rejected up front", "[hmc]") {
  auto make_target = [](int) { return std_normal_target; };
  auto init = [](int) { return Eigen::VectorXd::Zero(2).eval(); };

  hmc_options opt;
  opt.n_chains = 0;
  CHECK_THROWS_AS(hmc_run(make_target, init, opt), validation_error);
  opt = {};
  opt.n_samples = 0;
  CHECK_THROWS_AS(hmc_run(make_target, init, opt), validation_error);
  opt = {};
  opt.leapfrog_min = 0;
  CHECK_THROWS_AS(hmc_run(make_target, init, opt), validation_error);
  opt = {};
  opt.leapfrog_max = opt.leapfrog_min - 1;
  CHECK_THROWS_AS(hmc_run(make_target, init, opt), validation_error);
  opt = {};
  opt.target_accept = 1.0;
  CHECK_THROWS_AS(hmc_run(make_target, init, opt), validation_error);
}

TEST_CASE("a target that always rejects raises a numerical error", "[hmc]") {
  auto make_target = [](int) {
    return [](const Eigen::VectorXd& q, Eigen::VectorXd& grad) {
      grad = Eigen::VectorXd::Zero(q.size());
      return -std::numeric_limits<double>::infinity();
    };
  };
  auto init = [](int) { return Eigen::VectorXd::Zero(2).eval(); };
  hmc_options opt;
  opt.n_chains = 1;
  opt.n_warmup = 30;
  opt.n_samples = 10;
  CHECK_THROWS_AS(hmc_run(make_target, init, opt), numerical_error);
}
