#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "stgp/gp.hpp"
#include "stgp/model.hpp"
#include "stgp/priors.hpp"

using namespace stgp;

namespace {

model_spec small_spec(family_kind fam = family_kind::neg_binomial) {
  model_spec spec;
  spec.time_kernel = k_matern32(0.25, 6.0, {0});
  spec.space_kernel = k_matern32(0.64, 1.2, {1, 2});
  spec.family = fam;
  spec.inducing_stride = 2;
  return spec;
}

} // namespace

TEST_CASE("unconstrained prior densities differentiate cleanly", "[model]") {
  // inverse-gamma(5, 5) peaks at beta / (alpha + 1)
  CHECK(inv_gamma_dlogpdf(5.0 / 6.0, 5.0, 5.0) == Catch::Approx(0.0).margin(1e-12));
  CHECK(inv_gamma_dlogpdf(0.5, 5.0, 5.0) > 0.0);
  CHECK(inv_gamma_dlogpdf(2.0, 5.0, 5.0) < 0.0);

  prior_config pc;
  const double h = 1e-6;
  for (coord_kind kind : {coord_kind::lengthscale, coord_kind::kernel_sigma,
                          coord_kind::bias_sigma, coord_kind::phi, coord_kind::lambda,
                          coord_kind::latent}) {
    for (double z : {-1.5, -0.3, 0.0, 0.4, 1.1}) {
      const double fd = (prior_logpdf_z(kind, z + h, pc) - prior_logpdf_z(kind, z - h, pc)) /
                        (2.0 * h);
      CHECK(prior_dlogpdf_z(kind, z, pc) == Catch::Approx(fd).margin(1e-6));
    }
    // the median on the z scale has equal mass on both sides by construction;
    // just require it to be finite and the density to be proper there
    const double zmed = prior_median_z(kind, pc);
    REQUIRE(std::isfinite(zmed));
    REQUIRE(std::isfinite(prior_logpdf_z(kind, zmed, pc)));
  }
}

TEST_CASE("crude rate pools counts over person-weeks", "[model]") {
  dataset d = testutil::tiny_panel(2, 2);
  d.counts << 1, 2, 3, 4;
  d.populations.setConstant(10.0);
  CHECK(crude_rate(d) == Catch::Approx(0.25).epsilon(1e-15));

  const offset_table off = build_offsets(d);
  CHECK(off.R == Catch::Approx(0.25).epsilon(1e-15));
  CHECK(off.e(1, 1) == Catch::Approx(2.5).epsilon(1e-15));

  // masked cells drop out of both numerator and denominator
  d.observed(0, 0) = false;
  CHECK(crude_rate(d) == Catch::Approx(9.0 / 30.0).epsilon(1e-15));

  dataset zero = testutil::tiny_panel(2, 2);
  zero.counts.setZero();
  CHECK_THROWS_AS(build_offsets(zero), validation_error);
}

TEST_CASE("coordinate layout follows kernel, family, latent order", "[model]") {
  const dataset d = testutil::tiny_panel(3, 6);

  const latent_count_model nb(small_spec(), d);
  const auto& names = nb.names();
  REQUIRE(names.size() >= 7);
  CHECK(names[0] == "len_time");
  CHECK(names[1] == "sigma_time");
  CHECK(names[2] == "len_space");
  CHECK(names[3] == "sigma_space");
  CHECK(names[4] == "bias_var");
  CHECK(names[5] == "phi");
  CHECK(names[6] == "v[0]");
  CHECK(names.back() == "v[" + std::to_string(nb.n_latents() - 1) + "]");
  CHECK(static_cast<Eigen::Index>(names.size()) == 6 + nb.n_latents());

  const latent_count_model zi(small_spec(family_kind::zi_neg_binomial), d);
  CHECK(zi.names()[5] == "phi");
  CHECK(zi.names()[6] == "lambda");
  CHECK(zi.names()[7] == "v[0]");

  const latent_count_model po(small_spec(family_kind::poisson), d);
  CHECK(po.names()[5] == "v[0]");

  // weeks 1..6 at stride 2 -> positions 0,2,4 plus the final week
  CHECK(nb.grid().n_sel_weeks == 4);
  CHECK(nb.n_latents() == 12);
}

TEST_CASE("initial points jitter prior medians deterministically", "[model]") {
  const dataset d = testutil::tiny_panel(2, 4);
  const latent_count_model m(small_spec(), d);
  const Eigen::VectorXd a = m.init_z(42, 0);
  const Eigen::VectorXd b = m.init_z(42, 0);
  const Eigen::VectorXd c = m.init_z(42, 1);
  CHECK(a == b);
  CHECK(a != c);
  for (Eigen::Index i = 0; i < m.dim(); ++i) {
    const double med = prior_median_z(m.kinds()[static_cast<std::size_t>(i)], m.spec().priors);
    CHECK(std::abs(a[i] - med) <= 0.5);
  }
  // constrain / unconstrain are inverse maps on the init point
  CHECK(m.unconstrain(m.constrain(a)).isApprox(a, 1e-12));
}

TEST_CASE("log joint splits into independent priors plus likelihood", "[model]") {
  const dataset d = testutil::tiny_panel(2, 4);
  const latent_count_model m(small_spec(), d);
  const Eigen::VectorXd z = m.init_z(7, 0);

  double prior_sum = 0.0;
  for (Eigen::Index i = 0; i < m.dim(); ++i)
    prior_sum += prior_logpdf_z(m.kinds()[static_cast<std::size_t>(i)], z[i], m.spec().priors);
  CHECK(m.log_posterior(z) == Catch::Approx(m.loglik(z) + prior_sum).epsilon(1e-12));
}

TEST_CASE("factorized latent field matches a dense projection", "[model]") {
  const dataset d = testutil::tiny_panel(3, 7);
  for (family_kind fam :
       {family_kind::neg_binomial, family_kind::zi_neg_binomial, family_kind::poisson}) {
    const latent_count_model m(small_spec(fam), d);
    const Eigen::VectorXd z = m.init_z(99, 1);

    Eigen::VectorXd f, mu;
    m.latent_field(z, f, mu);

    const kernel_expr& kfull = m.apply_kernel_params(z.head(5));
    const Eigen::MatrixXd Kmm = eval_gram(kfull, m.grid().points);
    const chol_result ch = chol_with_jitter(Kmm);
    const Eigen::MatrixXd X = build_inputs(m.data(), m.cells());
    const Eigen::MatrixXd Knm = eval_gram(kfull, X, m.grid().points);
    const Eigen::VectorXd v = z.tail(m.n_latents());
    const Eigen::VectorXd f_dense = sor_project(v, ch.L, Knm);

    REQUIRE(f.size() == f_dense.size());
    CHECK((f - f_dense).cwiseAbs().maxCoeff() < 1e-10);
    for (Eigen::Index c = 0; c < f.size(); ++c)
      CHECK(mu[c] == Catch::Approx(m.cell_offsets()[c] * std::exp(clamp_latent(f[c]))).epsilon(1e-12));
  }
}

TEST_CASE("posterior gradient matches central differences", "[model]") {
  const dataset d = testutil::tiny_panel(2, 4);
  for (family_kind fam :
       {family_kind::neg_binomial, family_kind::zi_neg_binomial, family_kind::poisson}) {
    const latent_count_model m(small_spec(fam), d);
    const Eigen::VectorXd z = m.init_z(3, 2);

    Eigen::VectorXd g;
    const double lp = m.log_posterior_and_grad(z, g);
    REQUIRE(std::isfinite(lp));
    CHECK(lp == Catch::Approx(m.log_posterior(z)).epsilon(1e-13));

    const double h = 1e-5;
    for (Eigen::Index i = 0; i < m.dim(); ++i) {
      Eigen::VectorXd zp = z, zm = z;
      zp[i] += h;
      zm[i] -= h;
      const double fd = (m.log_posterior(zp) - m.log_posterior(zm)) / (2.0 * h);
      const double scale = std::max({1.0, std::abs(fd), std::abs(g[i])});
      INFO("family " << static_cast<int>(fam) << " coord " << i << " ("
                     << m.names()[static_cast<std::size_t>(i)] << "): analytic " << g[i]
                     << " fd " << fd);
      CHECK(std::abs(g[i] - fd) / scale < 1e-4);
    }
  }
}

TEST_CASE("pathological coordinates degrade to rejection, not a crash", "[model]") {
  const dataset d = testutil::tiny_panel(2, 4);
  const latent_count_model m(small_spec(), d);
  Eigen::VectorXd z = m.init_z(1, 0);

  Eigen::VectorXd g;
  z[1] = 400.0; // amplitude exp(800) overflows the Gram
  const double lp = m.log_posterior_and_grad(z, g);
  CHECK(lp == -std::numeric_limits<double>::infinity());
  CHECK(g.norm() == 0.0);

  z = m.init_z(1, 0);
  z[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK(m.log_posterior(z) == -std::numeric_limits<double>::infinity());

  CHECK_THROWS_AS(m.log_posterior(Eigen::VectorXd::Zero(m.dim() + 1)), validation_error);
}

TEST_CASE("model construction rejects misplaced kernel dimensions", "[model]") {
  const dataset d = testutil::tiny_panel(2, 4);
  model_spec bad = small_spec();
  bad.time_kernel = k_matern32(1.0, 1.0, {1});
  CHECK_THROWS_AS(latent_count_model(bad, d), validation_error);
  bad = small_spec();
  bad.space_kernel = k_matern32(1.0, 1.0, {0, 1});
  CHECK_THROWS_AS(latent_count_model(bad, d), validation_error);
}
