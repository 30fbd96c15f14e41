#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "stgp/diagnostics.hpp"
#include "stgp/rng.hpp"
#include "stgp/util.hpp"

using namespace stgp;

namespace {

Eigen::MatrixXd iid_normal(std::uint64_t seed, Eigen::Index n, Eigen::Index chains,
                           double mean = 0.0, double sd = 1.0) {
  std::mt19937_64 rng = substream(seed, 0);
  std::normal_distribution<double> nd(mean, sd);
  Eigen::MatrixXd m(n, chains);
  for (Eigen::Index c = 0; c < chains; ++c)
    for (Eigen::Index i = 0; i < n; ++i) m(i, c) = nd(rng);
  return m;
}

} // namespace

TEST_CASE("potential scale reduction sits at one for replicated chains", "[diagnostics]") {
  const Eigen::MatrixXd one = iid_normal(5, 400, 1);
  Eigen::MatrixXd copies(400, 4);
  for (Eigen::Index c = 0; c < 4; ++c) copies.col(c) = one.col(0);
  const double r = split_rhat(copies);
  CHECK(r >= 1.0);
  CHECK(r < 1.01);
}

TEST_CASE("potential scale reduction flags disjoint chains", "[diagnostics]") {
  Eigen::MatrixXd m(300, 2);
  m.col(0) = iid_normal(1, 300, 1).col(0);
  m.col(1) = iid_normal(2, 300, 1, 10.0, 1.0).col(0);
  CHECK(split_rhat(m) > 3.0);

  // a trend inside one chain shows up through the split halves
  Eigen::MatrixXd drift(400, 2);
  drift.col(0) = Eigen::VectorXd::LinSpaced(400, 0.0, 6.0);
  drift.col(1) = Eigen::VectorXd::LinSpaced(400, 0.0, 6.0);
  CHECK(split_rhat(drift) > 1.5);
}

TEST_CASE("well mixed chains pass the threshold consistently", "[diagnostics]") {
  int failures = 0;
  for (int rep = 0; rep < 20; ++rep)
    if (split_rhat(iid_normal(100 + static_cast<std::uint64_t>(rep), 250, 4)) >= 1.05) ++failures;
  CHECK(failures <= 1);
}

TEST_CASE("degenerate chains fall back to defined values", "[diagnostics]") {
  // all chains constant and equal: no variance anywhere, R-hat pinned at 1
  CHECK(split_rhat(Eigen::MatrixXd::Constant(50, 3, 2.5)) == 1.0);

  // constant but different chains: infinite scale reduction
  Eigen::MatrixXd split(50, 2);
  split.col(0).setConstant(0.0);
  split.col(1).setConstant(5.0);
  CHECK(std::isinf(split_rhat(split)));

  Eigen::MatrixXd bad = iid_normal(9, 50, 2);
  bad(10, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK(std::isinf(split_rhat(bad)));

  CHECK_THROWS_AS(split_rhat(Eigen::MatrixXd::Zero(3, 2)), validation_error);
  CHECK_THROWS_AS(ess_split(Eigen::MatrixXd::Zero(3, 2)), validation_error);
}

TEST_CASE("effective sample size separates white noise from a random walk", "[diagnostics]") {
  const Eigen::Index n = 1000;
  const Eigen::MatrixXd iid = iid_normal(77, n, 4);
  const double total = static_cast<double>(n) * 4.0;
  const double e_iid = ess_split(iid);
  CHECK(e_iid > 0.5 * total);
  CHECK(e_iid < 1.5 * total);

  Eigen::MatrixXd walk = iid_normal(78, n, 4);
  for (Eigen::Index c = 0; c < 4; ++c)
    for (Eigen::Index i = 1; i < n; ++i) walk(i, c) = walk(i - 1, c) + 0.05 * walk(i, c);
  CHECK(ess_split(walk) < 0.2 * total);

  // constant draws: no information, but a defined (total) value
  CHECK(ess_split(Eigen::MatrixXd::Constant(100, 2, 1.0)) == 200.0);
}

TEST_CASE("Monte Carlo standard error shrinks at the root-n rate", "[diagnostics]") {
  const Eigen::MatrixXd m = iid_normal(123, 1000, 4);
  const double se = mcse_mean(m);
  const double ref = 1.0 / std::sqrt(4000.0);
  CHECK(se > 0.5 * ref);
  CHECK(se < 2.0 * ref);
}

TEST_CASE("interpolated quantiles match hand-computed order statistics", "[diagnostics]") {
  std::vector<double> x(1000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(1000 - i); // unsorted
  CHECK(quantile(x, 0.5) == Catch::Approx(500.5).epsilon(1e-15));
  CHECK(quantile(x, 0.025) == Catch::Approx(25.975).epsilon(1e-15));
  CHECK(quantile(x, 0.975) == Catch::Approx(975.025).epsilon(1e-15));
  CHECK(quantile(x, 0.0) == 1.0);
  CHECK(quantile(x, 1.0) == 1000.0);
  CHECK(quantile({42.0}, 0.3) == 42.0);
  CHECK_THROWS_AS(quantile({}, 0.5), validation_error);
  CHECK_THROWS_AS(quantile({1.0}, 1.5), validation_error);
}
