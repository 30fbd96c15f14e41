#pragma once

#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <cstdint>
#include <random>

#include "stgp/errors.hpp"

namespace stgp {

// Count observation families. The latent field enters through
// mu = e * exp(f); NB uses the (mu, phi) parameterization with r = 1/phi,
// p = r/(mu+r), giving mean mu and variance mu + phi*mu^2. Poisson is kept as
// the phi -> 0 reference family.

enum class family_kind { neg_binomial, zi_neg_binomial, poisson };

struct obs_family {
  family_kind kind = family_kind::neg_binomial;
  double phi = 1.0;     // dispersion; NB families
  double lambda = -1.0; // zero-inflation logit; ZINB only

  double pi() const { return 1.0 / (1.0 + std::exp(-lambda)); }
};

// Latent values are clamped at |f| <= fclamp before exponentiation so a wild
// HMC proposal cannot overflow; clamps are counted, not silently absorbed.
inline constexpr double latent_clamp = 30.0;

inline double clamp_latent(double f, std::uint64_t* clamp_count = nullptr) {
  if (f > latent_clamp) {
    if (clamp_count) ++*clamp_count;
    return latent_clamp;
  }
  if (f < -latent_clamp) {
    if (clamp_count) ++*clamp_count;
    return -latent_clamp;
  }
  return f;
}

inline double mean_counts(double e, double f, std::uint64_t* clamp_count = nullptr) {
  if (!(e > 0.0)) throw validation_error("mean_counts: background effect must be positive");
  return e * std::exp(clamp_latent(f, clamp_count));
}

inline double poisson_logpmf(std::int64_t y, double mu) {
  if (y < 0) throw validation_error("poisson_logpmf: negative count");
  const double ylog = y > 0 ? static_cast<double>(y) * std::log(mu) : 0.0;
  return -mu + ylog - std::lgamma(static_cast<double>(y) + 1.0);
}

inline double nb_logpmf_r(std::int64_t y, double mu, double r) {
  if (y < 0) throw validation_error("nb_logpmf: negative count");
  if (!(mu > 0.0) || !(r > 0.0)) throw validation_error("nb_logpmf: mu and phi must be positive");
  const double yd = static_cast<double>(y);
  const double ylog = y > 0 ? yd * std::log(mu) : 0.0;
  return std::lgamma(yd + r) - std::lgamma(r) - std::lgamma(yd + 1.0) + r * std::log(r) -
         (r + yd) * std::log(mu + r) + ylog;
}

inline double nb_logpmf(std::int64_t y, double mu, double phi) {
  return nb_logpmf_r(y, mu, 1.0 / phi);
}

inline double zinb_logpmf_r(std::int64_t y, double mu, double r, double pi) {
  if (!(pi > 0.0 && pi < 1.0)) throw validation_error("zinb_logpmf: pi must lie in (0,1)");
  if (y > 0) return std::log1p(-pi) + nb_logpmf_r(y, mu, r);
  if (y < 0) throw validation_error("zinb_logpmf: negative count");
  // log(pi + (1-pi) * (r/(mu+r))^r), evaluated via log-sum-exp.
  const double lrho = r * (std::log(r) - std::log(mu + r));
  const double a = std::log(pi);
  const double b = std::log1p(-pi) + lrho;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double zinb_logpmf(std::int64_t y, double mu, double phi, double pi) {
  return zinb_logpmf_r(y, mu, 1.0 / phi, pi);
}

inline double family_logpmf(const obs_family& fam, std::int64_t y, double mu) {
  switch (fam.kind) {
    case family_kind::neg_binomial:
      return nb_logpmf(y, mu, fam.phi);
    case family_kind::zi_neg_binomial:
      return zinb_logpmf(y, mu, fam.phi, fam.pi());
    case family_kind::poisson:
      return poisson_logpmf(y, mu);
  }
  throw validation_error("family_logpmf: unknown family");
}

// Partial derivatives of the log pmf needed by the sampler. d_r is with
// respect to r = 1/phi; d_lambda with respect to the zero-inflation logit.
struct obs_grad {
  double d_mu = 0.0;
  double d_r = 0.0;
  double d_lambda = 0.0;
};

inline obs_grad nb_logpmf_grad_r(std::int64_t y, double mu, double r) {
  const double yd = static_cast<double>(y);
  obs_grad g;
  g.d_mu = -(r + yd) / (mu + r) + (y > 0 ? yd / mu : 0.0);
  g.d_r = boost::math::digamma(yd + r) - boost::math::digamma(r) + std::log(r) + 1.0 -
          std::log(mu + r) - (r + yd) / (mu + r);
  return g;
}

inline obs_grad family_logpmf_grad(const obs_family& fam, std::int64_t y, double mu) {
  switch (fam.kind) {
    case family_kind::poisson: {
      obs_grad g;
      g.d_mu = -1.0 + (y > 0 ? static_cast<double>(y) / mu : 0.0);
      return g;
    }
    case family_kind::neg_binomial:
      return nb_logpmf_grad_r(y, mu, 1.0 / fam.phi);
    case family_kind::zi_neg_binomial: {
      const double r = 1.0 / fam.phi;
      const double pi = fam.pi();
      if (y > 0) {
        obs_grad g = nb_logpmf_grad_r(y, mu, r);
        g.d_lambda = -pi;
        return g;
      }
      const double lrho = r * (std::log(r) - std::log(mu + r));
      const double a = std::log(pi);
      const double b = std::log1p(-pi) + lrho;
      const double m = std::max(a, b);
      const double l0 = m + std::log(std::exp(a - m) + std::exp(b - m));
      const double w_nb = std::exp(b - l0);        // (1-pi)*rho / p0
      const double w_pi = std::exp(a - l0);        // pi / p0
      const double w_pirho = std::exp(a + lrho - l0); // pi*rho / p0
      obs_grad g;
      g.d_mu = w_nb * (-r / (mu + r));
      g.d_r = w_nb * (std::log(r) + 1.0 - std::log(mu + r) - r / (mu + r));
      g.d_lambda = (1.0 - pi) * (w_pi - w_pirho);
      return g;
    }
  }
  throw validation_error("family_logpmf_grad: unknown family");
}

// Mean of the observation distribution (what replicated data are compared
// against): mu for NB/Poisson, (1-pi)*mu for ZINB.
inline double family_mean(const obs_family& fam, double mu) {
  return fam.kind == family_kind::zi_neg_binomial ? (1.0 - fam.pi()) * mu : mu;
}

template <class Rng>
std::int64_t sample_counts(const obs_family& fam, double mu, Rng& rng) {
  if (!(mu >= 0.0)) throw validation_error("sample_counts: negative mean");
  auto poisson_draw = [&rng](double rate) -> std::int64_t {
    if (rate < 1e-12) return 0;
    std::poisson_distribution<std::int64_t> d(rate);
    return d(rng);
  };
  switch (fam.kind) {
    case family_kind::poisson:
      return poisson_draw(mu);
    case family_kind::neg_binomial: {
      const double r = 1.0 / fam.phi;
      std::gamma_distribution<double> g(r, 1.0 / r); // mean 1, var phi
      return poisson_draw(mu * g(rng));
    }
    case family_kind::zi_neg_binomial: {
      std::bernoulli_distribution zero(fam.pi());
      if (zero(rng)) return 0;
      const double r = 1.0 / fam.phi;
      std::gamma_distribution<double> g(r, 1.0 / r);
      return poisson_draw(mu * g(rng));
    }
  }
  throw validation_error("sample_counts: unknown family");
}

} // namespace stgp
