#pragma once

#include <boost/math/distributions/inverse_gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <cmath>

#include "stgp/errors.hpp"

namespace stgp {

// Prior families, stated on the constrained scale:
//   lengthscale l       ~ InverseGamma(5, 5)
//   kernel amplitude s  ~ HalfNormal(0, 1)
//   bias amplitude      ~ HalfNormal(0, 1)
//   1/sqrt(phi)         ~ HalfNormal(0, 1)
//   lambda (zero-infl.) ~ Normal(-1, 5)
//   whitened latents v  ~ Normal(0, 1) iid
//
// The sampler works on unconstrained coordinates (log transforms for the
// positive quantities), so the *_z functions below fold the transform
// Jacobians into the log density.

struct prior_config {
  double ig_alpha = 5.0;
  double ig_beta = 5.0;
  double sigma_scale = 1.0;         // HalfNormal scale for kernel amplitudes
  double bias_sigma_scale = 1.0;    // HalfNormal scale for the bias amplitude
  double inv_sqrt_phi_scale = 1.0;  // HalfNormal scale for 1/sqrt(phi)
  double lambda_mean = -1.0;
  double lambda_sd = 5.0;
};

// Which prior applies to an unconstrained coordinate.
enum class coord_kind { lengthscale, kernel_sigma, bias_sigma, phi, lambda, latent };

inline double inv_gamma_logpdf(double x, double alpha, double beta) {
  if (!(x > 0.0)) throw validation_error("inv_gamma_logpdf: x must be positive");
  return alpha * std::log(beta) - std::lgamma(alpha) - (alpha + 1.0) * std::log(x) - beta / x;
}

// d/dx of inv_gamma_logpdf; zero at the mode beta/(alpha+1).
inline double inv_gamma_dlogpdf(double x, double alpha, double beta) {
  return -(alpha + 1.0) / x + beta / (x * x);
}

inline double half_normal_logpdf(double x, double scale) {
  if (!(x >= 0.0)) throw validation_error("half_normal_logpdf: x must be nonnegative");
  return 0.5 * std::log(2.0 / M_PI) - std::log(scale) - (x * x) / (2.0 * scale * scale);
}

inline double normal_logpdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * std::log(2.0 * M_PI) - std::log(sd) - 0.5 * z * z;
}

// Log density of the prior in the unconstrained coordinate, Jacobian included.
inline double prior_logpdf_z(coord_kind kind, double z, const prior_config& c) {
  switch (kind) {
    case coord_kind::lengthscale:
      return inv_gamma_logpdf(std::exp(z), c.ig_alpha, c.ig_beta) + z;
    case coord_kind::kernel_sigma:
      return half_normal_logpdf(std::exp(z), c.sigma_scale) + z;
    case coord_kind::bias_sigma:
      return half_normal_logpdf(std::exp(z), c.bias_sigma_scale) + z;
    case coord_kind::phi: {
      // q = 1/sqrt(phi) = exp(-z/2); |dq/dz| = q/2.
      const double q = std::exp(-0.5 * z);
      return half_normal_logpdf(q, c.inv_sqrt_phi_scale) + std::log(q) - std::log(2.0);
    }
    case coord_kind::lambda:
      return normal_logpdf(z, c.lambda_mean, c.lambda_sd);
    case coord_kind::latent:
      return -0.5 * std::log(2.0 * M_PI) - 0.5 * z * z;
  }
  throw validation_error("prior_logpdf_z: unknown coordinate kind");
}

inline double prior_dlogpdf_z(coord_kind kind, double z, const prior_config& c) {
  switch (kind) {
    case coord_kind::lengthscale:
      return -c.ig_alpha + c.ig_beta * std::exp(-z);
    case coord_kind::kernel_sigma: {
      const double s = std::exp(z);
      return 1.0 - (s * s) / (c.sigma_scale * c.sigma_scale);
    }
    case coord_kind::bias_sigma: {
      const double s = std::exp(z);
      return 1.0 - (s * s) / (c.bias_sigma_scale * c.bias_sigma_scale);
    }
    case coord_kind::phi: {
      const double q2 = std::exp(-z);
      return q2 / (2.0 * c.inv_sqrt_phi_scale * c.inv_sqrt_phi_scale) - 0.5;
    }
    case coord_kind::lambda:
      return -(z - c.lambda_mean) / (c.lambda_sd * c.lambda_sd);
    case coord_kind::latent:
      return -z;
  }
  throw validation_error("prior_dlogpdf_z: unknown coordinate kind");
}

// Prior median on the unconstrained scale; chains start here plus jitter.
inline double prior_median_z(coord_kind kind, const prior_config& c) {
  switch (kind) {
    case coord_kind::lengthscale: {
      boost::math::inverse_gamma_distribution<double> d(c.ig_alpha, c.ig_beta);
      return std::log(boost::math::quantile(d, 0.5));
    }
    case coord_kind::kernel_sigma:
    case coord_kind::bias_sigma: {
      boost::math::normal_distribution<double> n(0.0, 1.0);
      const double scale =
          kind == coord_kind::kernel_sigma ? c.sigma_scale : c.bias_sigma_scale;
      return std::log(boost::math::quantile(n, 0.75) * scale);
    }
    case coord_kind::phi: {
      boost::math::normal_distribution<double> n(0.0, 1.0);
      const double q_med = boost::math::quantile(n, 0.75) * c.inv_sqrt_phi_scale;
      return -2.0 * std::log(q_med); // phi = 1/q^2
    }
    case coord_kind::lambda:
      return c.lambda_mean;
    case coord_kind::latent:
      return 0.0;
  }
  throw validation_error("prior_median_z: unknown coordinate kind");
}

} // namespace stgp
