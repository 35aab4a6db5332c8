#pragma once

#include <string>

namespace stgmrf {

/// How the AR(1) coefficient prior is calibrated.
///  - Pc0: base model phi = 0, Prob(|phi| > phi_u) = phi_alpha (symmetric).
///  - Pc1: base model phi = 1, Prob(phi > phi_u) = phi_alpha.
enum class Ar1PriorKind { Pc0, Pc1 };

struct PriorConfig {
  double range0 = 600.0;  // Prob(range < range0) = alpha_range
  double alpha_range = 0.5;
  double sigma0 = 3.0;  // Prob(sigma > sigma0) = alpha_sigma
  double alpha_sigma = 0.01;
  Ar1PriorKind phi_kind = Ar1PriorKind::Pc0;
  double phi_u = 0.5;
  double phi_alpha = 0.5;
  double noise_shape = 1.0;  // Gamma prior on the observation precision
  double noise_rate = 5e-5;
  double beta_prec = 1e-6;

  void validate() const;
};

double pc_range_rate(const PriorConfig& cfg);  // -ln(alpha_range) * range0
double pc_sigma_rate(const PriorConfig& cfg);  // -ln(alpha_sigma) / sigma0
double pc_ar1_rate(const PriorConfig& cfg);

/// Joint PC prior for (range, sd) in log-parametrization, Jacobians included.
double log_prior_spatial(double log_range, double log_sigma, const PriorConfig& cfg);
/// Exponential PC prior on a standard deviation, in log-parametrization.
double log_prior_sd(double log_sigma, const PriorConfig& cfg);
/// PC prior on phi expressed in theta = log((1 + phi) / (1 - phi)).
double log_prior_ar1(double theta_phi, const PriorConfig& cfg);
/// Gamma(shape, rate) on the precision, in theta = log(precision).
double log_prior_noise(double log_tau, const PriorConfig& cfg);

double phi_from_internal(double theta_phi);
double internal_from_phi(double phi);

Ar1PriorKind ar1_prior_kind_from_string(const std::string& s);
std::string to_string(Ar1PriorKind k);

}  // namespace stgmrf
