#include "stgmrf/priors.hpp"

#include "stgmrf/error.hpp"

#include <cmath>
#include <numbers>

namespace stgmrf {
namespace {

// -log(1 - phi^2) evaluated from theta without cancellation.
double neg_log_one_minus_phi2(double theta) {
  const double a = std::abs(theta);
  return a + 2.0 * std::log1p(std::exp(-a)) - 2.0 * std::numbers::ln2;
}

double pc1_tail(double lambda, double u) {
  return -std::expm1(-lambda * std::sqrt(1.0 - u)) / -std::expm1(-lambda * std::sqrt(2.0));
}

}  // namespace

void PriorConfig::validate() const {
  auto prob = [](double p) { return p > 0.0 && p < 1.0; };
  if (!prob(alpha_range) || !prob(alpha_sigma) || !prob(phi_alpha))
    throw Error("invalid_prior", "prior tail probabilities must lie in (0, 1)");
  if (!(range0 > 0 && sigma0 > 0 && noise_shape > 0 && noise_rate > 0 && beta_prec > 0))
    throw Error("invalid_prior", "prior scale parameters must be positive");
  if (phi_kind == Ar1PriorKind::Pc0 && !(phi_u > 0.0 && phi_u < 1.0))
    throw Error("invalid_prior", "phi_u must lie in (0, 1) for the base-0 prior");
  if (phi_kind == Ar1PriorKind::Pc1) {
    if (!(phi_u > -1.0 && phi_u < 1.0)) throw Error("invalid_prior", "phi_u must lie in (-1, 1)");
    const double lo = std::sqrt((1.0 - phi_u) / 2.0);
    if (!(phi_alpha > lo)) throw Error("invalid_prior", "phi_alpha too small to calibrate the base-1 prior");
  }
}

double pc_range_rate(const PriorConfig& cfg) { return -std::log(cfg.alpha_range) * cfg.range0; }

double pc_sigma_rate(const PriorConfig& cfg) { return -std::log(cfg.alpha_sigma) / cfg.sigma0; }

double pc_ar1_rate(const PriorConfig& cfg) {
  if (cfg.phi_kind == Ar1PriorKind::Pc0) return -std::log(cfg.phi_alpha) / std::sqrt(-std::log1p(-cfg.phi_u * cfg.phi_u));
  // tail probability is increasing in lambda; bisect on a log scale
  double lo = 1e-8, hi = 1e4;
  for (int it = 0; it < 200; ++it) {
    const double mid = std::sqrt(lo * hi);
    (pc1_tail(mid, cfg.phi_u) < cfg.phi_alpha ? lo : hi) = mid;
  }
  return std::sqrt(lo * hi);
}

double log_prior_spatial(double log_range, double log_sigma, const PriorConfig& cfg) {
  const double lr = pc_range_rate(cfg);
  // density of log r: lambda_r r^{-1} exp(-lambda_r / r)
  const double range_part = std::log(lr) - log_range - lr * std::exp(-log_range);
  return range_part + log_prior_sd(log_sigma, cfg);
}

double log_prior_sd(double log_sigma, const PriorConfig& cfg) {
  const double ls = pc_sigma_rate(cfg);
  return std::log(ls) + log_sigma - ls * std::exp(log_sigma);
}

double log_prior_ar1(double theta_phi, const PriorConfig& cfg) {
  const double lambda = pc_ar1_rate(cfg);
  const double phi = phi_from_internal(theta_phi);
  if (cfg.phi_kind == Ar1PriorKind::Pc0) {
    const double d2 = neg_log_one_minus_phi2(theta_phi);
    const double d = std::sqrt(std::max(d2, 0.0));
    // |phi| / d -> 1 as phi -> 0
    const double ratio = std::abs(phi) > 1e-4 ? std::abs(phi) / d : 1.0 - phi * phi / 4.0;
    return std::log(lambda / 4.0) - lambda * d + std::log(ratio);
  }
  // base model phi = 1; d = sqrt(1 - phi), 1 - phi = 2 / (1 + e^theta)
  const double one_minus = 2.0 / (1.0 + std::exp(theta_phi));
  const double d = std::sqrt(one_minus);
  const double log_jac = std::log1p(phi) + std::log(one_minus) - std::numbers::ln2;  // (1 - phi^2) / 2
  return std::log(lambda) - lambda * d - std::log(2.0 * d) - std::log(-std::expm1(-lambda * std::sqrt(2.0))) + log_jac;
}

double log_prior_noise(double log_tau, const PriorConfig& cfg) {
  return cfg.noise_shape * std::log(cfg.noise_rate) - std::lgamma(cfg.noise_shape) + cfg.noise_shape * log_tau -
         cfg.noise_rate * std::exp(log_tau);
}

double phi_from_internal(double theta_phi) { return std::tanh(0.5 * theta_phi); }

double internal_from_phi(double phi) {
  if (!(std::abs(phi) < 1.0)) throw Error("invalid_parameter", "phi must satisfy |phi| < 1");
  return std::log1p(phi) - std::log1p(-phi);
}

Ar1PriorKind ar1_prior_kind_from_string(const std::string& s) {
  if (s == "pc0") return Ar1PriorKind::Pc0;
  if (s == "pc1") return Ar1PriorKind::Pc1;
  throw Error("invalid_config", "unknown AR(1) prior kind '" + s + "' (expected pc0 or pc1)", s);
}

std::string to_string(Ar1PriorKind k) { return k == Ar1PriorKind::Pc0 ? "pc0" : "pc1"; }

}  // namespace stgmrf
