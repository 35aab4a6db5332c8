#include "stgmrf/spde.hpp"

#include "stgmrf/error.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace stgmrf {

void SpdeConfig::validate() const {
  if (d != 2 || nu != 1.0 || alpha != 2.0)
    throw Error("unsupported_smoothness", "only nu = 1, d = 2 (alpha = 2) is supported");
  if (alpha != nu + d / 2.0) throw Error("invalid_spde_config", "alpha must equal nu + d/2");
}

MaternParams convert_params(double range, double sigma_omega) {
  if (!(range > 0) || !(sigma_omega > 0))
    throw Error("invalid_parameter", "range and sigma must be positive");
  MaternParams p;
  p.range = range;
  p.sigma_omega = sigma_omega;
  p.kappa = std::sqrt(8.0) / range;
  p.tau = 1.0 / (2.0 * std::sqrt(std::numbers::pi) * p.kappa * sigma_omega);
  return p;
}

MaternParams from_kappa_tau(double kappa, double tau) {
  if (!(kappa > 0) || !(tau > 0)) throw Error("invalid_parameter", "kappa and tau must be positive");
  MaternParams p;
  p.kappa = kappa;
  p.tau = tau;
  p.range = std::sqrt(8.0) / kappa;
  p.sigma_omega = 1.0 / (2.0 * std::sqrt(std::numbers::pi) * kappa * tau);
  return p;
}

double matern_correlation(double h, const MaternParams& params) {
  if (h < 0) throw Error("invalid_parameter", "distance must be non-negative");
  const double u = params.kappa * h;
  if (u < 1e-12) return 1.0;
  if (u > 700.0) return 0.0;
  return u * std::cyl_bessel_k(1.0, u);
}

Eigen::VectorXd align_to_pattern(const SpMat& pattern, const SpMat& m) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(pattern.nonZeros());
  for (Eigen::Index j = 0; j < m.outerSize(); ++j) {
    auto p = pattern.outerIndexPtr()[j];
    const auto pe = pattern.outerIndexPtr()[j + 1];
    for (SpMat::InnerIterator it(m, j); it; ++it) {
      while (p < pe && pattern.innerIndexPtr()[p] < it.row()) ++p;
      if (p == pe || pattern.innerIndexPtr()[p] != it.row())
        throw Error("pattern_mismatch", "matrix entry outside the target pattern");
      out[p] += it.value();
    }
  }
  return out;
}

SpdeOperators SpdeOperators::from_fem(const FemMatrices& fem) {
  SpdeOperators ops;
  const SpMat C = fem.C();
  SpMat Cinv = C;
  for (Eigen::Index i = 0; i < Cinv.outerSize(); ++i)
    for (SpMat::InnerIterator it(Cinv, i); it; ++it) it.valueRef() = 1.0 / it.value();
  SpMat K = fem.G * Cinv * fem.G;
  K = 0.5 * (K + SpMat(K.transpose()));
  // structural union of the three matrices; zero coefficients keep every position
  SpMat pat = C + fem.G + K;
  for (Eigen::Index j = 0; j < pat.outerSize(); ++j)
    for (SpMat::InnerIterator it(pat, j); it; ++it) it.valueRef() = 1.0;
  pat.makeCompressed();
  ops.pattern = pat;
  ops.c_values = align_to_pattern(pat, C);
  ops.g_values = align_to_pattern(pat, fem.G);
  ops.k_values = align_to_pattern(pat, K);
  return ops;
}

Eigen::VectorXd SpdeOperators::precision_values(const MaternParams& p) const {
  const double k2 = p.kappa * p.kappa;
  const double t2 = p.tau * p.tau;
  return t2 * (k2 * k2 * c_values + 2.0 * k2 * g_values + k_values);
}

SpMat SpdeOperators::precision(const MaternParams& p) const {
  SpMat q = pattern;
  const Eigen::VectorXd v = precision_values(p);
  std::copy(v.data(), v.data() + v.size(), q.valuePtr());
  return q;
}

SparseSpd spatial_precision(const FemMatrices& fem, const MaternParams& params) {
  const auto ops = SpdeOperators::from_fem(fem);
  SparseSpd q(ops.precision(params));
  q.factorize();
  return q;
}

Eigen::VectorXd sample_spatial_field(SparseSpd& q_s, std::uint64_t seed) {
  if (!q_s.factorized()) q_s.factorize();
  std::mt19937_64 rng(seed);
  return q_s.sample(rng);
}

void write_coordinate_csv(const SpMat& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_failed", "cannot write matrix dump", path);
  f << "row,col,value\n";
  char buf[96];
  for (Eigen::Index j = 0; j < m.outerSize(); ++j)
    for (SpMat::InnerIterator it(m, j); it; ++it) {
      std::snprintf(buf, sizeof buf, "%lld,%lld,%.17g\n", static_cast<long long>(it.row()),
                    static_cast<long long>(it.col()), it.value());
      f << buf;
    }
}

}  // namespace stgmrf
