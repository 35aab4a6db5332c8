#pragma once

#include "stgmrf/mesh.hpp"
#include "stgmrf/sparse_spd.hpp"

#include <cstdint>

namespace stgmrf {

/// Smoothness is fixed: nu = 1, d = 2, alpha = nu + d/2 = 2.
struct SpdeConfig {
  double nu = 1.0;
  double alpha = 2.0;
  int d = 2;

  void validate() const;
};

/// Matérn parameters in both the (range, sd) and (kappa, tau) forms.
struct MaternParams {
  double sigma_omega = 1.0;
  double range = 1.0;
  double kappa = std::sqrt(8.0);
  double tau = 1.0;
};

MaternParams convert_params(double range, double sigma_omega);
MaternParams from_kappa_tau(double kappa, double tau);

/// Matérn correlation for nu = 1: (kappa h) K1(kappa h), equal to 1 at h = 0.
double matern_correlation(double h, const MaternParams& params);

/// The three sparse building blocks of the alpha = 2 precision:
/// Q_s = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G), all stored on one shared pattern.
struct SpdeOperators {
  SpMat pattern;  // union pattern, values unused
  Eigen::VectorXd c_values, g_values, k_values;  // aligned with pattern storage

  static SpdeOperators from_fem(const FemMatrices& fem);
  Eigen::Index size() const { return pattern.rows(); }
  /// Values of Q_s aligned with `pattern`.
  Eigen::VectorXd precision_values(const MaternParams& p) const;
  SpMat precision(const MaternParams& p) const;
};

SparseSpd spatial_precision(const FemMatrices& fem, const MaternParams& params);

/// Draw from N(0, Q_s^{-1}); factorizes on demand.
Eigen::VectorXd sample_spatial_field(SparseSpd& q_s, std::uint64_t seed);

void write_coordinate_csv(const SpMat& m, const std::string& path);

/// Values of `m` on the storage positions of `pattern` (zero where m has no entry).
/// `m`'s pattern must be a subset of `pattern`'s.
Eigen::VectorXd align_to_pattern(const SpMat& pattern, const SpMat& m);

}  // namespace stgmrf
