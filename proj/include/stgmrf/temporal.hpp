#pragma once

#include "stgmrf/sparse_spd.hpp"

#include <cstdint>

namespace stgmrf {

struct Ar1Params {
  double phi = 0.0;
  int T = 1;

  void validate() const;
};

/// Index layout of a stacked space-time vector: vertex index varies fastest within
/// each time block. Every consumer goes through this type.
struct StLayout {
  int m = 0;  // vertices
  int T = 0;  // time points

  Eigen::Index size() const { return static_cast<Eigen::Index>(m) * T; }
  /// `t` is zero-based.
  Eigen::Index index(int t, int vertex) const { return static_cast<Eigen::Index>(t) * m + vertex; }
  int time_of(Eigen::Index k) const { return static_cast<int>(k / m); }
  int vertex_of(Eigen::Index k) const { return static_cast<int>(k % m); }
};

/// Building blocks with Q_T = base + phi^2 * quad - phi * off. For T = 1 the
/// single entry is 1 - phi^2 so that the stationary variance is 1 / (1 - phi^2).
struct Ar1Blocks {
  SpMat base, quad, off;  // all on the tridiagonal pattern
  static Ar1Blocks make(int T);
  SpMat precision(double phi) const;
};

/// Tridiagonal AR(1) precision with unit innovation variance.
SparseSpd ar1_precision(const Ar1Params& p);
double ar1_log_det(const Ar1Params& p);

inline constexpr Eigen::Index kDefaultKroneckerCap = 200'000'000;

/// Q_T ⊗ Q_s with the vertex-fastest layout; explicit zeros are kept so nnz is the product.
SpMat kronecker(const SpMat& a, const SpMat& b, Eigen::Index cap = kDefaultKroneckerCap);
SparseSpd kronecker_precision(const SparseSpd& q_t, const SparseSpd& q_s, Eigen::Index cap = kDefaultKroneckerCap);

/// Returns a T x m matrix; row t is the field at time t. q_s must be factorized.
Eigen::MatrixXd simulate_st_field(const Ar1Params& p, const SparseSpd& q_s, std::uint64_t seed);
/// Same recursion driven by caller-provided innovations (T x m standard normals).
Eigen::MatrixXd simulate_st_field_from_normals(const Ar1Params& p, const SparseSpd& q_s, const Eigen::MatrixXd& z);

}  // namespace stgmrf
