#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <memory>
#include <random>
#include <vector>

namespace stgmrf {

using SpMat = Eigen::SparseMatrix<double>;

/// Selected entries of the inverse of a factorized SPD matrix: every position in the
/// sparsity pattern of its Cholesky factor (which contains the matrix pattern).
class SelectedInverse {
public:
  SelectedInverse() = default;

  Eigen::Index size() const { return static_cast<Eigen::Index>(perm_.size()); }
  bool contains(Eigen::Index i, Eigen::Index j) const { return position(i, j) >= 0; }
  /// Throws when (i, j) lies outside the factor pattern.
  double operator()(Eigen::Index i, Eigen::Index j) const;
  Eigen::VectorXd diagonal() const;

  /// Position of (i, j) in values(), or -1.
  std::ptrdiff_t position(Eigen::Index i, Eigen::Index j) const;
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }
  /// Original (row, col) indices of every stored position, row >= col in permuted order.
  void entries(std::vector<int>& rows, std::vector<int>& cols) const;

private:
  friend class SparseSpd;
  std::vector<int> col_ptr_, row_idx_;  // lower-triangular CSC in permuted order, sorted rows
  std::vector<double> values_;
  std::vector<int> perm_;  // original index -> permuted index
};

/// Symmetric positive-definite sparse matrix with a cached fill-reducing ordering and
/// Cholesky factor. The full symmetric pattern is stored; the pattern is fixed after
/// construction so the symbolic analysis is reused across refactorizations.
class SparseSpd {
public:
  SparseSpd() = default;
  explicit SparseSpd(SpMat full_symmetric);
  SparseSpd(SparseSpd&&) noexcept = default;
  SparseSpd& operator=(SparseSpd&&) noexcept = default;
  SparseSpd(const SparseSpd& other);
  SparseSpd& operator=(const SparseSpd& other);

  Eigen::Index size() const { return matrix_.rows(); }
  const SpMat& matrix() const { return matrix_; }

  /// Replaces the stored values (same pattern, same storage order). Drops the numeric factor.
  void set_values(const double* values);

  /// Factorizes; on failure adds 1e-8 * mean(diag) to the diagonal and escalates x10 up to
  /// three times before throwing.
  void factorize();
  bool factorized() const { return factorized_; }
  /// Diagonal shift applied in the last successful factorization.
  double jitter() const { return jitter_; }

  double log_det() const;
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const;
  /// x = P^T L^{-T} z with z standard normal: a draw from N(0, A^{-1}).
  Eigen::VectorXd sample(std::mt19937_64& rng) const;
  Eigen::VectorXd sample_from_normals(const Eigen::VectorXd& z) const;
  SelectedInverse selected_inverse() const;

private:
  using Solver = Eigen::SimplicialLLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>>;
  void require_factor() const;

  SpMat matrix_;
  std::vector<Eigen::Index> diag_pos_;
  std::unique_ptr<Solver> solver_;
  bool analyzed_ = false;
  bool factorized_ = false;
  double jitter_ = 0.0;
};

}  // namespace stgmrf
