#pragma once

#include "stgmrf/sparse_spd.hpp"

#include <Eigen/Dense>

#include <memory>
#include <vector>

namespace stgmrf {

/// Covariance entries available after a factorization (selected inverse plus any dense columns).
class CovarianceLookup {
public:
  virtual ~CovarianceLookup() = default;
  /// Throws not_in_pattern for entries that were not computed.
  virtual double operator()(Eigen::Index i, Eigen::Index j) const = 0;
  virtual Eigen::VectorXd diagonal() const = 0;
};

/// Common interface of the precision factorizations used by the engine.
class PrecisionSolver {
public:
  virtual ~PrecisionSolver() = default;
  virtual Eigen::Index size() const = 0;
  /// Values aligned with the construction pattern's storage.
  virtual void set_values(const double* values) = 0;
  virtual void factorize() = 0;
  virtual double log_det() const = 0;
  virtual Eigen::VectorXd solve(const Eigen::VectorXd& b) const = 0;
  virtual Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const = 0;
  /// Draw from N(0, Q^{-1}) given standard normals.
  virtual Eigen::VectorXd sample_from_normals(const Eigen::VectorXd& z) const = 0;
  /// Selected inverse; columns listed in `dense_cols` are available in full.
  virtual std::unique_ptr<CovarianceLookup> covariance(const std::vector<int>& dense_cols) const = 0;
};

/// SPD matrix whose first m*T indices form T blocks of size m coupled only to neighbouring
/// blocks, followed by a dense border of size p. Factorized with dense block Cholesky.
class BlockTridiagSpd {
public:
  /// `pattern`: full symmetric CSC pattern; values passed to set_values follow its storage.
  BlockTridiagSpd(const SpMat& pattern, int m, int T, int p);

  Eigen::Index size() const { return static_cast<Eigen::Index>(m_) * T_ + p_; }
  void set_values(const double* values);
  void factorize();
  double log_det() const;
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const;
  Eigen::VectorXd sample_from_normals(const Eigen::VectorXd& z) const;

  /// Inverse restricted to diagonal and first sub-diagonal blocks, plus the full border columns.
  struct Inverse {
    int m = 0, T = 0, p = 0;
    std::vector<Eigen::MatrixXd> diag, sub;  // sub[t] = Sigma_{t+1, t}
    Eigen::MatrixXd border;                  // (mT + p) x p: Sigma[:, border]
    double operator()(Eigen::Index i, Eigen::Index j) const;
  };
  Inverse selected_inverse() const;

private:
  void forward(Eigen::MatrixXd& y) const;   // y <- L^{-1} y
  void backward(Eigen::MatrixXd& x) const;  // x <- L^{-T} x
  bool try_factor(double shift);

  int m_, T_, p_;
  Eigen::Index nnz_ = 0;
  // destination of each pattern entry (lower triangle only): kind, block, row, col
  struct Dest {
    int kind = -1;  // 0 diag block, 1 sub block, 2 border, 3 corner, -1 upper (ignored)
    int block = 0, r = 0, c = 0;
  };
  std::vector<Dest> dest_;
  std::vector<Eigen::MatrixXd> a_diag_, a_sub_, a_border_;  // A_tt, A_{t+1,t}, C_t (m x p)
  Eigen::MatrixXd a_corner_;
  std::vector<Eigen::MatrixXd> l_diag_, l_sub_, w_;  // factor blocks
  Eigen::MatrixXd l_corner_;
  bool factorized_ = false;
};

std::unique_ptr<PrecisionSolver> make_sparse_solver(const SpMat& pattern);
std::unique_ptr<PrecisionSolver> make_block_solver(const SpMat& pattern, int m, int T, int p);

}  // namespace stgmrf
