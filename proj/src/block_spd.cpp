#include "stgmrf/block_spd.hpp"

#include "stgmrf/error.hpp"

#include <cmath>

namespace stgmrf {

using Eigen::MatrixXd;

BlockTridiagSpd::BlockTridiagSpd(const SpMat& pattern, int m, int T, int p) : m_(m), T_(T), p_(p) {
  if (m < 1 || T < 1 || p < 0 || pattern.rows() != size() || pattern.cols() != size())
    throw Error("dimension_mismatch", "block layout does not match the pattern size");
  nnz_ = pattern.nonZeros();
  dest_.resize(static_cast<std::size_t>(nnz_));
  const Eigen::Index mt = static_cast<Eigen::Index>(m) * T;
  for (Eigen::Index c = 0; c < pattern.outerSize(); ++c)
    for (auto k = pattern.outerIndexPtr()[c]; k < pattern.outerIndexPtr()[c + 1]; ++k) {
      const Eigen::Index r = pattern.innerIndexPtr()[k];
      Dest d;
      if (r >= c) {
        if (c >= mt) {
          d = {3, 0, static_cast<int>(r - mt), static_cast<int>(c - mt)};
        } else if (r >= mt) {
          d = {2, static_cast<int>(c / m), static_cast<int>(c % m), static_cast<int>(r - mt)};
        } else {
          const auto tr = r / m, tc = c / m;
          if (tr == tc)
            d = {0, static_cast<int>(tc), static_cast<int>(r % m), static_cast<int>(c % m)};
          else if (tr == tc + 1)
            d = {1, static_cast<int>(tc), static_cast<int>(r % m), static_cast<int>(c % m)};
          else
            throw Error("pattern_mismatch", "pattern couples non-adjacent time blocks");
        }
      }
      dest_[static_cast<std::size_t>(k)] = d;
    }
  a_diag_.assign(static_cast<std::size_t>(T), MatrixXd::Zero(m, m));
  a_sub_.assign(static_cast<std::size_t>(std::max(T - 1, 0)), MatrixXd::Zero(m, m));
  a_border_.assign(static_cast<std::size_t>(T), MatrixXd::Zero(m, p));
  a_corner_ = MatrixXd::Zero(p, p);
}

void BlockTridiagSpd::set_values(const double* values) {
  for (auto& b : a_diag_) b.setZero();
  for (auto& b : a_sub_) b.setZero();
  for (auto& b : a_border_) b.setZero();
  a_corner_.setZero();
  for (Eigen::Index k = 0; k < nnz_; ++k) {
    const Dest& d = dest_[static_cast<std::size_t>(k)];
    const double v = values[k];
    switch (d.kind) {
      case 0: {
        auto& b = a_diag_[static_cast<std::size_t>(d.block)];
        b(d.r, d.c) = v;
        b(d.c, d.r) = v;
        break;
      }
      case 1: a_sub_[static_cast<std::size_t>(d.block)](d.r, d.c) = v; break;
      case 2: a_border_[static_cast<std::size_t>(d.block)](d.r, d.c) = v; break;
      case 3:
        a_corner_(d.r, d.c) = v;
        a_corner_(d.c, d.r) = v;
        break;
      default: break;
    }
  }
  factorized_ = false;
}

bool BlockTridiagSpd::try_factor(double shift) {
  const auto T = static_cast<std::size_t>(T_);
  l_diag_.resize(T);
  l_sub_.resize(T > 0 ? T - 1 : 0);
  w_.resize(T);
  MatrixXd M;
  for (std::size_t t = 0; t < T; ++t) {
    M = a_diag_[t];
    M.diagonal().array() += shift;
    if (t > 0) M.noalias() -= l_sub_[t - 1] * l_sub_[t - 1].transpose();
    Eigen::LLT<MatrixXd> llt(M);
    if (llt.info() != Eigen::Success) return false;
    l_diag_[t] = llt.matrixL();
    const auto L = l_diag_[t].triangularView<Eigen::Lower>();
    if (t + 1 < T) l_sub_[t] = L.solve(a_sub_[t].transpose()).transpose();
    w_[t] = a_border_[t];
    if (t > 0) w_[t].noalias() -= l_sub_[t - 1] * w_[t - 1];
    L.solveInPlace(w_[t]);
  }
  M = a_corner_;
  M.diagonal().array() += shift;
  for (std::size_t t = 0; t < T; ++t) M.noalias() -= w_[t].transpose() * w_[t];
  if (p_ > 0) {
    Eigen::LLT<MatrixXd> llt(M);
    if (llt.info() != Eigen::Success) return false;
    l_corner_ = llt.matrixL();
  } else {
    l_corner_.resize(0, 0);
  }
  return true;
}

void BlockTridiagSpd::factorize() {
  factorized_ = false;
  if (try_factor(0.0)) {
    factorized_ = true;
    return;
  }
  double mean_diag = 0.0;
  for (const auto& b : a_diag_) mean_diag += b.diagonal().sum();
  mean_diag += a_corner_.diagonal().sum();
  mean_diag = std::abs(mean_diag) / static_cast<double>(std::max<Eigen::Index>(1, size()));
  double shift = 1e-8 * mean_diag;
  for (int attempt = 0; attempt < 4; ++attempt, shift *= 10.0)
    if (try_factor(shift)) {
      factorized_ = true;
      return;
    }
  throw Error("factorization_failed", "block Cholesky factorization failed after jitter escalation");
}

double BlockTridiagSpd::log_det() const {
  if (!factorized_) throw Error("not_factorized", "matrix has not been factorized");
  double s = 0.0;
  for (const auto& L : l_diag_) s += L.diagonal().array().log().sum();
  if (p_ > 0) s += l_corner_.diagonal().array().log().sum();
  return 2.0 * s;
}

void BlockTridiagSpd::forward(MatrixXd& y) const {
  const auto mt = static_cast<Eigen::Index>(m_) * T_;
  for (int t = 0; t < T_; ++t) {
    auto yt = y.middleRows(static_cast<Eigen::Index>(t) * m_, m_);
    if (t > 0) yt.noalias() -= l_sub_[static_cast<std::size_t>(t - 1)] * y.middleRows(static_cast<Eigen::Index>(t - 1) * m_, m_);
    l_diag_[static_cast<std::size_t>(t)].triangularView<Eigen::Lower>().solveInPlace(yt);
  }
  if (p_ > 0) {
    auto yd = y.bottomRows(p_);
    for (int t = 0; t < T_; ++t)
      yd.noalias() -= w_[static_cast<std::size_t>(t)].transpose() * y.middleRows(static_cast<Eigen::Index>(t) * m_, m_);
    l_corner_.triangularView<Eigen::Lower>().solveInPlace(yd);
  }
  (void)mt;
}

void BlockTridiagSpd::backward(MatrixXd& x) const {
  if (p_ > 0) l_corner_.triangularView<Eigen::Lower>().transpose().solveInPlace(x.bottomRows(p_));
  for (int t = T_ - 1; t >= 0; --t) {
    auto xt = x.middleRows(static_cast<Eigen::Index>(t) * m_, m_);
    if (t + 1 < T_) xt.noalias() -= l_sub_[static_cast<std::size_t>(t)].transpose() * x.middleRows(static_cast<Eigen::Index>(t + 1) * m_, m_);
    if (p_ > 0) xt.noalias() -= w_[static_cast<std::size_t>(t)] * x.bottomRows(p_);
    l_diag_[static_cast<std::size_t>(t)].triangularView<Eigen::Lower>().transpose().solveInPlace(xt);
  }
}

MatrixXd BlockTridiagSpd::solve(const MatrixXd& b) const {
  if (!factorized_) throw Error("not_factorized", "matrix has not been factorized");
  MatrixXd x = b;
  forward(x);
  backward(x);
  return x;
}

Eigen::VectorXd BlockTridiagSpd::sample_from_normals(const Eigen::VectorXd& z) const {
  if (!factorized_) throw Error("not_factorized", "matrix has not been factorized");
  MatrixXd x = z;
  backward(x);
  return x.col(0);
}

double BlockTridiagSpd::Inverse::operator()(Eigen::Index i, Eigen::Index j) const {
  if (i < j) std::swap(i, j);
  const Eigen::Index mt = static_cast<Eigen::Index>(m) * T;
  if (j >= mt) return border(i, j - mt);
  if (i >= mt) return border(j, i - mt);
  const auto ti = i / m, tj = j / m;
  if (ti == tj) return diag[static_cast<std::size_t>(ti)](i % m, j % m);
  if (ti == tj + 1) return sub[static_cast<std::size_t>(tj)](i % m, j % m);
  throw Error("not_in_pattern", "requested inverse entry outside the block pattern");
}

BlockTridiagSpd::Inverse BlockTridiagSpd::selected_inverse() const {
  if (!factorized_) throw Error("not_factorized", "matrix has not been factorized");
  const auto T = static_cast<std::size_t>(T_);
  Inverse inv;
  inv.m = m_, inv.T = T_, inv.p = p_;
  inv.diag.resize(T);
  inv.sub.resize(T > 0 ? T - 1 : 0);

  // block Takahashi recursion for A^{-1}
  std::vector<MatrixXd> linv(T);
  for (std::size_t t = 0; t < T; ++t)
    linv[t] = l_diag_[t].triangularView<Eigen::Lower>().solve(MatrixXd::Identity(m_, m_));
  inv.diag[T - 1].noalias() = linv[T - 1].transpose() * linv[T - 1];
  for (std::size_t t = T - 1; t-- > 0;) {
    const MatrixXd G = l_sub_[t] * linv[t];
    inv.sub[t].noalias() = -inv.diag[t + 1] * G;
    inv.diag[t].noalias() = linv[t].transpose() * linv[t];
    inv.diag[t].noalias() -= inv.sub[t].transpose() * G;
  }

  const Eigen::Index mt = static_cast<Eigen::Index>(m_) * T_;
  inv.border = MatrixXd::Zero(mt + p_, p_);
  if (p_ > 0) {
    const MatrixXd lcinv = l_corner_.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(p_, p_));
    const MatrixXd sinv = lcinv.transpose() * lcinv;
    // U = A^{-1} C = L_A^{-T} W
    MatrixXd U(mt, p_);
    for (int t = T_ - 1; t >= 0; --t) {
      auto ut = U.middleRows(static_cast<Eigen::Index>(t) * m_, m_);
      ut = w_[static_cast<std::size_t>(t)];
      if (t + 1 < T_) ut.noalias() -= l_sub_[static_cast<std::size_t>(t)].transpose() * U.middleRows(static_cast<Eigen::Index>(t + 1) * m_, m_);
      l_diag_[static_cast<std::size_t>(t)].triangularView<Eigen::Lower>().transpose().solveInPlace(ut);
    }
    const MatrixXd US = U * sinv;
    inv.border.topRows(mt) = -US;
    inv.border.bottomRows(p_) = sinv;
    for (int t = 0; t < T_; ++t) {
      const auto r = static_cast<Eigen::Index>(t) * m_;
      inv.diag[static_cast<std::size_t>(t)].noalias() += US.middleRows(r, m_) * U.middleRows(r, m_).transpose();
      if (t + 1 < T_)
        inv.sub[static_cast<std::size_t>(t)].noalias() += US.middleRows(r + m_, m_) * U.middleRows(r, m_).transpose();
    }
  }
  return inv;
}

// ---------------------------------------------------------------------------
// Solver adapters

namespace {

/// Dense columns computed by solves, consulted before the selected entries.
struct DenseColumns {
  std::vector<int> slot;  // index -> column in `cols`, or -1
  MatrixXd cols;

  template <class Solver>
  void build(const Solver& s, Eigen::Index n, const std::vector<int>& which) {
    slot.assign(static_cast<std::size_t>(n), -1);
    if (which.empty()) return;
    MatrixXd E = MatrixXd::Zero(n, static_cast<Eigen::Index>(which.size()));
    for (std::size_t k = 0; k < which.size(); ++k) {
      E(which[k], static_cast<Eigen::Index>(k)) = 1.0;
      slot[static_cast<std::size_t>(which[k])] = static_cast<int>(k);
    }
    cols = s.solve(E);
  }
  bool lookup(Eigen::Index i, Eigen::Index j, double& v) const {
    if (slot.empty()) return false;
    if (const int k = slot[static_cast<std::size_t>(j)]; k >= 0) return v = cols(i, k), true;
    if (const int k = slot[static_cast<std::size_t>(i)]; k >= 0) return v = cols(j, k), true;
    return false;
  }
};

class SparseCovariance final : public CovarianceLookup {
public:
  SelectedInverse sel;
  DenseColumns dense;
  double operator()(Eigen::Index i, Eigen::Index j) const override {
    double v;
    if (dense.lookup(i, j, v)) return v;
    return sel(i, j);
  }
  Eigen::VectorXd diagonal() const override { return sel.diagonal(); }
};

class SparseSolver final : public PrecisionSolver {
public:
  explicit SparseSolver(const SpMat& pattern) : spd_(pattern) {}
  Eigen::Index size() const override { return spd_.size(); }
  void set_values(const double* v) override { spd_.set_values(v); }
  void factorize() override { spd_.factorize(); }
  double log_det() const override { return spd_.log_det(); }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const override { return spd_.solve(b); }
  MatrixXd solve(const MatrixXd& b) const override { return spd_.solve(b); }
  Eigen::VectorXd sample_from_normals(const Eigen::VectorXd& z) const override { return spd_.sample_from_normals(z); }
  std::unique_ptr<CovarianceLookup> covariance(const std::vector<int>& dense_cols) const override {
    auto c = std::make_unique<SparseCovariance>();
    c->sel = spd_.selected_inverse();
    c->dense.build(spd_, size(), dense_cols);
    return c;
  }

private:
  SparseSpd spd_;
};

class BlockCovariance final : public CovarianceLookup {
public:
  BlockTridiagSpd::Inverse inv;
  DenseColumns dense;
  double operator()(Eigen::Index i, Eigen::Index j) const override {
    double v;
    if (dense.lookup(i, j, v)) return v;
    return inv(i, j);
  }
  Eigen::VectorXd diagonal() const override {
    const Eigen::Index mt = static_cast<Eigen::Index>(inv.m) * inv.T;
    Eigen::VectorXd d(mt + inv.p);
    for (int t = 0; t < inv.T; ++t) d.segment(static_cast<Eigen::Index>(t) * inv.m, inv.m) = inv.diag[static_cast<std::size_t>(t)].diagonal();
    for (int k = 0; k < inv.p; ++k) d[mt + k] = inv.border(mt + k, k);
    return d;
  }
};

class BlockSolver final : public PrecisionSolver {
public:
  BlockSolver(const SpMat& pattern, int m, int T, int p) : spd_(pattern, m, T, p), mt_(static_cast<Eigen::Index>(m) * T) {}
  Eigen::Index size() const override { return spd_.size(); }
  void set_values(const double* v) override { spd_.set_values(v); }
  void factorize() override { spd_.factorize(); }
  double log_det() const override { return spd_.log_det(); }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const override { return spd_.solve(MatrixXd(b)).col(0); }
  MatrixXd solve(const MatrixXd& b) const override { return spd_.solve(b); }
  Eigen::VectorXd sample_from_normals(const Eigen::VectorXd& z) const override { return spd_.sample_from_normals(z); }
  std::unique_ptr<CovarianceLookup> covariance(const std::vector<int>& dense_cols) const override {
    auto c = std::make_unique<BlockCovariance>();
    c->inv = spd_.selected_inverse();
    std::vector<int> extra;  // border columns are already dense
    for (int j : dense_cols)
      if (j < mt_) extra.push_back(j);
    c->dense.build(*this, size(), extra);
    return c;
  }

private:
  BlockTridiagSpd spd_;
  Eigen::Index mt_;
};

}  // namespace

std::unique_ptr<PrecisionSolver> make_sparse_solver(const SpMat& pattern) { return std::make_unique<SparseSolver>(pattern); }

std::unique_ptr<PrecisionSolver> make_block_solver(const SpMat& pattern, int m, int T, int p) {
  return std::make_unique<BlockSolver>(pattern, m, T, p);
}

}  // namespace stgmrf
