#include "stgmrf/sparse_spd.hpp"

#include "stgmrf/error.hpp"

#include <algorithm>
#include <cmath>

namespace stgmrf {

double SelectedInverse::operator()(Eigen::Index i, Eigen::Index j) const {
  const auto pos = position(i, j);
  if (pos < 0) throw Error("not_in_pattern", "requested inverse entry outside the factor pattern");
  return values_[static_cast<std::size_t>(pos)];
}

std::ptrdiff_t SelectedInverse::position(Eigen::Index i, Eigen::Index j) const {
  int r = perm_[static_cast<std::size_t>(i)], c = perm_[static_cast<std::size_t>(j)];
  if (r < c) std::swap(r, c);
  const auto first = row_idx_.begin() + col_ptr_[static_cast<std::size_t>(c)];
  const auto last = row_idx_.begin() + col_ptr_[static_cast<std::size_t>(c) + 1];
  const auto it = std::lower_bound(first, last, r);
  if (it == last || *it != r) return -1;
  return it - row_idx_.begin();
}

Eigen::VectorXd SelectedInverse::diagonal() const {
  Eigen::VectorXd d(size());
  for (Eigen::Index i = 0; i < size(); ++i) {
    const int c = perm_[static_cast<std::size_t>(i)];
    d[i] = values_[static_cast<std::size_t>(col_ptr_[static_cast<std::size_t>(c)])];
  }
  return d;
}

void SelectedInverse::entries(std::vector<int>& rows, std::vector<int>& cols) const {
  std::vector<int> inv(perm_.size());
  for (std::size_t i = 0; i < perm_.size(); ++i) inv[static_cast<std::size_t>(perm_[i])] = static_cast<int>(i);
  rows.resize(values_.size());
  cols.resize(values_.size());
  for (std::size_t c = 0; c + 1 < col_ptr_.size(); ++c)
    for (auto p = static_cast<std::size_t>(col_ptr_[c]); p < static_cast<std::size_t>(col_ptr_[c + 1]); ++p) {
      rows[p] = inv[static_cast<std::size_t>(row_idx_[p])];
      cols[p] = inv[c];
    }
}

SparseSpd::SparseSpd(SpMat full_symmetric) : matrix_(std::move(full_symmetric)) {
  if (matrix_.rows() != matrix_.cols()) throw Error("not_square", "SPD matrix must be square");
  matrix_.makeCompressed();
  diag_pos_.assign(static_cast<std::size_t>(matrix_.rows()), -1);
  for (Eigen::Index j = 0; j < matrix_.outerSize(); ++j)
    for (auto p = matrix_.outerIndexPtr()[j]; p < matrix_.outerIndexPtr()[j + 1]; ++p)
      if (matrix_.innerIndexPtr()[p] == j) diag_pos_[static_cast<std::size_t>(j)] = p;
  for (auto p : diag_pos_)
    if (p < 0) throw Error("missing_diagonal", "SPD pattern must contain the full diagonal");
}

SparseSpd::SparseSpd(const SparseSpd& other) : matrix_(other.matrix_), diag_pos_(other.diag_pos_) {}

SparseSpd& SparseSpd::operator=(const SparseSpd& other) {
  if (this != &other) {
    matrix_ = other.matrix_;
    diag_pos_ = other.diag_pos_;
    solver_.reset();
    analyzed_ = factorized_ = false;
    jitter_ = 0.0;
  }
  return *this;
}

void SparseSpd::set_values(const double* values) {
  std::copy(values, values + matrix_.nonZeros(), matrix_.valuePtr());
  factorized_ = false;
}

void SparseSpd::factorize() {
  if (!solver_) solver_ = std::make_unique<Solver>();
  if (!analyzed_) {
    solver_->analyzePattern(matrix_);
    analyzed_ = true;
  }
  factorized_ = false;
  jitter_ = 0.0;
  solver_->factorize(matrix_);
  if (solver_->info() == Eigen::Success) {
    factorized_ = true;
    return;
  }
  double mean_diag = 0.0;
  for (auto p : diag_pos_) mean_diag += matrix_.valuePtr()[p];
  mean_diag = std::abs(mean_diag) / static_cast<double>(std::max<Eigen::Index>(1, size()));
  double shift = 1e-8 * mean_diag;
  for (int attempt = 0; attempt < 4; ++attempt, shift *= 10.0) {
    SpMat shifted = matrix_;
    for (auto p : diag_pos_) shifted.valuePtr()[p] += shift;
    solver_->factorize(shifted);
    if (solver_->info() == Eigen::Success) {
      jitter_ = shift;
      factorized_ = true;
      return;
    }
  }
  throw Error("factorization_failed", "Cholesky factorization failed after jitter escalation");
}

void SparseSpd::require_factor() const {
  if (!factorized_) throw Error("not_factorized", "matrix has not been factorized");
}

double SparseSpd::log_det() const {
  require_factor();
  const SpMat& L = solver_->matrixL().nestedExpression();
  double s = 0.0;
  for (Eigen::Index j = 0; j < L.outerSize(); ++j) {
    for (auto p = L.outerIndexPtr()[j]; p < L.outerIndexPtr()[j + 1]; ++p)
      if (L.innerIndexPtr()[p] == j) {
        s += std::log(L.valuePtr()[p]);
        break;
      }
  }
  return 2.0 * s;
}

Eigen::VectorXd SparseSpd::solve(const Eigen::VectorXd& b) const {
  require_factor();
  return solver_->solve(b);
}

Eigen::MatrixXd SparseSpd::solve(const Eigen::MatrixXd& b) const {
  require_factor();
  return solver_->solve(b);
}

Eigen::VectorXd SparseSpd::sample_from_normals(const Eigen::VectorXd& z) const {
  require_factor();
  Eigen::VectorXd u = solver_->matrixU().solve(z);
  return solver_->permutationPinv() * u;
}

Eigen::VectorXd SparseSpd::sample(std::mt19937_64& rng) const {
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
  return sample_from_normals(z);
}

SelectedInverse SparseSpd::selected_inverse() const {
  require_factor();
  const SpMat& L = solver_->matrixL().nestedExpression();
  const auto n = static_cast<std::size_t>(L.cols());
  SelectedInverse S;
  S.col_ptr_.assign(L.outerIndexPtr(), L.outerIndexPtr() + n + 1);
  S.row_idx_.assign(L.innerIndexPtr(), L.innerIndexPtr() + L.nonZeros());
  std::vector<double> lval(L.valuePtr(), L.valuePtr() + L.nonZeros());
  for (std::size_t j = 0; j < n; ++j) {
    const auto b = static_cast<std::size_t>(S.col_ptr_[j]), e = static_cast<std::size_t>(S.col_ptr_[j + 1]);
    bool sorted = std::is_sorted(S.row_idx_.begin() + static_cast<std::ptrdiff_t>(b),
                                 S.row_idx_.begin() + static_cast<std::ptrdiff_t>(e));
    if (!sorted || S.row_idx_[b] != static_cast<int>(j)) {
      std::vector<std::pair<int, double>> tmp;
      for (auto p = b; p < e; ++p) tmp.emplace_back(S.row_idx_[p], lval[p]);
      std::sort(tmp.begin(), tmp.end());
      for (auto p = b; p < e; ++p) {
        S.row_idx_[p] = tmp[p - b].first;
        lval[p] = tmp[p - b].second;
      }
    }
  }
  S.values_.assign(lval.size(), 0.0);
  const auto& P = solver_->permutationP().indices();
  S.perm_.assign(P.data(), P.data() + P.size());

  // Takahashi recursion, columns right to left; all reads stay inside the factor pattern
  // because the filled graph is chordal.
  std::vector<int> slot(n, -1);
  std::vector<double> acc;
  for (std::size_t jj = n; jj-- > 0;) {
    const auto b = static_cast<std::size_t>(S.col_ptr_[jj]), e = static_cast<std::size_t>(S.col_ptr_[jj + 1]);
    const double ljj = lval[b];
    const std::size_t ns = e - b - 1;
    acc.assign(ns, 0.0);
    for (std::size_t s = 0; s < ns; ++s) slot[static_cast<std::size_t>(S.row_idx_[b + 1 + s])] = static_cast<int>(s);
    for (std::size_t s = 0; s < ns; ++s) {
      const auto k = static_cast<std::size_t>(S.row_idx_[b + 1 + s]);
      const double lkj = lval[b + 1 + s];
      const auto kb = static_cast<std::size_t>(S.col_ptr_[k]), ke = static_cast<std::size_t>(S.col_ptr_[k + 1]);
      // diagonal of column k
      acc[s] += lkj * S.values_[kb];
      for (auto p = kb + 1; p < ke; ++p) {
        const int r = slot[static_cast<std::size_t>(S.row_idx_[p])];
        if (r < 0) continue;
        const double sig = S.values_[p];
        acc[static_cast<std::size_t>(r)] += lkj * sig;
        acc[s] += lval[b + 1 + static_cast<std::size_t>(r)] * sig;
      }
    }
    double diag = 1.0 / (ljj * ljj);
    for (std::size_t s = 0; s < ns; ++s) {
      const double v = -acc[s] / ljj;
      S.values_[b + 1 + s] = v;
      diag -= lval[b + 1 + s] * v / ljj;
    }
    S.values_[b] = diag;
    for (std::size_t s = 0; s < ns; ++s) slot[static_cast<std::size_t>(S.row_idx_[b + 1 + s])] = -1;
  }
  return S;
}

}  // namespace stgmrf
