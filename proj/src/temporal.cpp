#include "stgmrf/temporal.hpp"

#include "stgmrf/error.hpp"

#include <cmath>

namespace stgmrf {

void Ar1Params::validate() const {
  if (!(std::abs(phi) < 1.0)) throw Error("invalid_parameter", "AR(1) coefficient must satisfy |phi| < 1");
  if (T < 1) throw Error("invalid_parameter", "AR(1) length must be positive");
}

Ar1Blocks Ar1Blocks::make(int T) {
  if (T < 1) throw Error("invalid_parameter", "AR(1) length must be positive");
  using Trip = Eigen::Triplet<double>;
  std::vector<Trip> base, quad, off;
  for (int t = 0; t < T; ++t) {
    const bool end = (t == 0 || t == T - 1);
    base.emplace_back(t, t, 1.0);
    quad.emplace_back(t, t, T == 1 ? -1.0 : (end ? 0.0 : 1.0));
    off.emplace_back(t, t, 0.0);
    if (t + 1 < T) {
      for (auto* v : {&base, &quad}) {
        v->emplace_back(t, t + 1, 0.0);
        v->emplace_back(t + 1, t, 0.0);
      }
      off.emplace_back(t, t + 1, 1.0);
      off.emplace_back(t + 1, t, 1.0);
    }
  }
  Ar1Blocks b;
  auto fill = [T](SpMat& m, const std::vector<Trip>& trips) {
    m.resize(T, T);
    m.setFromTriplets(trips.begin(), trips.end());
    m.makeCompressed();
  };
  fill(b.base, base);
  fill(b.quad, quad);
  fill(b.off, off);
  return b;
}

SpMat Ar1Blocks::precision(double phi) const {
  SpMat q = base;
  for (Eigen::Index k = 0; k < q.nonZeros(); ++k)
    q.valuePtr()[k] = base.valuePtr()[k] + phi * phi * quad.valuePtr()[k] - phi * off.valuePtr()[k];
  return q;
}

SparseSpd ar1_precision(const Ar1Params& p) {
  p.validate();
  SparseSpd q(Ar1Blocks::make(p.T).precision(p.phi));
  q.factorize();
  return q;
}

double ar1_log_det(const Ar1Params& p) {
  p.validate();
  return std::log1p(-p.phi * p.phi);
}

SpMat kronecker(const SpMat& a, const SpMat& b, Eigen::Index cap) {
  const Eigen::Index rows = a.rows() * b.rows(), cols = a.cols() * b.cols();
  if (a.rows() != 0 && rows / a.rows() != b.rows()) throw Error("dimension_overflow", "Kronecker size overflow");
  if (rows > cap || cols > cap)
    throw Error("dimension_overflow", "Kronecker product exceeds the configured size cap", std::to_string(rows));
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(a.nonZeros() * b.nonZeros()));
  for (Eigen::Index ja = 0; ja < a.outerSize(); ++ja)
    for (SpMat::InnerIterator ia(a, ja); ia; ++ia)
      for (Eigen::Index jb = 0; jb < b.outerSize(); ++jb)
        for (SpMat::InnerIterator ib(b, jb); ib; ++ib)
          trip.emplace_back(ia.row() * b.rows() + ib.row(), ia.col() * b.cols() + ib.col(), ia.value() * ib.value());
  SpMat out(rows, cols);
  out.setFromTriplets(trip.begin(), trip.end());
  out.makeCompressed();
  return out;
}

SparseSpd kronecker_precision(const SparseSpd& q_t, const SparseSpd& q_s, Eigen::Index cap) {
  return SparseSpd(kronecker(q_t.matrix(), q_s.matrix(), cap));
}

Eigen::MatrixXd simulate_st_field_from_normals(const Ar1Params& p, const SparseSpd& q_s, const Eigen::MatrixXd& z) {
  p.validate();
  const Eigen::Index m = q_s.size();
  if (z.rows() != p.T || z.cols() != m) throw Error("dimension_mismatch", "innovation matrix must be T x m");
  Eigen::MatrixXd xi(p.T, m);
  const double stationary = 1.0 / std::sqrt(1.0 - p.phi * p.phi);
  for (int t = 0; t < p.T; ++t) {
    const Eigen::VectorXd w = q_s.sample_from_normals(z.row(t).transpose());
    if (t == 0)
      xi.row(0) = stationary * w.transpose();
    else
      xi.row(t) = p.phi * xi.row(t - 1) + w.transpose();
  }
  return xi;
}

Eigen::MatrixXd simulate_st_field(const Ar1Params& p, const SparseSpd& q_s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd z(p.T, q_s.size());
  for (int t = 0; t < p.T; ++t)
    for (Eigen::Index i = 0; i < q_s.size(); ++i) z(t, i) = normal(rng);
  return simulate_st_field_from_normals(p, q_s, z);
}

}  // namespace stgmrf
