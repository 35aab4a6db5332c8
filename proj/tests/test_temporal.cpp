#include "stgmrf/error.hpp"
#include "stgmrf/spde.hpp"
#include "stgmrf/temporal.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <random>

using namespace stgmrf;

namespace {

// stationary AR(1) covariance with unit innovations: phi^|i-j| / (1 - phi^2)
Eigen::MatrixXd ar1_covariance(int T, double phi) {
  Eigen::MatrixXd S(T, T);
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < T; ++j) S(i, j) = std::pow(phi, std::abs(i - j)) / (1.0 - phi * phi);
  return S;
}

Eigen::MatrixXd dense_kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd k(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

SparseSpd small_qs() {
  const auto mesh = triangulate({{0, 0}, {1, 0}, {0, 1}});
  auto qs = spatial_precision(fem_matrices(mesh), from_kappa_tau(1.0, 1.0));
  qs.factorize();
  return qs;
}

}  // namespace

TEST_CASE("AR(1) precision") {
  SUBCASE("T = 3, phi = 0.5") {
    const Eigen::MatrixXd Q = Eigen::MatrixXd(ar1_precision({0.5, 3}).matrix());
    Eigen::MatrixXd expect(3, 3);
    expect << 1, -0.5, 0, -0.5, 1.25, -0.5, 0, -0.5, 1;
    CHECK((Q - expect).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((Q - ar1_covariance(3, 0.5).inverse()).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("phi = 0 is the identity") {
    const Eigen::MatrixXd Q = Eigen::MatrixXd(ar1_precision({0.0, 6}).matrix());
    CHECK(Q.isIdentity(1e-15));
  }
  SUBCASE("stationary marginal variance for every T") {
    for (int T : {1, 2, 5, 40})
      for (double phi : {-0.8, 0.3, 0.95}) {
        const Eigen::MatrixXd Q = Eigen::MatrixXd(ar1_precision({phi, T}).matrix());
        CHECK(Q.inverse()(0, 0) == doctest::Approx(1.0 / (1.0 - phi * phi)).epsilon(1e-9));
      }
  }
  SUBCASE("log determinant") {
    auto q = ar1_precision({0.6, 9});
    q.factorize();
    CHECK(ar1_log_det({0.6, 9}) == doctest::Approx(q.log_det()).epsilon(1e-12));
  }
  SUBCASE("SPD for T up to 200 across phi") {
    for (int T : {1, 2, 3, 17, 200})
      for (double phi : {-0.99, -0.5, 0.0, 0.5, 0.99}) {
        const Eigen::MatrixXd Q = Eigen::MatrixXd(ar1_precision({phi, T}).matrix());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q, Eigen::EigenvaluesOnly);
        CHECK(es.eigenvalues().minCoeff() > 0.0);
      }
  }
  SUBCASE("invalid coefficient") {
    bool thrown = false;
    try {
      ar1_precision({1.0, 3});
    } catch (const Error& e) {
      thrown = e.code() == "invalid_parameter";
    }
    CHECK(thrown);
  }
}

TEST_CASE("Kronecker precision") {
  const SparseSpd qs = small_qs();
  const Eigen::MatrixXd Qs = Eigen::MatrixXd(qs.matrix());

  SUBCASE("identity time factor gives two diagonal copies") {
    SpMat I(2, 2);
    I.setIdentity();
    const Eigen::MatrixXd K = Eigen::MatrixXd(kronecker(I, qs.matrix()));
    CHECK((K.topLeftCorner(3, 3) - Qs).cwiseAbs().maxCoeff() == 0.0);
    CHECK((K.bottomRightCorner(3, 3) - Qs).cwiseAbs().maxCoeff() == 0.0);
    CHECK(K.topRightCorner(3, 3).isZero());
  }
  SUBCASE("2x2 by 2x2 dense oracle") {
    Eigen::MatrixXd a(2, 2), b(2, 2);
    a << 2, -1, -1, 3;
    b << 1.5, 0.25, 0.25, 4;
    const Eigen::MatrixXd K = Eigen::MatrixXd(kronecker(a.sparseView(), b.sparseView()));
    CHECK((K - dense_kron(a, b)).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("nnz, layout and log determinant") {
    auto qt = ar1_precision({0.7, 4});
    auto q = kronecker_precision(qt, qs);
    CHECK(q.matrix().nonZeros() == qt.matrix().nonZeros() * qs.matrix().nonZeros());
    const Eigen::MatrixXd K = Eigen::MatrixXd(q.matrix());
    const Eigen::MatrixXd Qt = Eigen::MatrixXd(qt.matrix());
    const StLayout L{3, 4};
    for (int t = 0; t < 4; ++t)
      for (int u = 0; u < 4; ++u)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) CHECK(K(L.index(t, i), L.index(u, j)) == doctest::Approx(Qt(t, u) * Qs(i, j)));
    qt.factorize();
    q.factorize();
    SparseSpd qs2 = qs;
    qs2.factorize();
    const double expect = 3 * qt.log_det() + 4 * qs2.log_det();
    CHECK(std::abs(q.log_det() - expect) < 1e-9);
    const double dense = Eigen::LLT<Eigen::MatrixXd>(K).matrixLLT().diagonal().array().log().sum() * 2.0;
    CHECK(std::abs(dense - expect) < 1e-9);
  }
  SUBCASE("mixed-product identity on random vectors") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> N;
    const SpMat qt = ar1_precision({-0.4, 5}).matrix();
    const SpMat K = kronecker(qt, qs.matrix());
    for (int rep = 0; rep < 10; ++rep) {
      Eigen::VectorXd xt(5), xs(3);
      for (auto& v : xt) v = N(rng);
      for (auto& v : xs) v = N(rng);
      const Eigen::VectorXd lhs = K * dense_kron(xt, xs);
      const Eigen::VectorXd rhs = dense_kron(qt * xt, qs.matrix() * xs);
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12 * (1.0 + rhs.cwiseAbs().maxCoeff()));
    }
  }
  SUBCASE("size cap") {
    bool thrown = false;
    try {
      kronecker(ar1_precision({0.1, 100}).matrix(), qs.matrix(), 200);
    } catch (const Error& e) {
      thrown = e.code() == "dimension_overflow";
    }
    CHECK(thrown);
  }
}

TEST_CASE("space-time simulation") {
  const SparseSpd qs = small_qs();

  SUBCASE("deterministic per seed") {
    CHECK(simulate_st_field({0.5, 10}, qs, 9) == simulate_st_field({0.5, 10}, qs, 9));
  }
  SUBCASE("phi = 0 gives independent spatial draws") {
    const Eigen::MatrixXd x = simulate_st_field({0.0, 4000}, qs, 1);
    double c = 0.0, v = 0.0;
    for (int t = 1; t < 4000; ++t) c += x(t, 0) * x(t - 1, 0), v += x(t, 0) * x(t, 0);
    CHECK(std::abs(c / v) < 0.05);
  }
  SUBCASE("lag-1 autocorrelation recovers phi") {
    for (double phi : {0.3, 0.8}) {
      const Eigen::MatrixXd x = simulate_st_field({phi, 5000}, qs, 17);
      for (int v = 0; v < 3; ++v) {
        const Eigen::VectorXd s = x.col(v).array() - x.col(v).mean();
        const double r = s.head(4999).dot(s.tail(4999)) / s.squaredNorm();
        CHECK(std::abs(r - phi) < 0.05);
      }
    }
  }
  SUBCASE("replicate covariance matches the dense Kronecker inverse") {
    const int T = 3, reps = 20000;
    const double phi = 0.6;
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(9, 9);
    for (int k = 0; k < reps; ++k) {
      const Eigen::MatrixXd x = simulate_st_field({phi, T}, qs, 100 + static_cast<std::uint64_t>(k));
      Eigen::VectorXd v(9);
      for (int t = 0; t < T; ++t) v.segment(3 * t, 3) = x.row(t).transpose();
      S += v * v.transpose();
    }
    S /= reps;
    const Eigen::MatrixXd Sigma =
        dense_kron(ar1_covariance(T, phi), Eigen::MatrixXd(qs.matrix()).inverse());
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) CHECK(std::abs(S(i, j) - Sigma(i, j)) < 0.1 * std::abs(Sigma(i, j)));
  }
  SUBCASE("near-unit phi stays finite") {
    const Eigen::MatrixXd x = simulate_st_field({0.999, 50}, qs, 4);
    CHECK(x.allFinite());
    const Eigen::MatrixXd y = simulate_st_field({-0.999, 50}, qs, 4);
    CHECK(y.allFinite());
  }
}
