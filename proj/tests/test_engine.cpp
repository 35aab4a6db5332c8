#include "stgmrf/engine.hpp"
#include "stgmrf/error.hpp"
#include "stgmrf/synthetic.hpp"
#include "test_helpers.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace stgmrf;
using testing_util::random_dataset;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// mesh whose vertices are the sites plus the corners of a padded box
MeshArtifacts vertex_mesh(const Dataset& ds, double pad = 2.0) {
  std::vector<SpatialPoint> pts = ds.points;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& p : pts) x0 = std::min(x0, p.x), x1 = std::max(x1, p.x), y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
  pts.push_back({x0 - pad, y0 - pad});
  pts.push_back({x1 + pad, y0 - pad});
  pts.push_back({x0 - pad, y1 + pad});
  pts.push_back({x1 + pad, y1 + pad});
  return mesh_artifacts_from(triangulate(pts));
}

ModelSpec spec_of(ModelKind k) {
  ModelSpec s;
  s.kind = k;
  return s;
}

Eigen::VectorXd theta_for(const AssembledModel& am) {
  HyperValues h;
  h.tau_eps = 2.5;
  h.range = 4.0;
  h.sigma_omega = 0.8;
  h.phi = 0.6;
  h.sigma_f = 0.4;
  h.phi_f = -0.3;
  return am.internal(h);
}

Dataset shuffled(const Dataset& ds, std::uint64_t seed) {
  std::vector<std::size_t> idx(ds.rows());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  Dataset out = ds;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    out.site[r] = ds.site[idx[r]];
    out.time[r] = ds.time[idx[r]];
    out.y[static_cast<Eigen::Index>(r)] = ds.y[static_cast<Eigen::Index>(idx[r])];
    out.Z.row(static_cast<Eigen::Index>(r)) = ds.Z.row(static_cast<Eigen::Index>(idx[r]));
  }
  return out;
}

// Model 1 data: y = Z beta + N(0, sd^2) with orthogonal +-1 covariate columns
Dataset covariate_data(int n, double noise_sd, std::uint64_t seed) {
  Dataset ds = random_dataset(1, n, 2, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> N;
  for (int r = 0; r < n; ++r) {
    ds.Z(r, 1) = (r % 2 == 0) ? 1.0 : -1.0;
    ds.Z(r, 2) = (r / 2 % 2 == 0) ? 1.0 : -1.0;
    ds.y[r] = 0.3 + 0.8 * ds.Z(r, 1) - 0.5 * ds.Z(r, 2) + noise_sd * N(rng);
  }
  return ds;
}

Simulation small_st_sim(std::uint64_t seed, int n_sites = 16, int T = 8) {
  SimulationSetup setup;
  setup.sites = lattice_sites(n_sites, 36, 42, 6, 11, seed);
  setup.T = T;
  setup.p = 1;
  setup.mesh_cfg = MeshConfig{150, 400, 200, 1};
  TruthRecord truth;
  truth.kind = ModelKind::FullST;
  truth.beta = Eigen::Vector2d(0.5, -0.3);
  truth.sigma_eps = 0.3;
  truth.range = 400;
  truth.sigma_omega = 1.0;
  truth.phi = 0.7;
  return simulate(setup, truth, seed);
}

}  // namespace

TEST_CASE("latent dimensions") {
  SUBCASE("covariate-only, n = 10, p = 3") {
    const auto ds = random_dataset(1, 10, 3, 1);
    const auto am = assemble(spec_of(ModelKind::CovariateOnly), ds, nullptr);
    CHECK(am.layout.dim == 4);
    CHECK(am.theta_dim() == 1);
  }
  SUBCASE("full space-time, m = 50, T = 12, p = 9") {
    Dataset ds = random_dataset(6, 12, 9, 2);
    std::vector<SpatialPoint> lattice;
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 5; ++j) lattice.push_back({1.0 * i, 1.0 * j});
    for (int s = 0; s < 6; ++s) ds.points[static_cast<std::size_t>(s)] = lattice[static_cast<std::size_t>(7 * s + 3)];
    const auto mesh = mesh_artifacts_from(triangulate(lattice));
    REQUIRE(mesh.mesh.num_vertices() == 50);
    const auto am = assemble(spec_of(ModelKind::FullST), ds, &mesh);
    CHECK(am.layout.dim == 610);
    CHECK(am.theta_dim() == 4);
    CHECK(am.B.rows() == am.n);
    CHECK(am.B.cols() == 610);
    // every site sits on a vertex: one field entry plus p + 1 covariates
    const Eigen::SparseMatrix<double, Eigen::RowMajor> Br = am.B;
    for (int i = 0; i < am.n; ++i) CHECK(Br.row(i).nonZeros() == 1 + 10);
    // field entry lives in the row's own time block
    for (int i = 0; i < am.n; ++i)
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(Br, i); it; ++it)
        if (it.col() < am.layout.field_size) CHECK(it.col() / 50 == am.obs_time[static_cast<std::size_t>(i)]);
  }
  SUBCASE("additive") {
    const auto ds = random_dataset(5, 7, 2, 3);
    const auto mesh = vertex_mesh(ds);
    const auto am = assemble(spec_of(ModelKind::Additive), ds, &mesh);
    CHECK(am.layout.dim == mesh.mesh.num_vertices() + 7 + 3);
    CHECK(am.theta_dim() == 5);
    auto spec = spec_of(ModelKind::Additive);
    spec.additive_temporal = false;
    CHECK(assemble(spec, ds, &mesh).theta_dim() == 3);
  }
}

TEST_CASE("assembly errors") {
  Dataset ds = random_dataset(3, 4, 2, 4);
  ds.Z.col(2) = ds.Z.col(1);
  CHECK_THROWS_WITH_AS(assemble(spec_of(ModelKind::CovariateOnly), ds, nullptr),
                       doctest::Contains("rank deficient"), Error);
  const auto ok = random_dataset(3, 4, 2, 4);
  CHECK_THROWS_AS(assemble(spec_of(ModelKind::FullST), ok, nullptr), Error);
}

TEST_CASE("conjugate scalar case") {
  auto spec = spec_of(ModelKind::CovariateOnly);
  spec.prior.beta_prec = 1.0;
  Dataset ds = random_dataset(1, 1, 0, 5);
  ds.y[0] = 2.0;
  const auto am = assemble(spec, ds, nullptr);
  const Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
  const auto post = conditional_posterior(am, theta);
  CHECK(post.mean[0] == doctest::Approx(1.0));
  CHECK(Eigen::MatrixXd(post.precision.matrix())(0, 0) == doctest::Approx(2.0));
  // y ~ N(0, 1 + 1/tau)
  CHECK(log_marginal_likelihood(am, theta) == doctest::Approx(-0.5 * kLog2Pi - 0.5 * std::log(2.0) - 1.0));

  SUBCASE("duplicated observation: closed-form bivariate marginal") {
    Dataset d2 = random_dataset(1, 2, 0, 5);
    d2.y[0] = d2.y[1] = 2.0;
    const auto am2 = assemble(spec, d2, nullptr);
    for (double lt : {-1.0, 0.0, 1.5}) {
      const double v = 1.0 / std::exp(lt);
      Eigen::Matrix2d S;
      S << 1 + v, 1, 1, 1 + v;
      const Eigen::Vector2d y(2, 2);
      const double expect = -kLog2Pi - 0.5 * std::log(S.determinant()) - 0.5 * y.dot(S.inverse() * y);
      CHECK(log_marginal_likelihood(am2, Eigen::VectorXd::Constant(1, lt)) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("no observations recovers the prior") {
  Dataset ds = random_dataset(4, 3, 1, 6, 10.0, 1.1);  // every response missing
  const auto mesh = vertex_mesh(ds);
  const auto am = assemble(spec_of(ModelKind::FullST), ds, &mesh);
  CHECK(am.n == 0);
  const auto th = theta_for(am);
  const auto post = conditional_posterior(am, th);
  CHECK(post.mean.cwiseAbs().maxCoeff() == 0.0);
  CHECK((Eigen::MatrixXd(post.precision.matrix()) - Eigen::MatrixXd(am.prior_precision(th))).cwiseAbs().maxCoeff() ==
        0.0);
}

TEST_CASE("dense oracle agreement") {
  const auto ds = random_dataset(8, 3, 2, 7, 10.0, 0.1);
  const auto mesh = vertex_mesh(ds);
  REQUIRE(mesh.mesh.num_vertices() <= 20);
  for (ModelKind k : {ModelKind::CovariateOnly, ModelKind::Additive, ModelKind::FullST}) {
    CAPTURE(to_string(k));
    const auto am = assemble(spec_of(k), ds, k == ModelKind::CovariateOnly ? nullptr : &mesh);
    REQUIRE(am.layout.dim <= 200);
    const auto th = theta_for(am);
    CHECK(std::abs(log_marginal_likelihood(am, th) - testing_util::dense_log_marginal_likelihood(am, th)) < 1e-8);
    CHECK(log_marginal_posterior(am, th) == doctest::Approx(log_marginal_likelihood(am, th) + am.log_prior(th)));

    const Eigen::MatrixXd Qx = Eigen::MatrixXd(am.prior_precision(th));
    const Eigen::MatrixXd B = Eigen::MatrixXd(am.B);
    const double tau = std::exp(th[0]);
    const Eigen::MatrixXd Qc = Qx + tau * B.transpose() * B;
    const Eigen::VectorXd mean = Qc.llt().solve(tau * B.transpose() * am.y);
    const auto post = conditional_posterior(am, th);
    CHECK((Eigen::MatrixXd(post.precision.matrix()) - Qc).cwiseAbs().maxCoeff() < 1e-9 * Qc.cwiseAbs().maxCoeff());
    CHECK((post.mean - mean).cwiseAbs().maxCoeff() < 1e-8);
    const double logdet = 2.0 * Eigen::MatrixXd(Qc.llt().matrixL()).diagonal().array().log().sum();
    CHECK(std::abs(post.logdet - logdet) < 1e-8);
  }
}

TEST_CASE("log marginal posterior is invariant to row order") {
  const auto ds = random_dataset(7, 4, 2, 8);
  const auto mesh = vertex_mesh(ds);
  for (ModelKind k : {ModelKind::CovariateOnly, ModelKind::Additive, ModelKind::FullST}) {
    const MeshArtifacts* mp = k == ModelKind::CovariateOnly ? nullptr : &mesh;
    const auto a = assemble(spec_of(k), ds, mp);
    const auto b = assemble(spec_of(k), shuffled(ds, 99), mp);
    const auto th = theta_for(a);
    CHECK(std::abs(log_marginal_posterior(a, th) - log_marginal_posterior(b, th)) < 1e-10);
  }
}

TEST_CASE("observations only increase the posterior precision diagonal") {
  const auto full = random_dataset(6, 4, 1, 9);
  Dataset part = full;
  for (Eigen::Index r = 0; r < part.y.size(); r += 3) part.y[r] = std::nan("");
  const auto mesh = vertex_mesh(full);
  const auto a = assemble(spec_of(ModelKind::FullST), full, &mesh);
  const auto b = assemble(spec_of(ModelKind::FullST), part, &mesh);
  const auto th = theta_for(a);
  const Eigen::VectorXd da = Eigen::MatrixXd(a.posterior_precision(th)).diagonal();
  const Eigen::VectorXd db = Eigen::MatrixXd(b.posterior_precision(th)).diagonal();
  CHECK(((da - db).array() >= -1e-12).all());
  CHECK((da - db).maxCoeff() > 0.0);
}

TEST_CASE("transform round trips and the joint prior") {
  const auto ds = random_dataset(5, 4, 1, 10);
  const auto mesh = vertex_mesh(ds);
  for (ModelKind k : {ModelKind::CovariateOnly, ModelKind::Additive, ModelKind::FullST}) {
    const auto am = assemble(spec_of(k), ds, k == ModelKind::CovariateOnly ? nullptr : &mesh);
    const auto th = theta_for(am);
    CHECK((am.internal(am.natural(th)) - th).cwiseAbs().maxCoeff() < 1e-12);
    const auto& pc = am.spec.prior;
    double parts = log_prior_noise(th[0], pc);
    if (k != ModelKind::CovariateOnly) parts += log_prior_spatial(th[1], th[2], pc);
    if (k == ModelKind::FullST) parts += log_prior_ar1(th[3], pc);
    if (k == ModelKind::Additive) parts += log_prior_sd(th[3], pc) + log_prior_ar1(th[4], pc);
    CHECK(am.log_prior(th) == doctest::Approx(parts).epsilon(1e-14));
  }
}

TEST_CASE("covariate-only model") {
  const auto ds = covariate_data(200, 0.5, 11);
  const auto am = assemble(spec_of(ModelKind::CovariateOnly), ds, nullptr);
  const auto fr = fit(am);

  SUBCASE("beta means equal the least-squares solution") {
    const Eigen::MatrixXd Z = ds.Z;
    const Eigen::VectorXd gls = (Z.transpose() * Z).ldlt().solve(Z.transpose() * ds.y);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(fr.beta_marginals[static_cast<std::size_t>(j)].mean - gls[j]) < 1e-6);
  }

  // fine 1-D quadrature of the log posterior of log tau
  std::vector<double> th, lp;
  for (double x = -4.0; x <= 6.0; x += 1e-3) {
    th.push_back(x);
    lp.push_back(log_marginal_posterior(am, Eigen::VectorXd::Constant(1, x)));
  }
  const auto imax = static_cast<std::size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
  const double mx = lp[imax];
  double z = 0.0, e_tau = 0.0;
  for (std::size_t i = 0; i < th.size(); ++i) {
    const double w = std::exp(lp[i] - mx);
    z += w;
    e_tau += w * std::exp(th[i]);
  }
  e_tau /= z;

  SUBCASE("mode recovered within 1%") {
    const auto mode = optimize_hyperparameters(am, am.initial_theta());
    CHECK(std::abs(std::exp(mode.mode[0]) / std::exp(th[imax]) - 1.0) < 0.01);
    CHECK(mode.converged);
    const auto again = optimize_hyperparameters(am, mode.mode);
    CHECK(std::abs(again.mode[0] - mode.mode[0]) < 1e-3);
  }
  SUBCASE("grid mean of the precision matches quadrature within 2%") {
    CHECK(fr.hyper_marginals[0].mean == doctest::Approx(e_tau).epsilon(0.02));
  }
  SUBCASE("grid invariants") {
    const auto& g = fr.theta_grid;
    double wsum = 0.0;
    double best = -1e300;
    for (const auto& p : g.points) {
      wsum += p.weight;
      CHECK(p.weight >= 0.0);
      best = std::max(best, p.log_post);
    }
    CHECK(wsum == doctest::Approx(1.0));
    const double mode_lp = g.points[static_cast<std::size_t>(g.mode_index)].log_post;
    CHECK(mode_lp == best);
    for (const auto& p : g.points) CHECK(p.log_post >= mode_lp - am.spec.grid_drop);
    // unimodal weights along the single axis, with points on both sides
    auto pts = g.points;
    std::sort(pts.begin(), pts.end(), [](const GridPoint& a, const GridPoint& b) { return a.z[0] < b.z[0]; });
    CHECK(pts.front().z[0] < 0.0);
    CHECK(pts.back().z[0] > 0.0);
    std::size_t peak = 0;
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (pts[i].weight > pts[peak].weight) peak = i;
    for (std::size_t i = 1; i <= peak; ++i) CHECK(pts[i].weight >= pts[i - 1].weight);
    for (std::size_t i = peak + 1; i < pts.size(); ++i) CHECK(pts[i].weight <= pts[i - 1].weight);
  }
  SUBCASE("marginal summaries are ordered") {
    for (const auto& mg : fr.beta_marginals) {
      CHECK(mg.sd >= 0.0);
      CHECK(mg.q025 <= mg.mean + 1e-9);
      CHECK(mg.mean <= mg.q975 + 1e-9);
    }
    for (const auto& mg : fr.hyper_marginals) {
      CHECK(mg.sd >= 0.0);
      CHECK(mg.q025 <= mg.q50);
      CHECK(mg.q50 <= mg.q975);
    }
  }
}

TEST_CASE("single-point grid equals the conditional posterior") {
  const auto ds = random_dataset(6, 3, 1, 12);
  const auto mesh = vertex_mesh(ds);
  const auto am = assemble(spec_of(ModelKind::FullST), ds, &mesh);
  const auto th = theta_for(am);
  const auto fr = fit_at(am, th);
  const auto post = conditional_posterior(am, th);
  CHECK((fr.latent_mean - post.mean).cwiseAbs().maxCoeff() < 1e-10);
  const Eigen::VectorXd sd = Eigen::MatrixXd(post.precision.matrix()).inverse().diagonal().cwiseSqrt();
  CHECK((fr.latent_sd - sd).cwiseAbs().maxCoeff() < 1e-8);
  const Eigen::VectorXd eta = am.B * post.mean;
  CHECK((fr.fitted_mean - eta).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("full space-time model with T = 1 and phi = 0 nests the static spatial model") {
  const auto ds = random_dataset(9, 1, 2, 13);
  const auto mesh = vertex_mesh(ds);
  auto s2 = spec_of(ModelKind::Additive);
  s2.additive_temporal = false;
  const auto a2 = assemble(s2, ds, &mesh);
  const auto a3 = assemble(spec_of(ModelKind::FullST), ds, &mesh);
  for (double lr : {0.5, 1.5, 2.5}) {
    Eigen::VectorXd t2(3), t3(4);
    t2 << 0.7, lr, -0.2;
    t3 << 0.7, lr, -0.2, 0.0;
    CHECK(std::abs(log_marginal_likelihood(a2, t2) - log_marginal_likelihood(a3, t3)) < 1e-6);
  }
}

TEST_CASE("full space-time model with T = 1 carries no information on phi") {
  const auto ds = random_dataset(9, 1, 1, 14);
  const auto mesh = vertex_mesh(ds);
  const auto am = assemble(spec_of(ModelKind::FullST), ds, &mesh);
  // the likelihood only sees sigma^2 / (1 - phi^2)
  HyperValues h;
  h.tau_eps = 2.0, h.range = 3.0, h.sigma_omega = 0.6, h.phi = 0.0;
  const double base = log_marginal_likelihood(am, am.internal(h));
  for (double phi : {-0.7, 0.3, 0.9}) {
    HyperValues g = h;
    g.phi = phi;
    g.sigma_omega = h.sigma_omega * std::sqrt(1.0 - phi * phi);
    CHECK(std::abs(log_marginal_likelihood(am, am.internal(g)) - base) < 1e-8);
  }
  // phi enters only through its square: the fitted marginal is symmetric about 0 and not
  // concentrated (it is not the prior itself, since the sigma prior reweights phi)
  const auto fr = fit(am);
  const auto& phi = fr.hyper_marginals[3];
  CHECK(std::abs(phi.mean) < 0.05);
  CHECK(std::abs(phi.q025 + phi.q975) < 0.05);
  CHECK(phi.sd > 0.1);
}

TEST_CASE("full space-time optimizer: restart and multi-start agreement") {
  const auto sim = small_st_sim(21);
  const Dataset ds = standardize(sim.dataset);
  auto spec = spec_of(ModelKind::FullST);
  spec.mesh_cfg = MeshConfig{150, 400, 200, 1};
  const auto mesh = build_mesh_artifacts(ds, spec.mesh_cfg);
  const auto am = assemble(spec, ds, &mesh);
  const auto m0 = optimize_hyperparameters(am, am.initial_theta());
  const auto again = optimize_hyperparameters(am, m0.mode);
  CHECK((again.mode - m0.mode).cwiseAbs().maxCoeff() < 1e-3);
  for (double sgn : {-1.0, 1.0}) {
    // +-3 in every coordinate, kept inside the numerically sensible region
    Eigen::VectorXd init = m0.mode.array() + sgn * 3.0;
    const auto other = optimize_hyperparameters(am, init);
    CAPTURE(other.mode.transpose());
    CAPTURE(m0.mode.transpose());
    CHECK((other.mode - m0.mode).cwiseAbs().maxCoeff() < 0.05);
  }
}

TEST_CASE("fits are deterministic and thread-count independent") {
  const auto ds = random_dataset(8, 4, 1, 15);
  const auto mesh = vertex_mesh(ds);
  auto spec = spec_of(ModelKind::FullST);
  const auto a1 = assemble(spec, ds, &mesh);
  spec.threads = 3;
  const auto a3 = assemble(spec, ds, &mesh);
  const auto f1 = fit(a1), f1b = fit(a1), f3 = fit(a3);
  CHECK(f1.latent_mean == f1b.latent_mean);
  CHECK(f1.latent_mean == f3.latent_mean);
  CHECK(f1.latent_sd == f3.latent_sd);
  CHECK(f1.log_ml == f3.log_ml);
}
