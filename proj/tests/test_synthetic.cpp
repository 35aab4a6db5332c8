#include "stgmrf/error.hpp"
#include "stgmrf/synthetic.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace stgmrf;

namespace {

SimulationSetup small_setup(int n_sites = 12, int T = 6, int p = 2) {
  SimulationSetup s;
  s.sites = lattice_sites(n_sites, 36, 42, 6, 11, 3);
  s.T = T;
  s.p = p;
  s.mesh_cfg = MeshConfig{150, 400, 200, 1};
  return s;
}

TruthRecord st_truth(int p, double sigma_eps) {
  TruthRecord t;
  t.kind = ModelKind::FullST;
  t.beta = Eigen::VectorXd::LinSpaced(p + 1, 0.5, -0.3);
  t.sigma_eps = sigma_eps;
  t.range = 300;
  t.sigma_omega = 1.0;
  t.phi = 0.7;
  return t;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("noiseless, zero-effect simulation equals the interpolated field") {
  const auto setup = small_setup();
  TruthRecord truth = st_truth(2, 0.0);
  truth.beta.setZero();
  const auto sim = simulate(setup, truth, 7);
  const SpMat A = make_projector(sim.mesh.mesh, sim.dataset.points);
  const Eigen::MatrixXd field = A * sim.truth.xi.transpose();  // sites x T
  for (std::size_t r = 0; r < sim.dataset.rows(); ++r)
    CHECK(sim.dataset.y[static_cast<Eigen::Index>(r)] ==
          doctest::Approx(field(sim.dataset.site[r], sim.dataset.time[r] - 1)).epsilon(1e-12));
}

TEST_CASE("noise variance matches sigma_eps^2 within 5%") {
  SimulationSetup setup;
  setup.sites = lattice_sites(100, 36, 46, 4, 14, 1);
  setup.T = 100;
  setup.p = 1;
  TruthRecord truth;
  truth.kind = ModelKind::CovariateOnly;
  truth.beta = Eigen::Vector2d(1.0, 2.0);
  truth.sigma_eps = 0.4;
  const auto noisy = simulate(setup, truth, 11);
  truth.sigma_eps = 0.0;
  const auto clean = simulate(setup, truth, 11);
  const Eigen::VectorXd e = noisy.dataset.y - clean.dataset.y;
  REQUIRE(e.size() == 10000);
  const double var = (e.array() - e.mean()).square().sum() / (e.size() - 1);
  CHECK(std::abs(var / 0.16 - 1.0) < 0.05);
  // eta is exactly Z beta here
  CHECK((clean.dataset.y - clean.dataset.Z * truth.beta).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("independent streams: noise level changes y but not the latent field or covariates") {
  const auto setup = small_setup();
  const auto a = simulate(setup, st_truth(2, 0.1), 5);
  const auto b = simulate(setup, st_truth(2, 0.6), 5);
  CHECK(a.truth.xi == b.truth.xi);
  CHECK(a.dataset.Z == b.dataset.Z);
  CHECK(a.dataset.y != b.dataset.y);
  const auto c = simulate(setup, st_truth(2, 0.1), 6);
  CHECK(c.truth.xi != a.truth.xi);
  CHECK(simulate(setup, st_truth(2, 0.1), 5).dataset.y == a.dataset.y);
  std::set<std::uint64_t> seeds;
  for (std::uint64_t s : {kLatentStream, kNoiseStream, kCovariateStream}) seeds.insert(stream_seed(5, s));
  CHECK(seeds.size() == 3);
}

TEST_CASE("simulated data survive a CSV round trip byte for byte") {
  auto setup = small_setup();
  setup.response_offset = 270.0;
  setup.response_scale = 10.0;
  const auto sim = simulate(setup, st_truth(2, 0.3), 9);
  const auto dir = std::filesystem::temp_directory_path() / "stgmrf_synthetic_test";
  std::filesystem::create_directories(dir);
  const std::string p1 = (dir / "a.csv").string(), p2 = (dir / "b.csv").string();
  write_dataset_csv(sim.dataset, p1);
  const Dataset back = load_dataset(p1, {});
  write_dataset_csv(back, p2);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(back.rows() == sim.dataset.rows());
  CHECK(back.num_sites() == sim.dataset.num_sites());
  CHECK((back.y - sim.dataset.y).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.names == sim.dataset.names);
  std::filesystem::remove_all(dir);
}

TEST_CASE("additive simulation carries a temporal effect shared by all sites") {
  auto setup = small_setup(9, 10, 1);
  TruthRecord truth;
  truth.kind = ModelKind::Additive;
  truth.beta = Eigen::Vector2d(0.0, 0.0);
  truth.sigma_eps = 0.0;
  truth.range = 300;
  truth.sigma_omega = 0.5;
  truth.sigma_f = 0.7;
  truth.phi_f = 0.4;
  const auto sim = simulate(setup, truth, 12);
  REQUIRE(sim.truth.f.size() == 10);
  const SpMat A = make_projector(sim.mesh.mesh, sim.dataset.points);
  const Eigen::VectorXd w = A * sim.truth.xi.row(0).transpose();
  for (std::size_t r = 0; r < sim.dataset.rows(); ++r)
    CHECK(sim.dataset.y[static_cast<Eigen::Index>(r)] ==
          doctest::Approx(w[sim.dataset.site[r]] + sim.truth.f[sim.dataset.time[r] - 1]).epsilon(1e-12));
}

TEST_CASE("truth validation and JSON") {
  TruthRecord bad = st_truth(1, 0.2);
  bad.phi = 1.2;
  CHECK_THROWS_AS(bad.validate(), Error);
  const auto setup = small_setup(12, 6, 2);
  CHECK_THROWS_AS(simulate(setup, st_truth(1, 0.2), 1), Error);  // beta length mismatch
  const auto sim = simulate(setup, st_truth(2, 0.2), 4);
  const std::string js = truth_json(sim.truth);
  CHECK(js.find("\"latent_field\"") != std::string::npos);
  CHECK(js.find("\"phi\": 0.7") != std::string::npos);
}
