#include "stgmrf/synthetic.hpp"

#include "stgmrf/error.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>

namespace stgmrf {

void TruthRecord::validate() const {
  if (beta.size() < 1) throw Error("invalid_truth", "truth needs at least an intercept");
  if (!(sigma_eps >= 0)) throw Error("invalid_truth", "sigma_eps must be non-negative");
  if (kind != ModelKind::CovariateOnly) {
    if (!(range > 0 && sigma_omega > 0)) throw Error("invalid_truth", "range and sigma_omega must be positive");
    if (!(std::abs(phi) < 1 && std::abs(phi_f) < 1)) throw Error("invalid_truth", "|phi| must be below 1");
    if (!(sigma_f >= 0)) throw Error("invalid_truth", "sigma_f must be non-negative");
  }
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Eigen::MatrixXd default_covariates(const std::vector<SpatialPoint>& sites, int T, int p, std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  const auto ns = static_cast<int>(sites.size());
  Eigen::MatrixXd X(ns * T, p);
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : sites) x0 = std::min(x0, s.x), x1 = std::max(x1, s.x), y0 = std::min(y0, s.y), y1 = std::max(y1, s.y);
  const double lx = std::max(x1 - x0, 1e-9), ly = std::max(y1 - y0, 1e-9);
  for (int s = 0; s < ns; ++s)
    for (int t = 0; t < T; ++t) {
      const int r = s * T + t;
      for (int j = 0; j + 1 < p; ++j) X(r, j) = N(rng);
      if (p >= 1) {
        const double u = (sites[static_cast<std::size_t>(s)].x - x0) / lx, v = (sites[static_cast<std::size_t>(s)].y - y0) / ly;
        // unit-variance-ish smooth sheet
        X(r, p - 1) = 2.0 * std::sin(2.0 * std::numbers::pi * u) * std::cos(std::numbers::pi * v);
      }
    }
  return X;
}

std::vector<GeoPoint> lattice_sites(int n, double lon0, double lon1, double lat0, double lat1, std::uint64_t seed,
                                    double jitter) {
  if (n < 1) throw Error("invalid_parameter", "need at least one site");
  const int nx = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int ny = (n + nx - 1) / nx;
  const double dx = (lon1 - lon0) / nx, dy = (lat1 - lat0) / ny;
  std::mt19937_64 rng(stream_seed(seed, 17));
  std::uniform_real_distribution<double> U(-jitter, jitter);
  std::vector<GeoPoint> out;
  for (int j = 0; j < ny && static_cast<int>(out.size()) < n; ++j)
    for (int i = 0; i < nx && static_cast<int>(out.size()) < n; ++i)
      out.push_back({lon0 + (i + 0.5 + U(rng)) * dx, lat0 + (j + 0.5 + U(rng)) * dy});
  return out;
}

Simulation simulate(const SimulationSetup& setup, const TruthRecord& truth_in, std::uint64_t seed) {
  truth_in.validate();
  if (truth_in.beta.size() != setup.p + 1) throw Error("invalid_truth", "beta must have p + 1 entries");
  if (setup.T < 1 || setup.sites.empty()) throw Error("invalid_parameter", "need sites and T >= 1");
  Simulation sim;
  TruthRecord truth = truth_in;
  truth.seed = seed;
  Dataset& ds = sim.dataset;
  ds.sites_geo = setup.sites;
  project_dataset(ds);
  ds.year0 = setup.year0;
  ds.response_name = "tco";
  for (int j = 0; j < setup.p; ++j) ds.names.push_back("x" + std::to_string(j + 1));

  const int ns = static_cast<int>(ds.sites_geo.size()), T = setup.T;
  std::mt19937_64 cov_rng(stream_seed(seed, kCovariateStream));
  const Eigen::MatrixXd X = setup.covariates(ds.points, T, setup.p, cov_rng);
  if (X.rows() != ns * T || X.cols() != setup.p) throw Error("dimension_mismatch", "covariate generator returned the wrong shape");

  Eigen::VectorXd eta(ns * T);
  ds.Z.resize(ns * T, setup.p + 1);
  for (int s = 0; s < ns; ++s)
    for (int t = 0; t < T; ++t) {
      const int r = s * T + t;
      ds.site.push_back(s);
      ds.time.push_back(t + 1);
      ds.Z(r, 0) = 1.0;
      ds.Z.row(r).tail(setup.p) = X.row(r);
    }
  eta = ds.Z * truth.beta;

  if (truth.kind != ModelKind::CovariateOnly) {
    sim.mesh = build_mesh_artifacts(ds, setup.mesh_cfg);
    const SpMat A = make_projector(sim.mesh.mesh, ds.points);
    SparseSpd qs(sim.mesh.ops.precision(convert_params(truth.range, truth.sigma_omega)));
    qs.factorize();
    std::mt19937_64 lat_rng(stream_seed(seed, kLatentStream));
    std::normal_distribution<double> N;
    if (truth.kind == ModelKind::FullST) {
      const int m = sim.mesh.mesh.num_vertices();
      Eigen::MatrixXd z(T, m);
      for (int t = 0; t < T; ++t)
        for (int i = 0; i < m; ++i) z(t, i) = N(lat_rng);
      truth.xi = simulate_st_field_from_normals({truth.phi, T}, qs, z);
      const Eigen::MatrixXd site_field = A * truth.xi.transpose();  // ns x T
      for (int s = 0; s < ns; ++s)
        for (int t = 0; t < T; ++t) eta[s * T + t] += site_field(s, t);
    } else {
      truth.xi = qs.sample(lat_rng).transpose();
      truth.f.resize(T);
      for (int t = 0; t < T; ++t) {
        const double z = N(lat_rng);
        truth.f[t] = t == 0 ? truth.sigma_f / std::sqrt(1.0 - truth.phi_f * truth.phi_f) * z
                            : truth.phi_f * truth.f[t - 1] + truth.sigma_f * z;
      }
      const Eigen::VectorXd site_field = A * truth.xi.row(0).transpose();
      for (int s = 0; s < ns; ++s)
        for (int t = 0; t < T; ++t) eta[s * T + t] += site_field[s] + truth.f[t];
    }
  }

  std::mt19937_64 noise_rng(stream_seed(seed, kNoiseStream));
  std::normal_distribution<double> N;
  ds.y.resize(ns * T);
  for (int r = 0; r < ns * T; ++r) ds.y[r] = setup.response_offset + setup.response_scale * (eta[r] + truth.sigma_eps * N(noise_rng));
  sim.truth = std::move(truth);
  return sim;
}

std::string truth_json(const TruthRecord& truth) {
  nlohmann::ordered_json j;
  j["model"] = to_string(truth.kind);
  j["seed"] = truth.seed;
  j["beta"] = std::vector<double>(truth.beta.data(), truth.beta.data() + truth.beta.size());
  j["sigma_eps"] = truth.sigma_eps;
  if (truth.kind != ModelKind::CovariateOnly) {
    j["range"] = truth.range;
    j["sigma_omega"] = truth.sigma_omega;
    if (truth.kind == ModelKind::FullST) j["phi"] = truth.phi;
    if (truth.kind == ModelKind::Additive) {
      j["sigma_f"] = truth.sigma_f;
      j["phi_f"] = truth.phi_f;
      j["f"] = std::vector<double>(truth.f.data(), truth.f.data() + truth.f.size());
    }
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (Eigen::Index t = 0; t < truth.xi.rows(); ++t) {
      const Eigen::VectorXd r = truth.xi.row(t).transpose();
      rows.push_back(std::vector<double>(r.data(), r.data() + r.size()));
    }
    j["latent_field"] = rows;
  }
  return j.dump(2);
}

void write_truth_json(const TruthRecord& truth, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_failed", "cannot write truth file", path);
  f << truth_json(truth) << "\n";
}

}  // namespace stgmrf
