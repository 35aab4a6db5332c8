#pragma once

#include "stgmrf/engine.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>

namespace stgmrf {

struct TruthRecord {
  ModelKind kind = ModelKind::FullST;
  Eigen::VectorXd beta;  // intercept first
  double sigma_eps = 0.5;
  double range = 300.0;
  double sigma_omega = 1.0;
  double phi = 0.8;
  double sigma_f = 0.3;  // Additive only
  double phi_f = 0.5;
  /// Simulated latent field: T x m for FullST, 1 x m for Additive (omega).
  Eigen::MatrixXd xi;
  Eigen::VectorXd f;  // Additive temporal effect
  std::uint64_t seed = 0;

  void validate() const;
};

/// Covariate generator: returns (n_sites * T) x p values, rows ordered site-major then time.
using CovariateGenerator =
    std::function<Eigen::MatrixXd(const std::vector<SpatialPoint>& sites, int T, int p, std::mt19937_64& rng)>;

/// Independent standard normals, plus a smooth sine sheet in the last column when p >= 1.
Eigen::MatrixXd default_covariates(const std::vector<SpatialPoint>& sites, int T, int p, std::mt19937_64& rng);

struct SimulationSetup {
  std::vector<GeoPoint> sites;  // projected with their centroid as reference
  int T = 12;
  int year0 = 2012;
  int p = 2;  // covariates without intercept; truth.beta must have p + 1 entries
  MeshConfig mesh_cfg;
  double response_offset = 0.0;  // y_out = offset + scale * y
  double response_scale = 1.0;
  CovariateGenerator covariates = default_covariates;
};

struct Simulation {
  Dataset dataset;
  TruthRecord truth;
  MeshArtifacts mesh;
};

/// Derives an independent stream seed (SplitMix64 of seed and a stream label).
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream);

inline constexpr std::uint64_t kLatentStream = 1, kNoiseStream = 2, kCovariateStream = 3;

Simulation simulate(const SimulationSetup& setup, const TruthRecord& truth, std::uint64_t seed);

/// Sites on a jittered lattice inside a lon/lat box.
std::vector<GeoPoint> lattice_sites(int n, double lon0, double lon1, double lat0, double lat1, std::uint64_t seed,
                                    double jitter = 0.25);

std::string truth_json(const TruthRecord& truth);
void write_truth_json(const TruthRecord& truth, const std::string& path);

}  // namespace stgmrf
