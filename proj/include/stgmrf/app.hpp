#pragma once

#include "stgmrf/diagnostics.hpp"
#include "stgmrf/predict.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace stgmrf {

/// Synthetic-data settings used by `simulate`.
struct SimConfig {
  ModelKind kind = ModelKind::FullST;
  int n_sites = 30;
  double lon0 = 34.0, lon1 = 46.0, lat0 = 4.0, lat1 = 14.0;
  double jitter = 0.25;
  int T = 36;
  int year0 = 2012;
  int p = 2;
  std::vector<double> beta = {0.5, -0.3, 0.4};
  double sigma_eps = 0.3;
  double range = 400.0;
  double sigma_omega = 1.0;
  double phi = 0.7;
  double sigma_f = 0.3;
  double phi_f = 0.5;
  double response_offset = 270.0;
  double response_scale = 10.0;
  int grid_points = 0;  // prediction grid rows per month; 0 disables
  int grid_months = 12;  // last months of the simulated span
};

struct RunConfig {
  std::string data_path;
  std::string output_dir = "out";
  std::optional<std::uint64_t> seed;
  int threads = 1;
  ModelKind model = ModelKind::FullST;
  std::vector<ModelKind> models;  // compare
  int split_cutoff = 0;           // last training month index; 0 = no validation split
  DatasetSchema schema;
  MeshConfig mesh;
  PriorConfig prior;
  bool additive_temporal = true;
  double grid_step = 0.75, grid_drop = 5.0, grid_margin = 2.5;
  int max_iter = 500;
  std::string prediction_grid;
  std::string fit_path;  // defaults to <output_dir>/fit.json
  SeasonGroups seasons = default_seasons();
  SimConfig sim;

  std::string canonical;  // merged settings as sorted JSON
  std::string hash;       // FNV-1a of `canonical`, hex

  ModelSpec model_spec(ModelKind kind) const;
};

/// Merges, in increasing precedence: the JSON config file, environment overrides
/// (STGMRF_OUTPUT_DIR, STGMRF_THREADS) and `key=value` overrides from the command line.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);
RunConfig config_from_json_text(const std::string& text, const std::vector<std::string>& overrides,
                                const std::string& origin = "<memory>");

std::uint64_t fnv1a64(const std::string& s);

int cmd_simulate(const RunConfig& cfg);
int cmd_fit(const RunConfig& cfg);
int cmd_compare(const RunConfig& cfg);
int cmd_predict(const RunConfig& cfg);
int cmd_report(const RunConfig& cfg);

/// Entry point of the command-line tool; returns the process exit code.
int run_cli(int argc, char** argv);

/// {"code", "message", "context"} as compact JSON.
std::string error_json(const std::string& code, const std::string& message, const std::string& context);

}  // namespace stgmrf
