#include "stgmrf/app.hpp"

#include "stgmrf/error.hpp"
#include "stgmrf/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace stgmrf {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "data", "output_dir", "seed", "threads", "model", "models", "split_cutoff", "response", "covariates",
      "mesh_max_edge_inner", "mesh_max_edge_outer", "mesh_extension", "mesh_cutoff",
      "prior_range0", "prior_alpha_range", "prior_sigma0", "prior_alpha_sigma", "prior_phi", "prior_phi_u",
      "prior_phi_alpha", "prior_noise_shape", "prior_noise_rate", "prior_beta_prec",
      "additive_temporal", "grid_step", "grid_drop", "grid_margin", "max_iter",
      "prediction_grid", "fit_path", "seasons",
      "sim_model", "sim_n_sites", "sim_lon0", "sim_lon1", "sim_lat0", "sim_lat1", "sim_jitter", "sim_T", "sim_year0",
      "sim_p", "sim_beta", "sim_sigma_eps", "sim_range", "sim_sigma_omega", "sim_phi", "sim_sigma_f", "sim_phi_f",
      "sim_response_offset", "sim_response_scale", "sim_grid_points", "sim_grid_months"};
  return keys;
}

// keys that do not change any result and are left out of the config hash
bool volatile_key(const std::string& k) { return k == "output_dir" || k == "threads"; }

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error("invalid_config", std::string("config key '") + key + "' has the wrong type", key);
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json parse_value(const std::string& v) {
  try {
    return json::parse(v);
  } catch (const json::exception&) {
    return json(v);  // bare strings need no quoting on the command line
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("write_failed", "cannot write output file", p.string());
  f << text;
  if (!f) throw Error("write_failed", "cannot write output file", p.string());
}

std::string read_text(const fs::path& p, const std::string& what) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("missing_artifact", "missing " + what, p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("write_failed", "cannot create output directory", dir);
  return fs::path(dir);
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

ojson marginal_json(const Marginal& m) {
  return ojson{{"name", m.name}, {"mean", m.mean}, {"sd", m.sd}, {"q025", m.q025}, {"q50", m.q50}, {"q975", m.q975}};
}

ojson score_json(const ScoreReport& s) {
  ojson j;
  j["n"] = s.n;
  j["r"] = s.r ? json(*s.r) : json(nullptr);
  j["rmse"] = s.rmse;
  j["mae"] = s.mae;
  j["mean_error"] = s.mean_error;
  j["rmse_du"] = s.rmse_du;
  j["mae_du"] = s.mae_du;
  return j;
}

std::string marginal_table_csv(const std::vector<Marginal>& ms, const std::string& first, const std::string& hash) {
  std::string out = first + ",mean,sd,q025,q50,q975,config_hash\n";
  for (const auto& m : ms)
    out += m.name + ',' + fmt17(m.mean) + ',' + fmt17(m.sd) + ',' + fmt17(m.q025) + ',' + fmt17(m.q50) + ',' +
           fmt17(m.q975) + ',' + hash + '\n';
  return out;
}

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& cfg,
                    const std::vector<std::string>& files) {
  ojson j;
  j["command"] = command;
  j["config_hash"] = cfg.hash;
  j["config"] = json::parse(cfg.canonical);
  j["files"] = files;
  write_text(dir / ("manifest_" + command + ".json"), j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared fit pipeline

struct PreparedData {
  Dataset full;             // standardized; validation responses masked
  Eigen::VectorXd valid_y;  // standardized validation responses, NaN elsewhere
  bool has_validation = false;
};

PreparedData prepare_data(const RunConfig& cfg) {
  if (cfg.data_path.empty()) throw Error("missing_path", "config key 'data' is required", "data");
  if (!fs::exists(cfg.data_path)) throw Error("file_not_found", "data file does not exist", cfg.data_path);
  const Dataset raw = load_dataset(cfg.data_path, cfg.schema);
  PreparedData pd;
  if (cfg.split_cutoff > 0) {
    const int T = raw.max_time();
    if (cfg.split_cutoff >= T || cfg.split_cutoff < raw.min_time())
      throw Error("cutoff_out_of_range", "split_cutoff must lie inside the data's time span",
                  "split_cutoff=" + std::to_string(cfg.split_cutoff));
    const auto scaling = compute_scaling(select_times(raw, raw.min_time(), cfg.split_cutoff));
    pd.full = standardize(raw, scaling);
    pd.valid_y = Eigen::VectorXd::Constant(pd.full.y.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t r = 0; r < pd.full.rows(); ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      if (pd.full.time[r] > cfg.split_cutoff) {
        pd.valid_y[ri] = pd.full.y[ri];
        pd.full.y[ri] = std::numeric_limits<double>::quiet_NaN();
      }
    }
    pd.has_validation = true;
  } else {
    pd.full = standardize(raw);
    pd.valid_y = Eigen::VectorXd::Constant(pd.full.y.size(), std::numeric_limits<double>::quiet_NaN());
  }
  return pd;
}

struct ModelRun {
  std::unique_ptr<MeshArtifacts> mesh;
  AssembledModel am;
};

ModelRun build_model(const RunConfig& cfg, const PreparedData& pd, ModelKind kind) {
  ModelRun run;
  const ModelSpec spec = cfg.model_spec(kind);
  if (kind != ModelKind::CovariateOnly) run.mesh = std::make_unique<MeshArtifacts>(build_mesh_artifacts(pd.full, spec.mesh_cfg));
  run.am = assemble(spec, pd.full, run.mesh.get());
  return run;
}

struct FitSummary {
  CriteriaReport crit;
  ScoreReport train;
  std::optional<ScoreReport> valid;
};

FitSummary summarize_fit(const PreparedData& pd, const AssembledModel& am, const FitResult& fr) {
  FitSummary s;
  s.crit = criteria(fr, am);
  const double rsd = pd.full.response_scaling().sd;
  s.train = score(am.y, fr.fitted_mean, rsd);
  std::vector<double> obs, pred;
  for (std::size_t i = 0; i < am.miss_row.size(); ++i) {
    const double v = pd.valid_y[am.miss_row[i]];
    if (std::isfinite(v)) {
      obs.push_back(v);
      pred.push_back(fr.pred_mean[static_cast<Eigen::Index>(i)]);
    }
  }
  if (obs.size() >= 2)
    s.valid = score(Eigen::Map<Eigen::VectorXd>(obs.data(), static_cast<Eigen::Index>(obs.size())),
                    Eigen::Map<Eigen::VectorXd>(pred.data(), static_cast<Eigen::Index>(pred.size())), rsd);
  return s;
}

ojson fit_json(const RunConfig& cfg, const PreparedData& pd, const AssembledModel& am, const FitResult& fr) {
  ojson j;
  j["config_hash"] = cfg.hash;
  j["model"] = to_string(fr.kind);
  j["n_obs"] = am.n;
  j["n_predicted_rows"] = static_cast<int>(am.miss_row.size());
  j["latent_dim"] = am.layout.dim;
  j["mesh_vertices"] = am.m;
  j["T"] = am.T;
  j["t0"] = am.t0;
  j["year0"] = pd.full.year0;
  j["theta_names"] = fr.theta_names;
  j["mode"] = to_vec(fr.theta_grid.mode);
  json h = json::array();
  for (Eigen::Index r = 0; r < fr.theta_grid.hessian.rows(); ++r) h.push_back(to_vec(fr.theta_grid.hessian.row(r).transpose()));
  j["hessian"] = h;
  j["log_ml"] = fr.log_ml;
  j["mode_log_post"] = fr.mode_log_post;
  j["converged"] = fr.converged;
  j["iterations"] = fr.iterations;
  j["hessian_repaired"] = fr.hessian_repaired;
  j["warnings"] = fr.warnings;
  ojson beta = ojson::array();
  for (const auto& m : fr.beta_marginals) beta.push_back(marginal_json(m));
  j["beta"] = beta;
  const ColumnScaling rs = pd.full.response_scaling();
  if (!fr.beta_marginals.empty()) j["intercept_du"] = back_transform(fr.beta_marginals[0].mean, rs);
  ojson hyper = ojson::array();
  for (const auto& m : fr.hyper_marginals) hyper.push_back(marginal_json(m));
  j["hyper"] = hyper;
  ojson sc;
  for (const auto& [name, s] : pd.full.scaling) sc[name] = ojson{{"mean", s.mean}, {"sd", s.sd}};
  j["scaling"] = sc;
  ojson grid = ojson::array();
  for (const auto& gp : fr.theta_grid.points)
    grid.push_back(ojson{{"theta", to_vec(gp.theta)}, {"log_post", gp.log_post}, {"weight", gp.weight}});
  j["grid"] = grid;
  return j;
}

ojson criteria_json(const RunConfig& cfg, const CriteriaReport& c) {
  ojson j;
  j["config_hash"] = cfg.hash;
  j["dic"] = c.dic;
  j["p_dic"] = c.p_dic;
  j["waic"] = c.waic;
  j["p_waic"] = c.p_waic;
  j["lppd"] = c.lppd;
  j["lcpo"] = c.lcpo;
  j["n_unreliable_cpo"] = c.n_unreliable;
  j["p_waic_latent_only"] = c.p_waic_latent_only;
  const auto ks = ks_uniform(c.pit);
  j["pit_ks_statistic"] = ks.statistic;
  j["pit_ks_p_value"] = ks.p_value;
  j["pit_histogram"] = pit_histogram(c.pit, 20);
  return j;
}

ojson scores_json(const RunConfig& cfg, const FitSummary& s) {
  ojson j;
  j["config_hash"] = cfg.hash;
  j["train"] = score_json(s.train);
  j["validation"] = s.valid ? score_json(*s.valid) : ojson(nullptr);
  return j;
}

std::vector<std::string> write_fit_outputs(const fs::path& dir, const RunConfig& cfg, const PreparedData& pd,
                                           const AssembledModel& am, const FitResult& fr, const FitSummary& s) {
  std::vector<std::string> files;
  auto put = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    files.push_back(name);
  };
  put("fit.json", fit_json(cfg, pd, am, fr).dump(2) + "\n");
  put("criteria.json", criteria_json(cfg, s.crit).dump(2) + "\n");
  put("scores.json", scores_json(cfg, s).dump(2) + "\n");
  put("beta_table.csv", marginal_table_csv(fr.beta_marginals, "term", cfg.hash));
  put("hyper_table.csv", marginal_table_csv(fr.hyper_marginals, "parameter", cfg.hash));

  std::string cp = "row_id,cpo,pit,flag\n";
  for (int i = 0; i < am.n; ++i)
    cp += std::to_string(am.obs_row[static_cast<std::size_t>(i)]) + ',' + fmt17(s.crit.cpo[i]) + ',' +
          fmt17(s.crit.pit[i]) + ',' + (s.crit.cpo_reliable[static_cast<std::size_t>(i)] ? "ok" : "unreliable") + '\n';
  put("cpo_pit.csv", cp);

  const auto hist = pit_histogram(s.crit.pit, 20);
  std::string ph = "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < hist.size(); ++b)
    ph += fmt17(static_cast<double>(b) / 20.0) + ',' + fmt17(static_cast<double>(b + 1) / 20.0) + ',' +
          std::to_string(hist[b]) + '\n';
  put("pit_histogram.csv", ph);

  std::string fitted = "row_id,t,y,mean,sd\n";
  for (int i = 0; i < am.n; ++i) {
    const auto r = static_cast<std::size_t>(am.obs_row[static_cast<std::size_t>(i)]);
    fitted += std::to_string(r) + ',' + std::to_string(pd.full.time[r]) + ',' + fmt17(am.y[i]) + ',' +
              fmt17(fr.fitted_mean[i]) + ',' + fmt17(fr.fitted_sd[i]) + '\n';
  }
  put("fitted.csv", fitted);

  if (am.m > 0) {
    std::string lat = "vertex,t,mean,sd\n";
    const int blocks = am.spec.kind == ModelKind::FullST ? am.T : 1;
    for (int t = 0; t < blocks; ++t)
      for (int v = 0; v < am.m; ++v) {
        const auto k = static_cast<Eigen::Index>(am.layout.field_offset + t * am.m + v);
        lat += std::to_string(v) + ',' + std::to_string(am.spec.kind == ModelKind::FullST ? am.t0 + t : 0) + ',' +
               fmt17(fr.latent_mean[k]) + ',' + fmt17(fr.latent_sd[k]) + '\n';
      }
    put("latent.csv", lat);
  }
  return files;
}

FitResult run_engine(const AssembledModel& am) {
  FitResult fr = fit(am);
  for (const auto& w : fr.warnings) std::cerr << "warning: " << w << "\n";
  return fr;
}

std::string table_cell(const std::optional<double>& v) { return v ? fmt17(*v) : std::string{}; }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string error_json(const std::string& code, const std::string& message, const std::string& context) {
  return ojson{{"code", code}, {"message", message}, {"context", context}}.dump();
}

ModelSpec RunConfig::model_spec(ModelKind kind) const {
  ModelSpec s;
  s.kind = kind;
  s.prior = prior;
  s.mesh_cfg = mesh;
  s.additive_temporal = additive_temporal;
  s.grid_step = grid_step;
  s.grid_drop = grid_drop;
  s.grid_margin = grid_margin;
  s.max_iter = max_iter;
  s.threads = threads;
  return s;
}

RunConfig config_from_json_text(const std::string& text, const std::vector<std::string>& overrides,
                                const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error("invalid_config", std::string("config is not valid JSON: ") + e.what(), origin);
  }
  if (!j.is_object()) throw Error("invalid_config", "config must be a JSON object", origin);
  if (const char* od = std::getenv("STGMRF_OUTPUT_DIR"); od && *od) j["output_dir"] = od;
  if (const char* th = std::getenv("STGMRF_THREADS"); th && *th) j["threads"] = parse_value(th);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("invalid_override", "overrides must look like key=value", o);
    j[o.substr(0, eq)] = parse_value(o.substr(eq + 1));
  }
  for (const auto& [k, v] : j.items())
    if (!known_keys().count(k)) throw Error("unknown_config_key", "unknown config key '" + k + "'", k);

  RunConfig c;
  c.data_path = get_or<std::string>(j, "data", "");
  c.output_dir = get_or<std::string>(j, "output_dir", "out");
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer() || j["seed"].get<long long>() < 0)
      throw Error("invalid_config", "seed must be a non-negative integer", "seed");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  c.threads = get_or<int>(j, "threads", 1);
  if (c.threads < 1) throw Error("invalid_config", "threads must be at least 1", "threads");
  c.model = model_kind_from_string(get_or<std::string>(j, "model", "full_st"));
  for (const auto& m : get_or<std::vector<std::string>>(j, "models", {})) c.models.push_back(model_kind_from_string(m));
  c.split_cutoff = get_or<int>(j, "split_cutoff", 0);
  c.schema.response = get_or<std::string>(j, "response", "tco");
  c.schema.covariates = get_or<std::vector<std::string>>(j, "covariates", {});

  c.mesh.max_edge_inner = get_or<double>(j, "mesh_max_edge_inner", c.mesh.max_edge_inner);
  c.mesh.max_edge_outer = get_or<double>(j, "mesh_max_edge_outer", c.mesh.max_edge_outer);
  c.mesh.extension = get_or<double>(j, "mesh_extension", c.mesh.extension);
  c.mesh.cutoff = get_or<double>(j, "mesh_cutoff", c.mesh.cutoff);
  c.mesh.validate();

  c.prior.range0 = get_or<double>(j, "prior_range0", c.prior.range0);
  c.prior.alpha_range = get_or<double>(j, "prior_alpha_range", c.prior.alpha_range);
  c.prior.sigma0 = get_or<double>(j, "prior_sigma0", c.prior.sigma0);
  c.prior.alpha_sigma = get_or<double>(j, "prior_alpha_sigma", c.prior.alpha_sigma);
  c.prior.phi_kind = ar1_prior_kind_from_string(get_or<std::string>(j, "prior_phi", to_string(c.prior.phi_kind)));
  c.prior.phi_u = get_or<double>(j, "prior_phi_u", c.prior.phi_u);
  c.prior.phi_alpha = get_or<double>(j, "prior_phi_alpha", c.prior.phi_alpha);
  c.prior.noise_shape = get_or<double>(j, "prior_noise_shape", c.prior.noise_shape);
  c.prior.noise_rate = get_or<double>(j, "prior_noise_rate", c.prior.noise_rate);
  c.prior.beta_prec = get_or<double>(j, "prior_beta_prec", c.prior.beta_prec);
  c.prior.validate();

  c.additive_temporal = get_or<bool>(j, "additive_temporal", true);
  c.grid_step = get_or<double>(j, "grid_step", c.grid_step);
  c.grid_drop = get_or<double>(j, "grid_drop", c.grid_drop);
  c.grid_margin = get_or<double>(j, "grid_margin", c.grid_margin);
  c.max_iter = get_or<int>(j, "max_iter", c.max_iter);
  if (!(c.grid_step > 0 && c.grid_drop > 0 && c.grid_margin >= 0 && c.max_iter > 0))
    throw Error("invalid_config", "grid_step, grid_drop and max_iter must be positive");
  c.prediction_grid = get_or<std::string>(j, "prediction_grid", "");
  c.fit_path = get_or<std::string>(j, "fit_path", "");

  if (j.contains("seasons")) {
    if (!j["seasons"].is_object() || j["seasons"].empty())
      throw Error("invalid_config", "seasons must map names to month lists", "seasons");
    c.seasons.clear();
    for (const auto& [name, months] : j["seasons"].items()) {
      std::vector<int> ms;
      try {
        ms = months.get<std::vector<int>>();
      } catch (const json::exception&) {
        throw Error("invalid_config", "season months must be integers", name);
      }
      for (int mth : ms)
        if (mth < 1 || mth > 12) throw Error("invalid_season", "season month outside 1..12", name);
      if (ms.empty()) throw Error("invalid_season", "season without months", name);
      c.seasons.emplace_back(name, ms);
    }
  }

  auto& s = c.sim;
  s.kind = model_kind_from_string(get_or<std::string>(j, "sim_model", to_string(c.model)));
  s.n_sites = get_or<int>(j, "sim_n_sites", s.n_sites);
  s.lon0 = get_or<double>(j, "sim_lon0", s.lon0);
  s.lon1 = get_or<double>(j, "sim_lon1", s.lon1);
  s.lat0 = get_or<double>(j, "sim_lat0", s.lat0);
  s.lat1 = get_or<double>(j, "sim_lat1", s.lat1);
  s.jitter = get_or<double>(j, "sim_jitter", s.jitter);
  s.T = get_or<int>(j, "sim_T", s.T);
  s.year0 = get_or<int>(j, "sim_year0", s.year0);
  s.p = get_or<int>(j, "sim_p", s.p);
  s.beta = get_or<std::vector<double>>(j, "sim_beta", s.beta);
  s.sigma_eps = get_or<double>(j, "sim_sigma_eps", s.sigma_eps);
  s.range = get_or<double>(j, "sim_range", s.range);
  s.sigma_omega = get_or<double>(j, "sim_sigma_omega", s.sigma_omega);
  s.phi = get_or<double>(j, "sim_phi", s.phi);
  s.sigma_f = get_or<double>(j, "sim_sigma_f", s.sigma_f);
  s.phi_f = get_or<double>(j, "sim_phi_f", s.phi_f);
  s.response_offset = get_or<double>(j, "sim_response_offset", s.response_offset);
  s.response_scale = get_or<double>(j, "sim_response_scale", s.response_scale);
  s.grid_points = get_or<int>(j, "sim_grid_points", s.grid_points);
  s.grid_months = get_or<int>(j, "sim_grid_months", s.grid_months);

  json canon = json::object();
  for (const auto& [k, v] : j.items())
    if (!volatile_key(k)) canon[k] = v;
  c.canonical = canon.dump();
  c.hash = hex64(fnv1a64(c.canonical));
  return c;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("file_not_found", "cannot open config file", path);
  std::stringstream ss;
  ss << f.rdbuf();
  return config_from_json_text(ss.str(), overrides, path);
}

// ---------------------------------------------------------------------------
// Commands

namespace {

void require_seed(const RunConfig& cfg) {
  if (!cfg.seed) throw Error("missing_seed", "config key 'seed' is mandatory", "seed");
}

}  // namespace

int cmd_simulate(const RunConfig& cfg) {
  require_seed(cfg);
  const auto& s = cfg.sim;
  const fs::path dir = ensure_dir(cfg.output_dir);
  SimulationSetup setup;
  setup.sites = lattice_sites(s.n_sites, s.lon0, s.lon1, s.lat0, s.lat1, *cfg.seed, s.jitter);
  setup.T = s.T;
  setup.year0 = s.year0;
  setup.p = s.p;
  setup.mesh_cfg = cfg.mesh;
  setup.response_offset = s.response_offset;
  setup.response_scale = s.response_scale;
  TruthRecord truth;
  truth.kind = s.kind;
  truth.beta = Eigen::Map<const Eigen::VectorXd>(s.beta.data(), static_cast<Eigen::Index>(s.beta.size()));
  truth.sigma_eps = s.sigma_eps;
  truth.range = s.range;
  truth.sigma_omega = s.sigma_omega;
  truth.phi = s.phi;
  truth.sigma_f = s.sigma_f;
  truth.phi_f = s.phi_f;
  const Simulation sim = simulate(setup, truth, *cfg.seed);
  std::vector<std::string> files = {"data.csv", "truth.json"};
  write_dataset_csv(sim.dataset, (dir / "data.csv").string());
  write_truth_json(sim.truth, (dir / "truth.json").string());

  if (s.grid_points > 0) {
    if (s.grid_months < 1 || s.grid_months > s.T)
      throw Error("invalid_config", "sim_grid_months must lie in 1..sim_T", "sim_grid_months");
    // regular lon/lat lattice covering the site box, first grid_points nodes in row-major order
    const double aspect = (s.lon1 - s.lon0) / std::max(s.lat1 - s.lat0, 1e-9);
    const int nx = std::max(1, static_cast<int>(std::ceil(std::sqrt(s.grid_points * aspect))));
    const int ny = (s.grid_points + nx - 1) / nx;
    std::vector<GeoPoint> geo;
    for (int r = 0; r < ny && static_cast<int>(geo.size()) < s.grid_points; ++r)
      for (int q = 0; q < nx && static_cast<int>(geo.size()) < s.grid_points; ++q)
        geo.push_back({s.lon0 + (q + 0.5) * (s.lon1 - s.lon0) / nx, s.lat0 + (r + 0.5) * (s.lat1 - s.lat0) / ny});
    const auto pts = project_coordinates(geo, sim.dataset.reference);
    std::mt19937_64 rng(stream_seed(*cfg.seed, 4));
    const Eigen::MatrixXd X = default_covariates(pts, s.grid_months, s.p, rng);
    std::string out = "lon,lat,year,month";
    for (const auto& n : sim.dataset.names) out += ',' + n;
    out += '\n';
    const int first = s.T - s.grid_months + 1;
    for (std::size_t i = 0; i < geo.size(); ++i)
      for (int k = 0; k < s.grid_months; ++k) {
        const int t = first + k;
        out += fmt17(geo[i].lon) + ',' + fmt17(geo[i].lat) + ',' + std::to_string(s.year0 + (t - 1) / 12) + ',' +
               std::to_string(calendar_month(t));
        const auto row = static_cast<Eigen::Index>(i) * s.grid_months + k;
        for (int c = 0; c < s.p; ++c) out += ',' + fmt17(X(row, c));
        out += '\n';
      }
    write_text(dir / "grid.csv", out);
    files.push_back("grid.csv");
  }
  write_manifest(dir, "simulate", cfg, files);
  return 0;
}

int cmd_fit(const RunConfig& cfg) {
  require_seed(cfg);
  const fs::path dir = ensure_dir(cfg.output_dir);
  const PreparedData pd = prepare_data(cfg);
  const ModelRun run = build_model(cfg, pd, cfg.model);
  const FitResult fr = run_engine(run.am);
  const FitSummary s = summarize_fit(pd, run.am, fr);
  auto files = write_fit_outputs(dir, cfg, pd, run.am, fr, s);
  write_manifest(dir, "fit", cfg, files);
  return 0;
}

int cmd_compare(const RunConfig& cfg) {
  require_seed(cfg);
  if (cfg.models.size() < 2) throw Error("too_few_models", "compare needs at least two models", "models");
  const fs::path dir = ensure_dir(cfg.output_dir);
  const PreparedData pd = prepare_data(cfg);
  std::string csv =
      "model,status,dic,waic,lcpo,r_train,rmse_valid,mae_valid,r_valid,rmse_valid_du,mae_valid_du,log_ml,config_hash\n";
  ojson rows = ojson::array();
  bool failed = false;
  for (const ModelKind kind : cfg.models) {
    ojson row;
    row["model"] = to_string(kind);
    try {
      const ModelRun run = build_model(cfg, pd, kind);
      const FitResult fr = run_engine(run.am);
      const FitSummary s = summarize_fit(pd, run.am, fr);
      const auto v = s.valid;
      csv += to_string(kind) + ",ok," + fmt17(s.crit.dic) + ',' + fmt17(s.crit.waic) + ',' + fmt17(s.crit.lcpo) + ',' +
             table_cell(s.train.r) + ',' + (v ? fmt17(v->rmse) : "") + ',' + (v ? fmt17(v->mae) : "") + ',' +
             (v ? table_cell(v->r) : "") + ',' + (v ? fmt17(v->rmse_du) : "") + ',' + (v ? fmt17(v->mae_du) : "") +
             ',' + fmt17(fr.log_ml) + ',' + cfg.hash + '\n';
      row["status"] = "ok";
      row["dic"] = s.crit.dic;
      row["waic"] = s.crit.waic;
      row["lcpo"] = s.crit.lcpo;
      row["log_ml"] = fr.log_ml;
      row["train"] = score_json(s.train);
      row["validation"] = v ? score_json(*v) : ojson(nullptr);
    } catch (const Error& e) {
      failed = true;
      csv += to_string(kind) + ",failed:" + e.code() + ",,,,,,,,,,," + cfg.hash + '\n';
      row["status"] = "failed";
      row["error"] = json::parse(error_json(e.code(), e.what(), e.context()));
    }
    rows.push_back(row);
  }
  write_text(dir / "comparison.csv", csv);
  ojson j;
  j["config_hash"] = cfg.hash;
  j["rows"] = rows;
  write_text(dir / "comparison.json", j.dump(2) + "\n");
  write_manifest(dir, "compare", cfg, {"comparison.csv", "comparison.json"});
  if (failed) {
    std::cerr << error_json("partial_failure", "at least one model failed to fit", "comparison.csv") << "\n";
    return 3;
  }
  return 0;
}

int cmd_predict(const RunConfig& cfg) {
  require_seed(cfg);
  const fs::path dir = ensure_dir(cfg.output_dir);
  const fs::path fit_path = cfg.fit_path.empty() ? dir / "fit.json" : fs::path(cfg.fit_path);
  const json fj = json::parse(read_text(fit_path, "fit.json (run fit first)"));
  if (cfg.prediction_grid.empty())
    throw Error("missing_path", "config key 'prediction_grid' is required", "prediction_grid");
  if (!fs::exists(cfg.prediction_grid))
    throw Error("file_not_found", "prediction grid does not exist", cfg.prediction_grid);
  const ModelKind kind = model_kind_from_string(fj.at("model").get<std::string>());

  const PreparedData pd = prepare_data(cfg);
  const ModelRun run = build_model(cfg, pd, kind);
  const AssembledModel& am = run.am;
  if (fj.at("latent_dim").get<int>() != am.layout.dim || fj.at("n_obs").get<int>() != am.n)
    throw Error("fit_mismatch", "fit.json does not match the configured data and model", fit_path.string());

  ThetaGrid grid;
  for (const auto& g : fj.at("grid")) {
    GridPoint gp;
    const auto th = g.at("theta").get<std::vector<double>>();
    gp.theta = Eigen::Map<const Eigen::VectorXd>(th.data(), static_cast<Eigen::Index>(th.size()));
    gp.log_post = g.at("log_post").get<double>();
    gp.weight = g.at("weight").get<double>();
    grid.points.push_back(gp);
  }
  const auto mode = fj.at("mode").get<std::vector<double>>();
  grid.mode = Eigen::Map<const Eigen::VectorXd>(mode.data(), static_cast<Eigen::Index>(mode.size()));

  const PredictionRequest req = read_prediction_grid(cfg.prediction_grid, pd.full);
  const PredictionResult res = predict_surface(grid, am, req, pd.full.response_scaling());
  std::vector<std::string> files = {"predictions.csv"};
  write_predictions_csv(res, (dir / "predictions.csv").string());

  if (kind == ModelKind::FullST) {
    FitResult latent;
    latent.kind = kind;
    latent.latent_mean = res.latent_mean;
    latent.latent_sd = res.latent_sd;
    write_latent_summary_csv(monthly_latent_summary(latent, am), am, pd.full.reference, "month",
                             (dir / "monthly_latent.csv").string());
    write_latent_summary_csv(seasonal_latent_summary(latent, am, cfg.seasons), am, pd.full.reference, "season",
                             (dir / "seasonal_latent.csv").string());
    files.push_back("monthly_latent.csv");
    files.push_back("seasonal_latent.csv");
  }
  write_manifest(dir, "predict", cfg, files);
  return 0;
}

int cmd_report(const RunConfig& cfg) {
  const fs::path dir(cfg.output_dir);
  const json fj = json::parse(read_text(dir / "fit.json", "fit.json (run fit first)"));
  const json cj = json::parse(read_text(dir / "criteria.json", "criteria.json (run fit first)"));
  const json sj = json::parse(read_text(dir / "scores.json", "scores.json (run fit first)"));
  std::ostringstream md;
  auto num = [](const json& v) { return v.is_null() ? std::string("-") : fmt17(v.get<double>()); };
  md << "# Fit report\n\n";
  md << "- model: " << fj.at("model").get<std::string>() << "\n";
  md << "- config hash: " << fj.at("config_hash").get<std::string>() << "\n";
  md << "- observations: " << fj.at("n_obs").get<int>() << ", latent dimension: " << fj.at("latent_dim").get<int>()
     << ", mesh vertices: " << fj.at("mesh_vertices").get<int>() << "\n";
  md << "- log marginal likelihood: " << num(fj.at("log_ml")) << "\n\n";
  md << "## Model criteria\n\n| DIC | WAIC | LCPO | r (train) | RMSE (validation) | MAE (validation) | r (validation) |\n";
  md << "|---|---|---|---|---|---|---|\n";
  const json& v = sj.at("validation");
  md << "| " << num(cj.at("dic")) << " | " << num(cj.at("waic")) << " | " << num(cj.at("lcpo")) << " | "
     << num(sj.at("train").at("r")) << " | " << (v.is_null() ? "-" : num(v.at("rmse"))) << " | "
     << (v.is_null() ? "-" : num(v.at("mae"))) << " | " << (v.is_null() ? "-" : num(v.at("r"))) << " |\n\n";
  auto table = [&](const char* title, const json& rows) {
    md << "## " << title << "\n\n| | mean | sd | 2.5% | 50% | 97.5% |\n|---|---|---|---|---|---|\n";
    for (const auto& r : rows)
      md << "| " << r.at("name").get<std::string>() << " | " << num(r.at("mean")) << " | " << num(r.at("sd")) << " | "
         << num(r.at("q025")) << " | " << num(r.at("q50")) << " | " << num(r.at("q975")) << " |\n";
    md << "\n";
  };
  table("Fixed effects (standardized units)", fj.at("beta"));
  table("Hyperparameters", fj.at("hyper"));
  if (fs::exists(dir / "comparison.json")) {
    const json cmp = json::parse(read_text(dir / "comparison.json", "comparison.json"));
    md << "## Model comparison\n\n| model | status | DIC | WAIC | LCPO | RMSE (validation) |\n|---|---|---|---|---|---|\n";
    for (const auto& r : cmp.at("rows")) {
      const bool ok = r.at("status") == "ok";
      md << "| " << r.at("model").get<std::string>() << " | " << r.at("status").get<std::string>() << " | "
         << (ok ? num(r.at("dic")) : "-") << " | " << (ok ? num(r.at("waic")) : "-") << " | "
         << (ok ? num(r.at("lcpo")) : "-") << " | "
         << (ok && !r.at("validation").is_null() ? num(r.at("validation").at("rmse")) : "-") << " |\n";
    }
    md << "\n";
  }
  write_text(dir / "report.md", md.str());
  return 0;
}

// ---------------------------------------------------------------------------
// Command line

int run_cli(int argc, char** argv) {
  CLI::App app{"Spatiotemporal SPDE/GMRF modelling of gridded monthly data"};
  app.require_subcommand(1);
  std::string config_path, output;
  std::vector<std::string> sets;
  int threads = 0;
  long long seed = -1;
  for (const char* name : {"simulate", "fit", "compare", "predict", "report"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("-c,--config", config_path, "flat JSON config file")->required();
    sub->add_option("--set", sets, "override a config key: key=value (repeatable)");
    sub->add_option("-o,--output", output, "output directory");
    sub->add_option("--threads", threads, "worker thread cap");
    sub->add_option("--seed", seed, "random seed");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  std::string out_dir;
  try {
    if (!output.empty()) sets.push_back("output_dir=" + json(output).dump());
    if (threads > 0) sets.push_back("threads=" + std::to_string(threads));
    if (seed >= 0) sets.push_back("seed=" + std::to_string(seed));
    const RunConfig cfg = load_config(config_path, sets);
    out_dir = cfg.output_dir;
    if (cmd == "simulate") return cmd_simulate(cfg);
    if (cmd == "fit") return cmd_fit(cfg);
    if (cmd == "compare") return cmd_compare(cfg);
    if (cmd == "predict") return cmd_predict(cfg);
    return cmd_report(cfg);
  } catch (const std::exception& e) {
    const auto* se = dynamic_cast<const Error*>(&e);
    const std::string js =
        se ? error_json(se->code(), se->what(), se->context()) : error_json("internal_error", e.what(), cmd);
    std::cerr << js << "\n";
    if (!out_dir.empty()) {
      std::error_code ec;
      fs::create_directories(out_dir, ec);
      std::ofstream f(fs::path(out_dir) / "error.json", std::ios::binary);
      if (f) f << js << "\n";
    }
    return 2;
  }
}

}  // namespace stgmrf
