#pragma once

#include "stgmrf/block_spd.hpp"
#include "stgmrf/data_io.hpp"
#include "stgmrf/mesh.hpp"
#include "stgmrf/priors.hpp"
#include "stgmrf/sparse_spd.hpp"
#include "stgmrf/spde.hpp"
#include "stgmrf/temporal.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace stgmrf {

enum class ModelKind { CovariateOnly, Additive, FullST };

ModelKind model_kind_from_string(const std::string& s);
std::string to_string(ModelKind k);

struct ModelSpec {
  ModelKind kind = ModelKind::FullST;
  PriorConfig prior;
  SpdeConfig spde;
  MeshConfig mesh_cfg;
  /// Model 2 only: include the AR(1) temporal effect f(t).
  bool additive_temporal = true;
  /// Latent time span (1-based month indices); 0 means "taken from the data".
  int t_first = 0;
  int t_last = 0;
  double grid_step = 0.75;
  double grid_drop = 5.0;
  /// Extra slack on the additive drop prediction used to pre-screen grid candidates.
  double grid_margin = 2.5;
  int max_iter = 500;
  int threads = 1;

  int theta_dim() const;
};

/// Mesh plus everything derived from it that the model needs.
struct MeshArtifacts {
  TriangleMesh mesh;
  FemMatrices fem;
  SpdeOperators ops;
};

MeshArtifacts build_mesh_artifacts(const Dataset& ds, const MeshConfig& cfg);
MeshArtifacts mesh_artifacts_from(TriangleMesh mesh);

/// Block offsets inside the latent vector x. Absent blocks have size 0.
struct LatentLayout {
  int field_offset = 0, field_size = 0;  // xi (FullST, vertex-fastest) or omega (Additive)
  int f_offset = 0, f_size = 0;          // Additive temporal effect
  int beta_offset = 0, p1 = 0;           // fixed effects incl. intercept
  int dim = 0;
};

/// Natural-scale hyperparameters. Fields not used by a model kind stay at their defaults.
struct HyperValues {
  double tau_eps = 1.0;
  double range = 1.0;
  double sigma_omega = 1.0;
  double phi = 0.0;
  double sigma_f = 1.0;
  double phi_f = 0.0;
};

class AssembledModel {
public:
  ModelSpec spec;
  int n = 0;   // observed rows
  int m = 0;   // mesh vertices (0 for CovariateOnly)
  int T = 1;   // latent time points
  int p = 0;   // covariates, without intercept
  int t0 = 1;  // absolute month index of latent time 0
  LatentLayout layout;

  SpMat B;  // n x dim
  Eigen::VectorXd y;
  std::vector<int> obs_row;   // dataset row per observation
  std::vector<int> obs_time;  // zero-based latent time per observation
  std::vector<int> obs_site;
  /// Dataset rows without a response; predicted alongside the fit.
  std::vector<int> miss_row;
  SpMat B_miss;
  std::vector<std::string> theta_names;
  std::vector<std::string> beta_names;  // "intercept" followed by covariates

  const MeshArtifacts* mesh = nullptr;  // not owned; null for CovariateOnly

  int theta_dim() const { return static_cast<int>(theta_names.size()); }
  HyperValues natural(const Eigen::VectorXd& theta) const;
  Eigen::VectorXd internal(const HyperValues& h) const;
  /// Sensible data-driven starting point for the optimizer.
  Eigen::VectorXd initial_theta() const;

  double log_prior(const Eigen::VectorXd& theta) const;
  /// Prior precision of x, on the shared posterior pattern.
  SpMat prior_precision(const Eigen::VectorXd& theta) const;
  SpMat posterior_precision(const Eigen::VectorXd& theta) const;
  /// Values of Q_c aligned with pattern().
  void posterior_values(const Eigen::VectorXd& theta, Eigen::VectorXd& out) const;
  void prior_values(const Eigen::VectorXd& theta, Eigen::VectorXd& out) const;
  const SpMat& pattern() const { return pattern_; }
  const Eigen::VectorXd& bty() const { return bty_; }
  double yty() const { return yty_; }

  /// Rows of the linear predictor for arbitrary (location, time, covariates).
  /// `times` are absolute month indices, Z includes the intercept column.
  SpMat design_rows(const std::vector<SpatialPoint>& pts, const std::vector<int>& times,
                    const Eigen::MatrixXd& Z) const;

  // internal: affine representation Q_c = sum_k coef_k(theta) * terms_[k] + tau * btb_
  std::vector<double> term_coefs(const Eigen::VectorXd& theta) const;
  SpMat pattern_;
  SpMat spatial_pattern_;
  std::vector<Eigen::VectorXd> terms_;
  Eigen::VectorXd btb_;
  Eigen::VectorXd bty_;
  double yty_ = 0.0;
};

AssembledModel assemble(const ModelSpec& spec, const Dataset& ds, const MeshArtifacts* mesh);

/// Reusable factorization state: the symbolic analyses are done once per workspace.
class Workspace {
public:
  explicit Workspace(const AssembledModel& am);
  const AssembledModel& model() const { return *am_; }

  /// Factorizes Q_c(theta) and computes the conditional mean.
  void update(const Eigen::VectorXd& theta);
  double log_prior_det(const Eigen::VectorXd& theta);  // log det Q_x(theta), closed form
  const PrecisionSolver& qc() const { return *qc_; }
  /// Columns kept dense in covariance(): the temporal effect and the fixed effects.
  const std::vector<int>& dense_columns() const { return dense_cols_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  double tau_eps() const { return tau_; }

private:
  const AssembledModel* am_;
  std::unique_ptr<PrecisionSolver> qc_;
  std::optional<SparseSpd> qs_;
  std::vector<int> dense_cols_;
  Eigen::VectorXd values_, mean_;
  double tau_ = 1.0;
};

struct GaussianPosterior {
  Eigen::VectorXd mean;
  SparseSpd precision;
  double logdet = 0.0;
};

GaussianPosterior conditional_posterior(const AssembledModel& am, const Eigen::VectorXd& theta);
double log_marginal_posterior(const AssembledModel& am, const Eigen::VectorXd& theta);
/// Same quantity without the hyperprior: log p(y | theta).
double log_marginal_likelihood(const AssembledModel& am, const Eigen::VectorXd& theta);
/// Workspace variants used by the optimizer and the grid.
double log_marginal_posterior(Workspace& ws, const Eigen::VectorXd& theta);
double log_marginal_likelihood(Workspace& ws, const Eigen::VectorXd& theta);

struct NelderMeadResult {
  Eigen::VectorXd x;
  double f = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Maximizes f. Stops when the spread of f over the simplex is below f_tol and the simplex
/// diameter is below x_tol, or after max_iter iterations.
NelderMeadResult nelder_mead_max(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x0,
                                 double step, double f_tol, double x_tol, int max_iter);

Eigen::MatrixXd finite_difference_hessian(const std::function<double(const Eigen::VectorXd&)>& f,
                                          const Eigen::VectorXd& x, double h, double fx);

struct ModeResult {
  Eigen::VectorXd mode;
  double log_post = 0.0;
  Eigen::MatrixXd hessian;  // of the log posterior, symmetrized and repaired
  bool converged = false;
  bool hessian_repaired = false;
  int iterations = 0;
  std::vector<std::string> warnings;
};

ModeResult optimize_hyperparameters(const AssembledModel& am, const Eigen::VectorXd& init);

struct GridPoint {
  Eigen::VectorXd theta;
  Eigen::VectorXd z;
  double log_post = 0.0;
  double weight = 0.0;
};

struct ThetaGrid {
  std::vector<GridPoint> points;
  Eigen::VectorXd mode;
  Eigen::MatrixXd hessian;
  int mode_index = 0;
};

ThetaGrid explore_grid(const AssembledModel& am, const ModeResult& mode);

/// Gaussian summaries of one grid component.
struct ComponentSummary {
  double tau_eps = 1.0;
  Eigen::VectorXd beta_mean, beta_sd;
  Eigen::VectorXd eta_mean, eta_var;  // at the observation rows
  Eigen::VectorXd pred_mean, pred_var;  // at the rows without a response
};

struct Marginal {
  std::string name;
  double mean = 0.0, sd = 0.0, q025 = 0.0, q50 = 0.0, q975 = 0.0;
};

struct FitResult {
  ModelKind kind = ModelKind::FullST;
  ThetaGrid theta_grid;
  std::vector<ComponentSummary> components;  // aligned with theta_grid.points
  std::vector<Marginal> beta_marginals;
  std::vector<Marginal> hyper_marginals;  // natural scale
  Eigen::VectorXd latent_mean, latent_sd;  // whole latent vector x
  Eigen::VectorXd fitted_mean, fitted_sd;  // eta at the observation rows
  Eigen::VectorXd pred_mean, pred_sd;      // eta at AssembledModel::miss_row
  double log_ml = 0.0;
  double mode_log_post = 0.0;
  bool converged = false;
  bool hessian_repaired = false;
  int iterations = 0;
  std::vector<std::string> warnings;
  std::vector<std::string> theta_names, beta_names;
};

/// Summarizes the given grid (weights must be set) into a FitResult.
FitResult summarize_grid(const AssembledModel& am, ThetaGrid grid);
/// assemble must already have happened; runs optimize -> explore -> summarize.
FitResult fit(const AssembledModel& am);
FitResult fit(const AssembledModel& am, const Eigen::VectorXd& init);
/// Single-component fit at a fixed theta (the "collapsed grid").
FitResult fit_at(const AssembledModel& am, const Eigen::VectorXd& theta);

/// Quantile of a Gaussian mixture.
double mixture_quantile(const std::vector<double>& w, const std::vector<double>& mu, const std::vector<double>& sd,
                        double prob);

/// Runs `body(i, thread_index)` for i in [0, n) over up to `threads` workers.
void parallel_for(int n, int threads, const std::function<void(int, int)>& body);

}  // namespace stgmrf
