#pragma once

#include "stgmrf/engine.hpp"

#include <optional>
#include <vector>

namespace stgmrf {

/// Point-prediction scores. The `_du` fields are on the original response scale.
struct ScoreReport {
  int n = 0;
  std::optional<double> r;  // absent when obs or pred is constant
  double rmse = 0.0, mae = 0.0, mean_error = 0.0;
  double rmse_du = 0.0, mae_du = 0.0;
};

/// `response_sd` converts standardized errors back to response units.
ScoreReport score(const Eigen::VectorXd& obs, const Eigen::VectorXd& pred, double response_sd = 1.0);

struct CriteriaReport {
  double dic = 0.0, p_dic = 0.0, d_bar = 0.0, d_hat = 0.0;
  double waic = 0.0, p_waic = 0.0, lppd = 0.0;
  double lcpo = 0.0;
  Eigen::VectorXd cpo, pit;
  std::vector<bool> cpo_reliable;
  int n_unreliable = 0;
  bool p_waic_latent_only = false;  // single-point grid
};

struct DicResult {
  double dic = 0.0, p_dic = 0.0, d_bar = 0.0, d_hat = 0.0;
};
struct WaicResult {
  double waic = 0.0, p_waic = 0.0, lppd = 0.0;
  bool latent_only = false;
};
struct CpoResult {
  Eigen::VectorXd cpo, pit;
  std::vector<bool> reliable;
  double lcpo = 0.0;
};

DicResult dic(const FitResult& fit, const AssembledModel& am);
WaicResult waic(const FitResult& fit, const AssembledModel& am);
/// Exact Gaussian leave-one-out at every grid point, mixed with the full-data weights.
CpoResult cpo_pit(const FitResult& fit, const AssembledModel& am);
CriteriaReport criteria(const FitResult& fit, const AssembledModel& am);

/// Leave-one-out predictive of y_i at one hyperparameter value, given the full-data
/// posterior moments (m, s2) of eta_i and the noise variance. Returns false when s2 >= noise_var.
struct LooPredictive {
  double mean = 0.0, var = 0.0;
};
bool loo_predictive(double y, double m, double s2, double noise_var, LooPredictive& out);

/// Counts of values in [0, 1] over `bins` equal-width bins (1.0 falls in the last bin).
std::vector<int> pit_histogram(const Eigen::VectorXd& pit, int bins = 20);

/// One-sample Kolmogorov-Smirnov test against U(0, 1).
struct KsResult {
  double statistic = 0.0, p_value = 1.0;
};
KsResult ks_uniform(const Eigen::VectorXd& u);
/// Asymptotic Kolmogorov survival function P(K > x).
double kolmogorov_survival(double x);

double normal_pdf(double x, double mean, double var);
double normal_log_pdf(double x, double mean, double var);

}  // namespace stgmrf
