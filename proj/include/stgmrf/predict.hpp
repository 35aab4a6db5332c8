#pragma once

#include "stgmrf/engine.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace stgmrf {

/// Locations, times and covariates at which to predict; one entry per output row.
struct PredictionRequest {
  std::vector<GeoPoint> geo;
  std::vector<SpatialPoint> points;
  std::vector<int> times;  // absolute month index
  Eigen::MatrixXd Z;       // standardized, intercept first

  std::size_t rows() const { return times.size(); }
};

/// Reads a prediction grid CSV with columns lon, lat, year, month and the training
/// covariates (raw units). Coordinates, time origin and scaling come from `train`.
PredictionRequest read_prediction_grid(const std::string& path, const Dataset& train);
PredictionRequest parse_prediction_grid(const std::string& text, const Dataset& train,
                                        const std::string& origin = "<memory>");

struct PredictionResult {
  std::vector<GeoPoint> geo;
  std::vector<int> times;
  Eigen::VectorXd mean, sd;        // standardized units
  Eigen::VectorXd mean_du, sd_du;  // response units
  Eigen::VectorXd latent_mean, latent_sd;  // mixture moments of the whole latent vector
};

/// Mixture over the theta grid of the Gaussian predictive of eta at each requested row.
PredictionResult predict_surface(const ThetaGrid& grid, const AssembledModel& am, const PredictionRequest& req,
                                 const ColumnScaling& response);

void write_predictions_csv(const PredictionResult& res, const std::string& path);

/// Per-group (calendar month or season) mean and sd maps of the latent field at mesh vertices.
struct LatentGroupSummary {
  std::vector<std::string> labels;
  Eigen::MatrixXd mean, sd;  // groups x vertices
  std::vector<int> count;    // latent times contributing to each group
};

/// Calendar month of an absolute month index (1..12).
inline int calendar_month(int t) { return ((t - 1) % 12 + 12) % 12 + 1; }

LatentGroupSummary monthly_latent_summary(const FitResult& fit, const AssembledModel& am);

using SeasonGroups = std::vector<std::pair<std::string, std::vector<int>>>;
SeasonGroups default_seasons();
LatentGroupSummary seasonal_latent_summary(const FitResult& fit, const AssembledModel& am, const SeasonGroups& seasons);

/// Rows (lon, lat, label, mean, sd); `label_name` heads the group column.
void write_latent_summary_csv(const LatentGroupSummary& s, const AssembledModel& am, const GeoPoint& reference,
                              const std::string& label_name, const std::string& path);

struct PosteriorDraws {
  std::vector<int> component;  // grid point of each draw
  Eigen::MatrixXd x;           // dim(x) x n_draws
};

/// Draws theta from the grid weights, then x exactly from its Gaussian conditional.
PosteriorDraws sample_posterior(const FitResult& fit, const AssembledModel& am, int n_draws, std::uint64_t seed);

}  // namespace stgmrf
