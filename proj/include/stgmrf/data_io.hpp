#pragma once

#include <Eigen/Dense>

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace stgmrf {

/// Kilometres per degree of latitude used by the equirectangular projection.
inline constexpr double kKmPerDegree = 111.32;

struct GeoPoint {
  double lon = 0.0;  // degrees east
  double lat = 0.0;  // degrees north
};

/// Planar coordinates in km relative to a reference point.
struct SpatialPoint {
  double x = 0.0;
  double y = 0.0;
};

struct ColumnScaling {
  double mean = 0.0;
  double sd = 1.0;
};

/// Column names used to read an observation table.
struct DatasetSchema {
  std::string lon = "lon";
  std::string lat = "lat";
  std::string year = "year";
  std::string month = "month";
  std::string response = "tco";
  /// Empty means "every remaining column".
  std::vector<std::string> covariates;
};

/// Gridded monthly observations. Rows are sorted by (site, time).
struct Dataset {
  std::vector<GeoPoint> sites_geo;
  std::vector<SpatialPoint> points;  // one per site, filled by project_coordinates
  GeoPoint reference;
  int year0 = 0;  // time index t = 12 * (year - year0) + month

  std::vector<int> site;  // per row
  std::vector<int> time;  // per row, 1-based month index
  Eigen::VectorXd y;      // per row, NaN when missing
  Eigen::MatrixXd Z;      // rows x (p + 1); column 0 is the intercept

  std::string response_name;
  std::vector<std::string> names;  // covariate labels (without the intercept)

  /// Per-column scaling; key is the response name or a covariate name.
  std::map<std::string, ColumnScaling> scaling;
  bool standardized = false;

  std::size_t rows() const { return time.size(); }
  std::size_t num_sites() const { return sites_geo.size(); }
  int num_covariates() const { return static_cast<int>(names.size()); }
  int max_time() const;
  int min_time() const;
  std::size_t num_observed() const;
  const ColumnScaling& response_scaling() const;
};

struct CollinearityReport {
  std::vector<std::string> names;
  Eigen::MatrixXd corr;
  Eigen::VectorXd vif;  // +inf for exact linear dependence
  struct Flag {
    std::string kind;  // "correlation" or "vif"
    int i = 0;
    int j = -1;
    double value = 0.0;
  };
  std::vector<Flag> flags;
};

inline constexpr double kCorrelationThreshold = 0.75;
inline constexpr double kVifThreshold = 5.0;

Dataset load_dataset(const std::string& path, const DatasetSchema& schema);
/// Parses CSV text directly; `origin` is echoed in error contexts.
Dataset parse_dataset(const std::string& text, const DatasetSchema& schema,
                      const std::string& origin = "<memory>");

/// Writes the table in the ingestion schema with 17 significant digits.
/// Values are back-transformed first when the dataset is standardized.
void write_dataset_csv(const Dataset& ds, const std::string& path);
std::string dataset_to_csv(const Dataset& ds);

GeoPoint centroid(const std::vector<GeoPoint>& points);
std::vector<SpatialPoint> project_coordinates(const std::vector<GeoPoint>& points, const GeoPoint& ref);
GeoPoint unproject(const SpatialPoint& p, const GeoPoint& ref);
/// Fills ds.points using ds.reference (centroid when `ref` is not given).
void project_dataset(Dataset& ds);
void project_dataset(Dataset& ds, const GeoPoint& ref);

/// Standardizes the response and non-intercept covariates with the dataset's own statistics.
Dataset standardize(const Dataset& ds);
/// Standardizes with externally supplied statistics (e.g. from a training subset).
Dataset standardize(const Dataset& ds, const std::map<std::string, ColumnScaling>& scaling);
std::map<std::string, ColumnScaling> compute_scaling(const Dataset& ds);

double back_transform(double standardized, const ColumnScaling& s);

CollinearityReport collinearity_report(const Dataset& ds);

/// Returns (train, validation), both standardized with training statistics.
std::pair<Dataset, Dataset> split_train_validation(const Dataset& ds, int cutoff);

/// Restricts a dataset to rows satisfying lo <= t <= hi (no rescaling).
Dataset select_times(const Dataset& ds, int lo, int hi);

std::string scaling_json(const Dataset& ds);

// CSV helpers shared by the readers and writers.
std::vector<std::string> split_csv_line(const std::string& line);
/// Strict numeric parse; throws non_numeric_cell naming the column and line.
double parse_number(const std::string& cell, const std::string& column, std::size_t line_no);
/// 17 significant digits; empty for NaN.
std::string fmt17(double v);

}  // namespace stgmrf
