#include "stgmrf/data_io.hpp"

#include "stgmrf/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace stgmrf {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double sample_sd(const std::vector<double>& v, double mean) {
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    auto b = s.find_first_not_of(" \t");
    auto e = s.find_last_not_of(" \t");
    s = (b == std::string::npos) ? std::string{} : s.substr(b, e - b + 1);
  }
  return out;
}

double parse_number(const std::string& cell, const std::string& column, std::size_t line_no) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc{} || ptr != last || !std::isfinite(v)) {
    throw Error("non_numeric_cell", "non-numeric value '" + cell + "' in column '" + column + "'",
                "line " + std::to_string(line_no));
  }
  return v;
}

std::string fmt17(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int Dataset::max_time() const { return time.empty() ? 0 : *std::max_element(time.begin(), time.end()); }
int Dataset::min_time() const { return time.empty() ? 0 : *std::min_element(time.begin(), time.end()); }

std::size_t Dataset::num_observed() const {
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) n += std::isnan(y[i]) ? 0 : 1;
  return n;
}

const ColumnScaling& Dataset::response_scaling() const {
  static const ColumnScaling identity{};
  auto it = scaling.find(response_name);
  return it == scaling.end() ? identity : it->second;
}

Dataset parse_dataset(const std::string& text, const DatasetSchema& schema, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error("empty_file", "no header row", origin);
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
  const auto header = split_csv_line(line);

  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error("missing_column", "required column '" + name + "' not found", origin);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_lon = column(schema.lon), c_lat = column(schema.lat);
  const std::size_t c_year = column(schema.year), c_month = column(schema.month);
  const std::size_t c_resp = column(schema.response);

  std::vector<std::string> cov_names = schema.covariates;
  if (cov_names.empty()) {
    for (const auto& h : header) {
      if (h != schema.lon && h != schema.lat && h != schema.year && h != schema.month && h != schema.response)
        cov_names.push_back(h);
    }
  }
  std::vector<std::size_t> c_cov;
  for (const auto& n : cov_names) c_cov.push_back(column(n));

  struct RawRow {
    double lon, lat;
    int year, month;
    double y;
    std::vector<double> z;
  };
  std::vector<RawRow> raw;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw Error("bad_row", "expected " + std::to_string(header.size()) + " fields, got " +
                                 std::to_string(cells.size()), origin + ":" + std::to_string(line_no));
    RawRow r;
    r.lon = parse_number(cells[c_lon], schema.lon, line_no);
    r.lat = parse_number(cells[c_lat], schema.lat, line_no);
    if (r.lon < -180.0 || r.lon > 180.0 || r.lat < -90.0 || r.lat > 90.0)
      throw Error("invalid_coordinate", "longitude/latitude out of range", "line " + std::to_string(line_no));
    const double year = parse_number(cells[c_year], schema.year, line_no);
    const double month = parse_number(cells[c_month], schema.month, line_no);
    if (year != std::floor(year) || month != std::floor(month) || month < 1 || month > 12)
      throw Error("invalid_time", "year/month must be integers with month in 1..12", "line " + std::to_string(line_no));
    r.year = static_cast<int>(year);
    r.month = static_cast<int>(month);
    r.y = cells[c_resp].empty() ? kNaN : parse_number(cells[c_resp], schema.response, line_no);
    for (std::size_t k = 0; k < c_cov.size(); ++k) {
      if (cells[c_cov[k]].empty())
        throw Error("missing_covariate", "missing value in covariate '" + cov_names[k] + "'",
                    "line " + std::to_string(line_no));
      r.z.push_back(parse_number(cells[c_cov[k]], cov_names[k], line_no));
    }
    raw.push_back(std::move(r));
  }
  if (raw.empty()) throw Error("empty_file", "no data rows", origin);

  Dataset ds;
  ds.response_name = schema.response;
  ds.names = cov_names;
  ds.year0 = std::min_element(raw.begin(), raw.end(), [](auto& a, auto& b) { return a.year < b.year; })->year;

  std::map<std::pair<double, double>, int> site_index;
  std::vector<int> row_site(raw.size()), row_time(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto key = std::make_pair(raw[i].lon, raw[i].lat);
    auto it = site_index.find(key);
    if (it == site_index.end()) {
      it = site_index.emplace(key, static_cast<int>(ds.sites_geo.size())).first;
      ds.sites_geo.push_back({raw[i].lon, raw[i].lat});
    }
    row_site[i] = it->second;
    row_time[i] = 12 * (raw[i].year - ds.year0) + raw[i].month;
  }

  std::vector<std::size_t> order(raw.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(row_site[a], row_time[a]) < std::tie(row_site[b], row_time[b]);
  });
  const auto p = static_cast<Eigen::Index>(cov_names.size());
  ds.y.resize(static_cast<Eigen::Index>(raw.size()));
  ds.Z.resize(static_cast<Eigen::Index>(raw.size()), p + 1);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t i = order[r];
    if (r > 0 && row_site[i] == row_site[order[r - 1]] && row_time[i] == row_time[order[r - 1]]) {
      const auto& g = ds.sites_geo[static_cast<std::size_t>(row_site[i])];
      throw Error("duplicate_key", "duplicate site-time row",
                  "lon=" + fmt17(g.lon) + " lat=" + fmt17(g.lat) + " year=" + std::to_string(raw[i].year) +
                      " month=" + std::to_string(raw[i].month));
    }
    ds.site.push_back(row_site[i]);
    ds.time.push_back(row_time[i]);
    const auto ri = static_cast<Eigen::Index>(r);
    ds.y[ri] = raw[i].y;
    ds.Z(ri, 0) = 1.0;
    for (Eigen::Index k = 0; k < p; ++k) ds.Z(ri, k + 1) = raw[i].z[static_cast<std::size_t>(k)];
  }
  project_dataset(ds);
  return ds;
}

Dataset load_dataset(const std::string& path, const DatasetSchema& schema) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("file_not_found", "cannot open data file", path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_dataset(ss.str(), schema, path);
}

std::string dataset_to_csv(const Dataset& ds) {
  std::ostringstream out;
  out << "lon,lat,year,month," << ds.response_name;
  for (const auto& n : ds.names) out << ',' << n;
  out << '\n';
  auto value = [&](const std::string& name, double v) {
    if (!ds.standardized) return v;
    auto it = ds.scaling.find(name);
    return it == ds.scaling.end() ? v : back_transform(v, it->second);
  };
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    const auto& g = ds.sites_geo[static_cast<std::size_t>(ds.site[r])];
    const int t = ds.time[r];
    const int year = ds.year0 + (t - 1) / 12;
    const int month = (t - 1) % 12 + 1;
    out << fmt17(g.lon) << ',' << fmt17(g.lat) << ',' << year << ',' << month << ','
        << fmt17(std::isnan(ds.y[ri]) ? kNaN : value(ds.response_name, ds.y[ri]));
    for (std::size_t k = 0; k < ds.names.size(); ++k)
      out << ',' << fmt17(value(ds.names[k], ds.Z(ri, static_cast<Eigen::Index>(k) + 1)));
    out << '\n';
  }
  return out.str();
}

void write_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_failed", "cannot write dataset", path);
  f << dataset_to_csv(ds);
}

GeoPoint centroid(const std::vector<GeoPoint>& points) {
  GeoPoint c;
  for (const auto& p : points) {
    c.lon += p.lon;
    c.lat += p.lat;
  }
  if (!points.empty()) {
    c.lon /= static_cast<double>(points.size());
    c.lat /= static_cast<double>(points.size());
  }
  return c;
}

std::vector<SpatialPoint> project_coordinates(const std::vector<GeoPoint>& points, const GeoPoint& ref) {
  if (!points.empty()) {
    const GeoPoint c = centroid(points);
    if (std::abs(c.lon - ref.lon) > 1.0 || std::abs(c.lat - ref.lat) > 1.0)
      std::cerr << "warning: projection reference is more than 1 degree from the centroid\n";
  }
  const double coslat = std::cos(ref.lat * std::numbers::pi / 180.0);
  std::vector<SpatialPoint> out;
  out.reserve(points.size());
  for (const auto& p : points)
    out.push_back({kKmPerDegree * coslat * (p.lon - ref.lon), kKmPerDegree * (p.lat - ref.lat)});
  return out;
}

GeoPoint unproject(const SpatialPoint& p, const GeoPoint& ref) {
  const double coslat = std::cos(ref.lat * std::numbers::pi / 180.0);
  return {ref.lon + p.x / (kKmPerDegree * coslat), ref.lat + p.y / kKmPerDegree};
}

void project_dataset(Dataset& ds) { project_dataset(ds, centroid(ds.sites_geo)); }

void project_dataset(Dataset& ds, const GeoPoint& ref) {
  ds.reference = ref;
  ds.points = project_coordinates(ds.sites_geo, ref);
}

std::map<std::string, ColumnScaling> compute_scaling(const Dataset& ds) {
  std::map<std::string, ColumnScaling> out;
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < ds.y.size(); ++i)
    if (!std::isnan(ds.y[i])) rows.push_back(i);
  if (rows.size() < 2) throw Error("zero_variance", "need at least two observed rows to standardize");

  auto stats = [&](const std::string& name, auto get) {
    std::vector<double> v;
    v.reserve(rows.size());
    for (auto i : rows) v.push_back(get(i));
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    const double sd = sample_sd(v, mean);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean))))
      throw Error("zero_variance", "column '" + name + "' has zero variance", name);
    out[name] = {mean, sd};
  };
  stats(ds.response_name, [&](Eigen::Index i) { return ds.y[i]; });
  for (std::size_t k = 0; k < ds.names.size(); ++k)
    stats(ds.names[k], [&](Eigen::Index i) { return ds.Z(i, static_cast<Eigen::Index>(k) + 1); });
  return out;
}

Dataset standardize(const Dataset& ds) { return standardize(ds, compute_scaling(ds)); }

Dataset standardize(const Dataset& ds, const std::map<std::string, ColumnScaling>& scaling) {
  if (ds.standardized) throw Error("already_standardized", "dataset is already standardized");
  auto lookup = [&](const std::string& name) {
    auto it = scaling.find(name);
    if (it == scaling.end()) throw Error("missing_scaling", "no scaling for column '" + name + "'", name);
    return it->second;
  };
  Dataset out = ds;
  const auto rs = lookup(ds.response_name);
  for (Eigen::Index i = 0; i < out.y.size(); ++i)
    if (!std::isnan(out.y[i])) out.y[i] = (out.y[i] - rs.mean) / rs.sd;
  for (std::size_t k = 0; k < ds.names.size(); ++k) {
    const auto s = lookup(ds.names[k]);
    auto col = out.Z.col(static_cast<Eigen::Index>(k) + 1);
    col = (col.array() - s.mean) / s.sd;
  }
  out.scaling = scaling;
  out.standardized = true;
  return out;
}

double back_transform(double standardized, const ColumnScaling& s) { return standardized * s.sd + s.mean; }

CollinearityReport collinearity_report(const Dataset& ds) {
  const Eigen::Index p = ds.Z.cols() - 1;
  if (p < 2) throw Error("too_few_covariates", "collinearity report needs at least two covariates");
  CollinearityReport rep;
  rep.names = ds.names;
  const Eigen::MatrixXd X = ds.Z.rightCols(p);
  const Eigen::Index n = X.rows();
  const Eigen::MatrixXd centered = X.rowwise() - X.colwise().mean();
  const Eigen::VectorXd norms = centered.colwise().norm();
  rep.corr.resize(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j)
      rep.corr(i, j) = (i == j) ? 1.0 : centered.col(i).dot(centered.col(j)) / (norms[i] * norms[j]);

  rep.vif.resize(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    Eigen::MatrixXd others(n, p);
    others.col(0).setOnes();
    for (Eigen::Index k = 0, c = 1; k < p; ++k)
      if (k != j) others.col(c++) = X.col(k);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(others);
    const Eigen::VectorXd coef = qr.solve(X.col(j));
    const double rss = (X.col(j) - others * coef).squaredNorm();
    const double tss = centered.col(j).squaredNorm();
    const double frac = rss / tss;
    rep.vif[j] = frac < 1e-12 ? std::numeric_limits<double>::infinity() : 1.0 / frac;
  }
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = i + 1; j < p; ++j)
      if (std::abs(rep.corr(i, j)) >= kCorrelationThreshold)
        rep.flags.push_back({"correlation", static_cast<int>(i), static_cast<int>(j), rep.corr(i, j)});
  for (Eigen::Index j = 0; j < p; ++j)
    if (rep.vif[j] >= kVifThreshold) rep.flags.push_back({"vif", static_cast<int>(j), -1, rep.vif[j]});
  return rep;
}

Dataset select_times(const Dataset& ds, int lo, int hi) {
  Dataset out = ds;
  std::vector<Eigen::Index> keep;
  for (std::size_t r = 0; r < ds.rows(); ++r)
    if (ds.time[r] >= lo && ds.time[r] <= hi) keep.push_back(static_cast<Eigen::Index>(r));
  out.site.clear();
  out.time.clear();
  out.y.resize(static_cast<Eigen::Index>(keep.size()));
  out.Z.resize(static_cast<Eigen::Index>(keep.size()), ds.Z.cols());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const auto r = keep[k];
    out.site.push_back(ds.site[static_cast<std::size_t>(r)]);
    out.time.push_back(ds.time[static_cast<std::size_t>(r)]);
    out.y[static_cast<Eigen::Index>(k)] = ds.y[r];
    out.Z.row(static_cast<Eigen::Index>(k)) = ds.Z.row(r);
  }
  return out;
}

std::pair<Dataset, Dataset> split_train_validation(const Dataset& ds, int cutoff) {
  const int T = ds.max_time();
  if (cutoff < 1 || cutoff >= T)
    throw Error("cutoff_out_of_range", "cutoff must satisfy 1 <= cutoff < T", "cutoff=" + std::to_string(cutoff) +
                                                                                   " T=" + std::to_string(T));
  Dataset train_raw = select_times(ds, ds.min_time(), cutoff);
  Dataset valid_raw = select_times(ds, cutoff + 1, T);
  const auto scaling = compute_scaling(train_raw);
  return {standardize(train_raw, scaling), standardize(valid_raw, scaling)};
}

std::string scaling_json(const Dataset& ds) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, s] : ds.scaling) j[name] = {{"mean", s.mean}, {"sd", s.sd}};
  return j.dump(2);
}

}  // namespace stgmrf
