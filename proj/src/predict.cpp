#include "stgmrf/predict.hpp"

#include "stgmrf/error.hpp"
#include "stgmrf/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

namespace stgmrf {

namespace {

using RowMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Fixed number of component chunks so that summation order does not depend on the thread count.
constexpr int kChunks = 16;

}  // namespace

PredictionRequest parse_prediction_grid(const std::string& text, const Dataset& train, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error("empty_file", "no header row", origin);
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const auto header = split_csv_line(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error("missing_covariate", "prediction grid lacks column '" + name + "'", origin);
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto c_lon = column("lon"), c_lat = column("lat"), c_year = column("year"), c_month = column("month");
  std::vector<std::size_t> c_cov;
  for (const auto& n : train.names) c_cov.push_back(column(n));

  PredictionRequest req;
  std::vector<std::vector<double>> z;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw Error("bad_row", "wrong number of fields", origin + ":" + std::to_string(line_no));
    const double lon = parse_number(cells[c_lon], "lon", line_no), lat = parse_number(cells[c_lat], "lat", line_no);
    const double year = parse_number(cells[c_year], "year", line_no);
    const double month = parse_number(cells[c_month], "month", line_no);
    if (month < 1 || month > 12 || month != std::floor(month) || year != std::floor(year))
      throw Error("invalid_time", "year/month must be integers with month in 1..12", origin + ":" + std::to_string(line_no));
    req.geo.push_back({lon, lat});
    req.times.push_back(12 * (static_cast<int>(year) - train.year0) + static_cast<int>(month));
    std::vector<double> row;
    for (std::size_t k = 0; k < c_cov.size(); ++k) {
      if (cells[c_cov[k]].empty())
        throw Error("missing_covariate", "missing value in covariate '" + train.names[k] + "'",
                    origin + ":" + std::to_string(line_no));
      row.push_back(parse_number(cells[c_cov[k]], train.names[k], line_no));
    }
    z.push_back(std::move(row));
  }
  req.points = project_coordinates(req.geo, train.reference);
  const auto n = static_cast<Eigen::Index>(z.size());
  const auto p = static_cast<Eigen::Index>(train.names.size());
  req.Z.resize(n, p + 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    req.Z(r, 0) = 1.0;
    for (Eigen::Index k = 0; k < p; ++k) {
      double v = z[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
      if (train.standardized) {
        const auto it = train.scaling.find(train.names[static_cast<std::size_t>(k)]);
        if (it != train.scaling.end()) v = (v - it->second.mean) / it->second.sd;
      }
      req.Z(r, k + 1) = v;
    }
  }
  return req;
}

PredictionRequest read_prediction_grid(const std::string& path, const Dataset& train) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("file_not_found", "cannot open prediction grid", path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_prediction_grid(ss.str(), train, path);
}

PredictionResult predict_surface(const ThetaGrid& grid, const AssembledModel& am, const PredictionRequest& req,
                                 const ColumnScaling& response) {
  if (grid.points.empty()) throw Error("empty_grid", "theta grid has no points");
  if (am.spec.kind != ModelKind::CovariateOnly)
    for (std::size_t i = 0; i < req.points.size(); ++i)
      if (am.mesh->mesh.locate(req.points[i]) < 0)
        throw Error("out_of_domain", "prediction point outside the mesh",
                    "lon=" + fmt17(req.geo[i].lon) + " lat=" + fmt17(req.geo[i].lat));
  const RowMat D = am.design_rows(req.points, req.times, req.Z);
  const Eigen::Index nr = D.rows(), dim = am.layout.dim;

  // distinct off-diagonal latent pairs needed by the rows
  std::unordered_map<std::uint64_t, int> pair_index;
  std::vector<std::pair<int, int>> pairs;
  std::vector<int> row_ptr(static_cast<std::size_t>(nr) + 1, 0), row_pairs;
  for (Eigen::Index i = 0; i < nr; ++i) {
    for (RowMat::InnerIterator a(D, i); a; ++a)
      for (RowMat::InnerIterator b(D, i); b && b.col() < a.col(); ++b) {
        const auto key = static_cast<std::uint64_t>(a.col()) * static_cast<std::uint64_t>(dim) +
                         static_cast<std::uint64_t>(b.col());
        auto [it, fresh] = pair_index.emplace(key, static_cast<int>(pairs.size()));
        if (fresh) pairs.emplace_back(static_cast<int>(a.col()), static_cast<int>(b.col()));
        row_pairs.push_back(it->second);
      }
    row_ptr[static_cast<std::size_t>(i) + 1] = static_cast<int>(row_pairs.size());
  }

  // mixture first and second moments of the latent entries
  struct Acc {
    Eigen::VectorXd m1, m2, p2;
  };
  const int K = static_cast<int>(grid.points.size());
  const int nchunks = std::min(kChunks, K);
  const int threads = std::max(1, am.spec.threads);
  std::vector<Acc> acc(static_cast<std::size_t>(nchunks));
  std::vector<std::unique_ptr<Workspace>> ws;
  for (int t = 0; t < std::min(threads, nchunks); ++t) ws.push_back(std::make_unique<Workspace>(am));
  parallel_for(nchunks, threads, [&](int c, int tid) {
    Acc& a = acc[static_cast<std::size_t>(c)];
    a.m1 = Eigen::VectorXd::Zero(dim);
    a.m2 = Eigen::VectorXd::Zero(dim);
    a.p2 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(pairs.size()));
    Workspace& w = *ws[static_cast<std::size_t>(tid)];
    for (int k = c * K / nchunks; k < (c + 1) * K / nchunks; ++k) {
      const auto& gp = grid.points[static_cast<std::size_t>(k)];
      w.update(gp.theta);
      const auto cov = w.qc().covariance(w.dense_columns());
      const Eigen::VectorXd& mu = w.mean();
      a.m1 += gp.weight * mu;
      a.m2 += gp.weight * (cov->diagonal() + mu.cwiseAbs2());
      for (std::size_t q = 0; q < pairs.size(); ++q) {
        const auto [i, j] = pairs[q];
        a.p2[static_cast<Eigen::Index>(q)] += gp.weight * ((*cov)(i, j) + mu[i] * mu[j]);
      }
    }
  });
  Acc tot = acc[0];
  for (std::size_t c = 1; c < acc.size(); ++c) {
    tot.m1 += acc[c].m1;
    tot.m2 += acc[c].m2;
    tot.p2 += acc[c].p2;
  }

  PredictionResult res;
  res.geo = req.geo;
  res.times = req.times;
  res.mean = D * tot.m1;
  res.sd.resize(nr);
  for (Eigen::Index i = 0; i < nr; ++i) {
    double e2 = 0.0;
    for (RowMat::InnerIterator a(D, i); a; ++a) e2 += a.value() * a.value() * tot.m2[a.col()];
    int q = row_ptr[static_cast<std::size_t>(i)];
    for (RowMat::InnerIterator a(D, i); a; ++a)
      for (RowMat::InnerIterator b(D, i); b && b.col() < a.col(); ++b)
        e2 += 2.0 * a.value() * b.value() * tot.p2[row_pairs[static_cast<std::size_t>(q++)]];
    res.sd[i] = std::sqrt(std::max(e2 - res.mean[i] * res.mean[i], 0.0));
  }
  res.mean_du = (res.mean.array() * response.sd + response.mean).matrix();
  res.sd_du = res.sd * response.sd;
  res.latent_mean = tot.m1;
  res.latent_sd = (tot.m2 - tot.m1.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  return res;
}

void write_predictions_csv(const PredictionResult& res, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_failed", "cannot write predictions", path);
  f << "lon,lat,t,mean_sd_units,sd_sd_units,mean_DU,sd_DU\n";
  std::string line;
  for (std::size_t i = 0; i < res.times.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    line = fmt17(res.geo[i].lon) + ',' + fmt17(res.geo[i].lat) + ',' + std::to_string(res.times[i]) + ',' +
           fmt17(res.mean[r]) + ',' + fmt17(res.sd[r]) + ',' + fmt17(res.mean_du[r]) + ',' + fmt17(res.sd_du[r]) + '\n';
    f << line;
  }
}

namespace {

LatentGroupSummary group_latent(const FitResult& fit, const AssembledModel& am, std::vector<std::string> labels,
                                const std::function<std::vector<int>(int)>& groups_of) {
  if (am.spec.kind != ModelKind::FullST)
    throw Error("requires_full_st", "latent time summaries need the space-time model");
  const int m = am.m, G = static_cast<int>(labels.size());
  LatentGroupSummary s;
  s.labels = std::move(labels);
  s.mean = Eigen::MatrixXd::Zero(G, m);
  s.sd = Eigen::MatrixXd::Zero(G, m);
  s.count.assign(static_cast<std::size_t>(G), 0);
  for (int t = 0; t < am.T; ++t) {
    const auto mean_t = fit.latent_mean.segment(am.layout.field_offset + t * m, m).transpose();
    const auto sd_t = fit.latent_sd.segment(am.layout.field_offset + t * m, m).transpose();
    for (int g : groups_of(am.t0 + t)) {
      s.mean.row(g) += mean_t;
      s.sd.row(g) += sd_t.cwiseAbs2();
      ++s.count[static_cast<std::size_t>(g)];
    }
  }
  for (int g = 0; g < G; ++g) {
    const int c = s.count[static_cast<std::size_t>(g)];
    if (c == 0) continue;
    s.mean.row(g) /= c;
    // root-mean-square of the per-time sds; cross-time posterior correlation is ignored
    s.sd.row(g) = (s.sd.row(g) / c).cwiseSqrt();
  }
  return s;
}

}  // namespace

LatentGroupSummary monthly_latent_summary(const FitResult& fit, const AssembledModel& am) {
  std::vector<std::string> labels;
  for (int c = 1; c <= 12; ++c) labels.push_back(std::to_string(c));
  return group_latent(fit, am, labels, [](int t) { return std::vector<int>{calendar_month(t) - 1}; });
}

SeasonGroups default_seasons() {
  return {{"DJF", {12, 1, 2}}, {"MAM", {3, 4, 5}}, {"JJA", {6, 7, 8}}, {"SON", {9, 10, 11}}};
}

LatentGroupSummary seasonal_latent_summary(const FitResult& fit, const AssembledModel& am, const SeasonGroups& seasons) {
  std::vector<std::string> labels;
  for (const auto& [name, months] : seasons) {
    if (months.empty()) throw Error("invalid_season", "season without months", name);
    for (int c : months)
      if (c < 1 || c > 12) throw Error("invalid_season", "season month outside 1..12", name);
    labels.push_back(name);
  }
  return group_latent(fit, am, labels, [&](int t) {
    std::vector<int> g;
    const int c = calendar_month(t);
    for (std::size_t k = 0; k < seasons.size(); ++k)
      if (std::find(seasons[k].second.begin(), seasons[k].second.end(), c) != seasons[k].second.end())
        g.push_back(static_cast<int>(k));
    return g;
  });
}

void write_latent_summary_csv(const LatentGroupSummary& s, const AssembledModel& am, const GeoPoint& reference,
                              const std::string& label_name, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_failed", "cannot write latent summary", path);
  f << "lon,lat," << label_name << ",mean,sd\n";
  for (Eigen::Index g = 0; g < s.mean.rows(); ++g) {
    if (s.count[static_cast<std::size_t>(g)] == 0) continue;
    for (int v = 0; v < am.m; ++v) {
      const GeoPoint gp = unproject(am.mesh->mesh.vertices[static_cast<std::size_t>(v)], reference);
      f << fmt17(gp.lon) << ',' << fmt17(gp.lat) << ',' << s.labels[static_cast<std::size_t>(g)] << ','
        << fmt17(s.mean(g, v)) << ',' << fmt17(s.sd(g, v)) << '\n';
    }
  }
}

PosteriorDraws sample_posterior(const FitResult& fit, const AssembledModel& am, int n_draws, std::uint64_t seed) {
  if (n_draws < 1) throw Error("invalid_parameter", "n_draws must be at least 1");
  const auto& pts = fit.theta_grid.points;
  if (pts.empty()) throw Error("empty_grid", "theta grid has no points");
  std::vector<double> w;
  for (const auto& gp : pts) w.push_back(gp.weight);
  std::mt19937_64 pick(stream_seed(seed, 0));
  std::discrete_distribution<int> D(w.begin(), w.end());
  PosteriorDraws out;
  out.x.resize(am.layout.dim, n_draws);
  std::map<int, std::vector<int>> by_comp;
  for (int d = 0; d < n_draws; ++d) {
    const int k = D(pick);
    out.component.push_back(k);
    by_comp[k].push_back(d);
  }
  // one normal stream per grid component
  Workspace ws(am);
  std::normal_distribution<double> N;
  for (const auto& [k, draws] : by_comp) {
    ws.update(pts[static_cast<std::size_t>(k)].theta);
    std::mt19937_64 rng(stream_seed(seed, 1000 + static_cast<std::uint64_t>(k)));
    Eigen::VectorXd z(am.layout.dim);
    for (int d : draws) {
      for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = N(rng);
      out.x.col(d) = ws.mean() + ws.qc().sample_from_normals(z);
    }
  }
  return out;
}

}  // namespace stgmrf
