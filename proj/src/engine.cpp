#include "stgmrf/engine.hpp"

#include "stgmrf/error.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <thread>
#include <tuple>

namespace stgmrf {
namespace {

using Trip = Eigen::Triplet<double>;
using RowMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
constexpr double kLog2Pi = 1.8378770664093454836;

// log(1 - phi^2) for phi = tanh(theta / 2), stable for large |theta|
double log_one_minus_phi2(double theta) {
  const double a = std::abs(theta);
  return -(a + 2.0 * std::log1p(std::exp(-a)) - 2.0 * std::numbers::ln2);
}

SpMat embed(const SpMat& block, int offset, int dim) {
  std::vector<Trip> trip;
  trip.reserve(static_cast<std::size_t>(block.nonZeros()));
  for (Eigen::Index j = 0; j < block.outerSize(); ++j)
    for (SpMat::InnerIterator it(block, j); it; ++it)
      trip.emplace_back(static_cast<int>(it.row()) + offset, static_cast<int>(it.col()) + offset, it.value());
  SpMat out(dim, dim);
  out.setFromTriplets(trip.begin(), trip.end());
  out.makeCompressed();
  return out;
}

SpMat with_values(const SpMat& pattern, const Eigen::VectorXd& v) {
  SpMat out = pattern;
  std::copy(v.data(), v.data() + v.size(), out.valuePtr());
  return out;
}

SpMat structure_of(SpMat m) {
  for (Eigen::Index k = 0; k < m.nonZeros(); ++k) m.valuePtr()[k] = 1.0;
  return m;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "covariate_only" || s == "model1" || s == "1") return ModelKind::CovariateOnly;
  if (s == "additive" || s == "model2" || s == "2") return ModelKind::Additive;
  if (s == "full_st" || s == "model3" || s == "3") return ModelKind::FullST;
  throw Error("invalid_config", "unknown model kind '" + s + "'", s);
}

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::CovariateOnly: return "covariate_only";
    case ModelKind::Additive: return "additive";
    case ModelKind::FullST: return "full_st";
  }
  return "?";
}

int ModelSpec::theta_dim() const {
  switch (kind) {
    case ModelKind::CovariateOnly: return 1;
    case ModelKind::Additive: return additive_temporal ? 5 : 3;
    case ModelKind::FullST: return 4;
  }
  return 0;
}

MeshArtifacts mesh_artifacts_from(TriangleMesh mesh) {
  MeshArtifacts a;
  a.mesh = std::move(mesh);
  a.fem = fem_matrices(a.mesh);
  a.ops = SpdeOperators::from_fem(a.fem);
  return a;
}

MeshArtifacts build_mesh_artifacts(const Dataset& ds, const MeshConfig& cfg) {
  return mesh_artifacts_from(build_mesh(ds.points, cfg));
}

// ---------------------------------------------------------------------------
// Assembly

AssembledModel assemble(const ModelSpec& spec, const Dataset& ds, const MeshArtifacts* mesh) {
  spec.prior.validate();
  spec.spde.validate();
  AssembledModel am;
  am.spec = spec;
  am.p = ds.num_covariates();
  const int p1 = am.p + 1;
  if (ds.Z.cols() != p1) throw Error("dimension_mismatch", "design matrix must hold the intercept and covariates");
  am.beta_names.push_back("intercept");
  for (const auto& nm : ds.names) am.beta_names.push_back(nm);

  const bool spatial = spec.kind != ModelKind::CovariateOnly;
  if (spatial && mesh == nullptr) throw Error("missing_mesh", "spatial models need a mesh");
  am.mesh = spatial ? mesh : nullptr;
  am.m = spatial ? mesh->mesh.num_vertices() : 0;

  const int tf = spec.t_first > 0 ? spec.t_first : (ds.rows() ? ds.min_time() : 1);
  const int tl = spec.t_last > 0 ? spec.t_last : (ds.rows() ? ds.max_time() : tf);
  if (tl < tf) throw Error("invalid_time_range", "latent time range is empty");
  am.t0 = tf;
  am.T = (spec.kind == ModelKind::CovariateOnly) ? 1 : tl - tf + 1;

  auto& L = am.layout;
  switch (spec.kind) {
    case ModelKind::CovariateOnly:
      am.theta_names = {"log_tau_eps"};
      break;
    case ModelKind::Additive:
      L.field_size = am.m;
      L.f_offset = am.m;
      L.f_size = spec.additive_temporal ? am.T : 0;
      am.theta_names = {"log_tau_eps", "log_range", "log_sigma_omega"};
      if (spec.additive_temporal) {
        am.theta_names.push_back("log_sigma_f");
        am.theta_names.push_back("logit_phi_f");
      }
      break;
    case ModelKind::FullST:
      L.field_size = am.m * am.T;
      L.f_offset = L.field_size;
      am.theta_names = {"log_tau_eps", "log_range", "log_sigma_omega", "logit_phi"};
      break;
  }
  L.beta_offset = L.field_size + L.f_size;
  L.p1 = p1;
  L.dim = L.beta_offset + p1;

  // observation rows
  std::vector<int> rows;
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    if (!std::isfinite(ds.y[static_cast<Eigen::Index>(r)])) continue;
    const int t = ds.time[r];
    if (spatial && (t < tf || t > tl))
      throw Error("time_out_of_range", "observation time outside the latent time range", std::to_string(t));
    rows.push_back(static_cast<int>(r));
  }
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    if (std::isfinite(ds.y[static_cast<Eigen::Index>(r)])) continue;
    const int t = ds.time[r];
    if (spatial && (t < tf || t > tl))
      throw Error("time_out_of_range", "prediction time outside the latent time range", std::to_string(t));
    am.miss_row.push_back(static_cast<int>(r));
  }
  am.n = static_cast<int>(rows.size());
  am.y.resize(am.n);
  Eigen::MatrixXd Zobs(am.n, p1);
  for (int i = 0; i < am.n; ++i) {
    const int r = rows[static_cast<std::size_t>(i)];
    am.y[i] = ds.y[r];
    Zobs.row(i) = ds.Z.row(r);
    am.obs_row.push_back(r);
    am.obs_site.push_back(ds.site[static_cast<std::size_t>(r)]);
    am.obs_time.push_back(spatial ? ds.time[static_cast<std::size_t>(r)] - tf : 0);
  }
  if (am.n > 0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Zobs);
    if (qr.rank() < p1) throw Error("rank_deficient_design", "covariate matrix (with intercept) is rank deficient");
  }

  SpMat A;
  if (spatial) A = make_projector(mesh->mesh, ds.points);  // one row per site
  const RowMat Ar = A;
  std::vector<Trip> bt;
  for (int i = 0; i < am.n; ++i) {
    const int s = am.obs_site[static_cast<std::size_t>(i)], t = am.obs_time[static_cast<std::size_t>(i)];
    if (spatial) {
      const int off = spec.kind == ModelKind::FullST ? L.field_offset + t * am.m : L.field_offset;
      for (RowMat::InnerIterator it(Ar, s); it; ++it) bt.emplace_back(i, off + static_cast<int>(it.col()), it.value());
      if (L.f_size > 0) bt.emplace_back(i, L.f_offset + t, 1.0);
    }
    for (int j = 0; j < p1; ++j) bt.emplace_back(i, L.beta_offset + j, Zobs(i, j));
  }
  am.B.resize(am.n, L.dim);
  am.B.setFromTriplets(bt.begin(), bt.end());
  am.B.makeCompressed();
  if (!am.miss_row.empty()) {
    std::vector<SpatialPoint> pts;
    std::vector<int> times;
    Eigen::MatrixXd Zm(static_cast<Eigen::Index>(am.miss_row.size()), p1);
    for (std::size_t i = 0; i < am.miss_row.size(); ++i) {
      const auto r = static_cast<std::size_t>(am.miss_row[i]);
      pts.push_back(ds.points[static_cast<std::size_t>(ds.site[r])]);
      times.push_back(spatial ? ds.time[r] : am.t0);
      Zm.row(static_cast<Eigen::Index>(i)) = ds.Z.row(static_cast<Eigen::Index>(r));
    }
    am.B_miss = am.design_rows(pts, times, Zm);
  }

  // affine precision terms
  std::vector<SpMat> terms;
  if (spatial) {
    const auto& ops = mesh->ops;
    const SpMat Sc = with_values(ops.pattern, ops.c_values);
    const SpMat Sg = with_values(ops.pattern, ops.g_values);
    const SpMat Sk = with_values(ops.pattern, ops.k_values);
    am.spatial_pattern_ = ops.pattern;
    if (spec.kind == ModelKind::FullST) {
      const auto blk = Ar1Blocks::make(am.T);
      for (const SpMat* a : {&blk.base, &blk.quad, &blk.off})
        for (const SpMat* b : {&Sc, &Sg, &Sk}) terms.push_back(embed(kronecker(*a, *b), L.field_offset, L.dim));
    } else {
      for (const SpMat* b : {&Sc, &Sg, &Sk}) terms.push_back(embed(*b, L.field_offset, L.dim));
      if (L.f_size > 0) {
        const auto blk = Ar1Blocks::make(am.T);
        for (const SpMat* a : {&blk.base, &blk.quad, &blk.off}) terms.push_back(embed(*a, L.f_offset, L.dim));
      }
    }
  }
  {
    std::vector<Trip> bd;
    for (int j = 0; j < p1; ++j) bd.emplace_back(L.beta_offset + j, L.beta_offset + j, 1.0);
    SpMat beta_block(L.dim, L.dim);
    beta_block.setFromTriplets(bd.begin(), bd.end());
    terms.push_back(beta_block);
  }
  const SpMat btb = SpMat(am.B.transpose()) * am.B;
  SpMat pat = structure_of(btb);
  for (const auto& t : terms) pat = pat + structure_of(t);
  pat = structure_of(pat);
  pat.makeCompressed();
  am.pattern_ = pat;
  for (const auto& t : terms) am.terms_.push_back(align_to_pattern(pat, t));
  am.btb_ = align_to_pattern(pat, btb);
  am.bty_ = am.B.transpose() * am.y;
  am.yty_ = am.y.squaredNorm();
  return am;
}

HyperValues AssembledModel::natural(const Eigen::VectorXd& theta) const {
  if (theta.size() != theta_dim()) throw Error("dimension_mismatch", "theta has the wrong length");
  HyperValues h;
  h.tau_eps = std::exp(theta[0]);
  if (spec.kind == ModelKind::CovariateOnly) return h;
  h.range = std::exp(theta[1]);
  h.sigma_omega = std::exp(theta[2]);
  if (spec.kind == ModelKind::FullST) {
    h.phi = phi_from_internal(theta[3]);
  } else if (layout.f_size > 0) {
    h.sigma_f = std::exp(theta[3]);
    h.phi_f = phi_from_internal(theta[4]);
  }
  return h;
}

Eigen::VectorXd AssembledModel::internal(const HyperValues& h) const {
  Eigen::VectorXd th(theta_dim());
  th[0] = std::log(h.tau_eps);
  if (spec.kind == ModelKind::CovariateOnly) return th;
  th[1] = std::log(h.range);
  th[2] = std::log(h.sigma_omega);
  if (spec.kind == ModelKind::FullST) {
    th[3] = internal_from_phi(h.phi);
  } else if (layout.f_size > 0) {
    th[3] = std::log(h.sigma_f);
    th[4] = internal_from_phi(h.phi_f);
  }
  return th;
}

Eigen::VectorXd AssembledModel::initial_theta() const {
  double var = 1.0;
  if (n > 1) {
    const double mu = y.mean();
    var = std::max((y.array() - mu).square().sum() / (n - 1), 1e-6);
  }
  HyperValues h;
  h.tau_eps = mesh != nullptr ? 2.0 / var : 1.0 / var;
  if (mesh != nullptr) {
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& v : mesh->mesh.vertices) {
      xmin = std::min(xmin, v.x), xmax = std::max(xmax, v.x);
      ymin = std::min(ymin, v.y), ymax = std::max(ymax, v.y);
    }
    const double diam = std::hypot(xmax - xmin, ymax - ymin);
    h.range = std::max(diam / 4.0, 1e-6);
    h.sigma_omega = std::sqrt(0.5 * var);
    h.phi = 0.5;
    h.sigma_f = std::sqrt(0.1 * var);
    h.phi_f = 0.5;
  }
  return internal(h);
}

std::vector<double> AssembledModel::term_coefs(const Eigen::VectorXd& theta) const {
  std::vector<double> c;
  c.reserve(terms_.size());
  const HyperValues h = natural(theta);
  if (spec.kind != ModelKind::CovariateOnly) {
    const MaternParams mp = convert_params(h.range, h.sigma_omega);
    const double k2 = mp.kappa * mp.kappa, t2 = mp.tau * mp.tau;
    const double sb[3] = {t2 * k2 * k2, 2.0 * t2 * k2, t2};
    if (spec.kind == ModelKind::FullST) {
      const double ta[3] = {1.0, h.phi * h.phi, -h.phi};
      for (double a : ta)
        for (double b : sb) c.push_back(a * b);
    } else {
      for (double b : sb) c.push_back(b);
      if (layout.f_size > 0) {
        const double s = 1.0 / (h.sigma_f * h.sigma_f);
        c.push_back(s);
        c.push_back(s * h.phi_f * h.phi_f);
        c.push_back(-s * h.phi_f);
      }
    }
  }
  c.push_back(spec.prior.beta_prec);
  return c;
}

void AssembledModel::prior_values(const Eigen::VectorXd& theta, Eigen::VectorXd& out) const {
  const auto c = term_coefs(theta);
  out.setZero(pattern_.nonZeros());
  for (std::size_t k = 0; k < c.size(); ++k) out.noalias() += c[k] * terms_[k];
}

void AssembledModel::posterior_values(const Eigen::VectorXd& theta, Eigen::VectorXd& out) const {
  prior_values(theta, out);
  out.noalias() += std::exp(theta[0]) * btb_;
}

SpMat AssembledModel::prior_precision(const Eigen::VectorXd& theta) const {
  Eigen::VectorXd v;
  prior_values(theta, v);
  return with_values(pattern_, v);
}

SpMat AssembledModel::posterior_precision(const Eigen::VectorXd& theta) const {
  Eigen::VectorXd v;
  posterior_values(theta, v);
  return with_values(pattern_, v);
}

double AssembledModel::log_prior(const Eigen::VectorXd& theta) const {
  if (theta.size() != theta_dim()) throw Error("dimension_mismatch", "theta has the wrong length");
  const auto& pc = spec.prior;
  double lp = log_prior_noise(theta[0], pc);
  if (spec.kind == ModelKind::CovariateOnly) return lp;
  lp += log_prior_spatial(theta[1], theta[2], pc);
  if (spec.kind == ModelKind::FullST) return lp + log_prior_ar1(theta[3], pc);
  if (layout.f_size > 0) lp += log_prior_sd(theta[3], pc) + log_prior_ar1(theta[4], pc);
  return lp;
}

SpMat AssembledModel::design_rows(const std::vector<SpatialPoint>& pts, const std::vector<int>& times,
                                  const Eigen::MatrixXd& Z) const {
  const auto nr = pts.size();
  if (times.size() != nr || static_cast<std::size_t>(Z.rows()) != nr || Z.cols() != layout.p1)
    throw Error("dimension_mismatch", "design rows need one time and one covariate row per point");
  const bool spatial = spec.kind != ModelKind::CovariateOnly;
  RowMat A;
  if (spatial) A = make_projector(mesh->mesh, pts);
  std::vector<Trip> trip;
  trip.reserve(nr * static_cast<std::size_t>(3 + layout.p1));
  for (std::size_t r = 0; r < nr; ++r) {
    const int i = static_cast<int>(r);
    if (spatial) {
      const int t = times[r] - t0;
      if (t < 0 || t >= T)
        throw Error("time_out_of_range", "prediction time outside the latent time range", std::to_string(times[r]));
      const int off = spec.kind == ModelKind::FullST ? layout.field_offset + t * m : layout.field_offset;
      for (RowMat::InnerIterator it(A, i); it; ++it) trip.emplace_back(i, off + static_cast<int>(it.col()), it.value());
      if (layout.f_size > 0) trip.emplace_back(i, layout.f_offset + t, 1.0);
    }
    for (int j = 0; j < layout.p1; ++j) trip.emplace_back(i, layout.beta_offset + j, Z(i, j));
  }
  SpMat D(static_cast<Eigen::Index>(nr), layout.dim);
  D.setFromTriplets(trip.begin(), trip.end());
  D.makeCompressed();
  return D;
}

// ---------------------------------------------------------------------------
// Conditional posterior and marginal posterior of theta

Workspace::Workspace(const AssembledModel& am) : am_(&am) {
  const auto& L = am.layout;
  if (am.spec.kind == ModelKind::FullST)
    qc_ = make_block_solver(am.pattern(), am.m, am.T, L.p1);
  else
    qc_ = make_sparse_solver(am.pattern());
  if (am.spatial_pattern_.rows() > 0) qs_.emplace(am.spatial_pattern_);
  for (int j = 0; j < L.f_size; ++j) dense_cols_.push_back(L.f_offset + j);
  for (int j = 0; j < L.p1; ++j) dense_cols_.push_back(L.beta_offset + j);
}

void Workspace::update(const Eigen::VectorXd& theta) {
  am_->posterior_values(theta, values_);
  qc_->set_values(values_.data());
  qc_->factorize();
  tau_ = std::exp(theta[0]);
  mean_ = qc_->solve(Eigen::VectorXd(tau_ * am_->bty()));
}

double Workspace::log_prior_det(const Eigen::VectorXd& theta) {
  const auto& am = *am_;
  double ld = am.layout.p1 * std::log(am.spec.prior.beta_prec);
  if (am.spec.kind == ModelKind::CovariateOnly) return ld;
  const HyperValues h = am.natural(theta);
  const MaternParams mp = convert_params(h.range, h.sigma_omega);
  const Eigen::VectorXd qv = am.mesh->ops.precision_values(mp);
  qs_->set_values(qv.data());
  qs_->factorize();
  const double ld_s = qs_->log_det();
  if (am.spec.kind == ModelKind::FullST) return ld + am.m * log_one_minus_phi2(theta[3]) + am.T * ld_s;
  ld += ld_s;
  if (am.layout.f_size > 0) ld += log_one_minus_phi2(theta[4]) - 2.0 * am.T * theta[3];
  return ld;
}

double log_marginal_likelihood(Workspace& ws, const Eigen::VectorXd& theta) {
  const auto& am = ws.model();
  ws.update(theta);
  const double ld_x = ws.log_prior_det(theta);
  const double ld_c = ws.qc().log_det();
  const double tau = ws.tau_eps();
  const double quad = tau * am.yty() - tau * ws.mean().dot(am.bty());
  return 0.5 * ld_x - 0.5 * ld_c + 0.5 * am.n * theta[0] - 0.5 * quad - 0.5 * am.n * kLog2Pi;
}

double log_marginal_posterior(Workspace& ws, const Eigen::VectorXd& theta) {
  return log_marginal_likelihood(ws, theta) + ws.model().log_prior(theta);
}

double log_marginal_likelihood(const AssembledModel& am, const Eigen::VectorXd& theta) {
  Workspace ws(am);
  return log_marginal_likelihood(ws, theta);
}

double log_marginal_posterior(const AssembledModel& am, const Eigen::VectorXd& theta) {
  Workspace ws(am);
  return log_marginal_posterior(ws, theta);
}

GaussianPosterior conditional_posterior(const AssembledModel& am, const Eigen::VectorXd& theta) {
  if (!theta.allFinite()) throw Error("invalid_parameter", "theta must be finite");
  GaussianPosterior g{Eigen::VectorXd(), SparseSpd(am.posterior_precision(theta)), 0.0};
  g.precision.factorize();
  g.mean = g.precision.solve(Eigen::VectorXd(std::exp(theta[0]) * am.bty()));
  g.logdet = g.precision.log_det();
  return g;
}

// ---------------------------------------------------------------------------
// Optimization

NelderMeadResult nelder_mead_max(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x0,
                                 double step, double f_tol, double x_tol, int max_iter) {
  const auto d = x0.size();
  auto g = [&](const Eigen::VectorXd& x) {
    const double v = f(x);
    return std::isfinite(v) ? -v : std::numeric_limits<double>::infinity();
  };
  std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(d + 1), x0);
  std::vector<double> fs(static_cast<std::size_t>(d + 1));
  for (Eigen::Index i = 0; i < d; ++i) xs[static_cast<std::size_t>(i + 1)][i] += step;
  for (std::size_t i = 0; i < xs.size(); ++i) fs[i] = g(xs[i]);

  NelderMeadResult res;
  std::vector<std::size_t> order(xs.size());
  for (int it = 0; it < max_iter; ++it) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return fs[a] < fs[b]; });
    {
      std::vector<Eigen::VectorXd> x2;
      std::vector<double> f2;
      for (auto i : order) x2.push_back(xs[i]), f2.push_back(fs[i]);
      xs.swap(x2);
      fs.swap(f2);
    }
    res.iterations = it;
    double size = 0.0;
    for (std::size_t i = 1; i < xs.size(); ++i) size = std::max(size, (xs[i] - xs[0]).cwiseAbs().maxCoeff());
    if (std::isfinite(fs.back()) && fs.back() - fs.front() < f_tol && size < x_tol) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) centroid += xs[i];
    centroid /= static_cast<double>(d);
    const Eigen::VectorXd& worst = xs.back();
    const Eigen::VectorXd xr = centroid + (centroid - worst);
    const double fr = g(xr);
    if (fr < fs.front()) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - worst);
      const double fe = g(xe);
      if (fe < fr)
        xs.back() = xe, fs.back() = fe;
      else
        xs.back() = xr, fs.back() = fr;
      continue;
    }
    if (fr < fs[fs.size() - 2]) {
      xs.back() = xr, fs.back() = fr;
      continue;
    }
    const bool outside = fr < fs.back();
    const Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                                       : Eigen::VectorXd(centroid + 0.5 * (worst - centroid));
    const double fc = g(xc);
    if (fc < (outside ? fr : fs.back())) {
      xs.back() = xc, fs.back() = fc;
      continue;
    }
    for (std::size_t i = 1; i < xs.size(); ++i) {
      xs[i] = xs[0] + 0.5 * (xs[i] - xs[0]);
      fs[i] = g(xs[i]);
    }
  }
  const auto best = static_cast<std::size_t>(std::min_element(fs.begin(), fs.end()) - fs.begin());
  res.x = xs[best];
  res.f = -fs[best];
  return res;
}

Eigen::MatrixXd finite_difference_hessian(const std::function<double(const Eigen::VectorXd&)>& f,
                                          const Eigen::VectorXd& x, double h, double fx) {
  const auto d = x.size();
  Eigen::MatrixXd H(d, d);
  auto at = [&](Eigen::Index i, double si, Eigen::Index j, double sj) {
    Eigen::VectorXd y = x;
    y[i] += si * h;
    y[j] += sj * h;
    return f(y);
  };
  for (Eigen::Index i = 0; i < d; ++i) {
    H(i, i) = (at(i, 1, i, 0) - 2.0 * fx + at(i, -1, i, 0)) / (h * h);
    for (Eigen::Index j = 0; j < i; ++j) {
      const double v = (at(i, 1, j, 1) - at(i, 1, j, -1) - at(i, -1, j, 1) + at(i, -1, j, -1)) / (4.0 * h * h);
      H(i, j) = H(j, i) = v;
    }
  }
  return H;
}

ModeResult optimize_hyperparameters(const AssembledModel& am, const Eigen::VectorXd& init) {
  if (init.size() != am.theta_dim() || !init.allFinite())
    throw Error("invalid_parameter", "initial theta must be finite with the model's dimension");
  Workspace ws(am);
  auto f = [&](const Eigen::VectorXd& th) {
    try {
      return log_marginal_posterior(ws, th);
    } catch (const Error&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  const double f0 = f(init);
  if (!std::isfinite(f0)) throw Error("nonfinite_objective", "log posterior is not finite at the initial theta");

  ModeResult out;
  auto r1 = nelder_mead_max(f, init, 0.5, 1e-4, 1e-4, am.spec.max_iter);
  // restart from the best point to guard against a collapsed simplex
  auto r2 = nelder_mead_max(f, r1.x, 0.1, 1e-4, 1e-4, am.spec.max_iter);
  const auto& best = r2.f >= r1.f ? r2 : r1;
  out.mode = best.x;
  out.log_post = best.f;
  out.converged = r2.converged;
  out.iterations = r1.iterations + r2.iterations;
  if (!out.converged) out.warnings.push_back("optimizer reached the iteration cap");

  Eigen::MatrixXd H = finite_difference_hessian(f, out.mode, 1e-3, out.log_post);
  H = 0.5 * (H + H.transpose()).eval();
  if (!H.allFinite()) throw Error("nonfinite_hessian", "Hessian at the mode is not finite");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(-H);
  Eigen::VectorXd lam = es.eigenvalues();
  if (lam.minCoeff() < 1e-8) {
    for (Eigen::Index i = 0; i < lam.size(); ++i) lam[i] = std::max(lam[i], 1e-8);
    H = -(es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose());
    out.hessian_repaired = true;
    out.warnings.push_back("Hessian was not negative definite and has been repaired");
  }
  out.hessian = H;
  return out;
}

// ---------------------------------------------------------------------------
// Grid over theta

namespace {

struct PointStats {
  ComponentSummary comp;
  Eigen::VectorXd x_mean, x_var;
};

// Mean and variance of R x for each row of R.
void row_moments(const RowMat& R, const Eigen::VectorXd& mean, const Eigen::VectorXd& var, const CovarianceLookup& S,
                 Eigen::VectorXd& out_mean, Eigen::VectorXd& out_var) {
  out_mean = R * mean;
  out_var.resize(R.rows());
  for (Eigen::Index i = 0; i < R.rows(); ++i) {
    double v = 0.0;
    for (RowMat::InnerIterator a(R, i); a; ++a) {
      v += a.value() * a.value() * var[a.col()];
      for (RowMat::InnerIterator b(R, i); b && b.col() < a.col(); ++b) v += 2.0 * a.value() * b.value() * S(a.col(), b.col());
    }
    out_var[i] = std::max(v, 0.0);
  }
}

// Summaries at the theta the workspace was last updated with.
PointStats point_stats(Workspace& ws, const RowMat& Br, const RowMat& Bm) {
  const auto& am = ws.model();
  const auto cov = ws.qc().covariance(ws.dense_columns());
  const CovarianceLookup& S = *cov;
  PointStats ps;
  ps.x_mean = ws.mean();
  ps.x_var = S.diagonal();
  const auto& L = am.layout;
  ps.comp.tau_eps = ws.tau_eps();
  ps.comp.beta_mean = ps.x_mean.segment(L.beta_offset, L.p1);
  ps.comp.beta_sd = ps.x_var.segment(L.beta_offset, L.p1).cwiseMax(0.0).cwiseSqrt();
  row_moments(Br, ps.x_mean, ps.x_var, S, ps.comp.eta_mean, ps.comp.eta_var);
  if (Bm.rows() > 0) row_moments(Bm, ps.x_mean, ps.x_var, S, ps.comp.pred_mean, ps.comp.pred_var);
  return ps;
}

}  // namespace


void parallel_for(int n, int threads, const std::function<void(int, int)>& body) {
  const int nt = std::max(1, std::min(threads, n));
  if (nt <= 1) {
    for (int i = 0; i < n; ++i) body(i, 0);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < nt; ++t)
    pool.emplace_back([&, t] {
      for (int i = next++; i < n; i = next++) {
        try {
          body(i, t);
        } catch (...) {
          std::lock_guard<std::mutex> lk(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

namespace {

ThetaGrid explore_grid_impl(const AssembledModel& am, const ModeResult& mode, std::vector<PointStats>* stats) {
  const int d = am.theta_dim();
  const double step = am.spec.grid_step, drop_max = am.spec.grid_drop;
  const int threads = std::max(1, am.spec.threads);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(-mode.hessian);
  const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(1e-8);
  const Eigen::MatrixXd S = es.eigenvectors() * lam.cwiseSqrt().cwiseInverse().asDiagonal();

  std::vector<std::unique_ptr<Workspace>> ws;
  for (int t = 0; t < threads; ++t) ws.push_back(std::make_unique<Workspace>(am));
  const RowMat Br = am.B, Bm = am.B_miss;
  // evaluates the log posterior at z; when requested and the point is kept, also its summaries
  auto lp_at = [&](const Eigen::VectorXd& z, int tid, PointStats* ps) {
    Workspace& w = *ws[static_cast<std::size_t>(tid)];
    try {
      const double v = log_marginal_posterior(w, mode.mode + S * z);
      if (!std::isfinite(v)) return -std::numeric_limits<double>::infinity();
      if (ps && mode.log_post - v < drop_max) *ps = point_stats(w, Br, Bm);
      return v;
    } catch (const Error&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  // axis exploration: drops[j][k] for integer offsets k along eigen-axis j
  constexpr int kMaxSteps = 30;
  std::vector<std::map<int, double>> drops(static_cast<std::size_t>(d));
  std::vector<std::map<int, double>> lps(static_cast<std::size_t>(d));
  std::vector<std::map<int, PointStats>> axis_stats(static_cast<std::size_t>(d));
  std::mutex mu;
  parallel_for(2 * d, threads, [&](int job, int tid) {
    const int j = job / 2, dir = job % 2 ? -1 : 1;
    std::vector<std::tuple<int, double, PointStats>> found;
    for (int k = 1; k <= kMaxSteps; ++k) {
      Eigen::VectorXd z = Eigen::VectorXd::Zero(d);
      z[j] = dir * k * step;
      PointStats ps;
      const double lp = lp_at(z, tid, stats ? &ps : nullptr);
      if (!(mode.log_post - lp < drop_max)) break;
      found.emplace_back(dir * k, lp, std::move(ps));
    }
    std::lock_guard<std::mutex> lk(mu);
    for (auto& [k, lp, ps] : found) {
      lps[static_cast<std::size_t>(j)][k] = lp;
      drops[static_cast<std::size_t>(j)][k] = mode.log_post - lp;
      if (stats) axis_stats[static_cast<std::size_t>(j)][k] = std::move(ps);
    }
  });
  for (int j = 0; j < d; ++j) {
    lps[static_cast<std::size_t>(j)][0] = mode.log_post;
    drops[static_cast<std::size_t>(j)][0] = 0.0;
  }

  // candidate combinations pre-screened with the additive drop prediction
  std::vector<std::vector<int>> cand;
  std::vector<int> cur(static_cast<std::size_t>(d), 0);
  const double bound = drop_max + am.spec.grid_margin;
  std::function<void(int, double)> rec = [&](int j, double acc) {
    if (j == d) {
      cand.push_back(cur);
      return;
    }
    for (auto [k, dr] : drops[static_cast<std::size_t>(j)]) {
      const double a = acc + std::max(dr, 0.0);
      if (a > bound) continue;
      cur[static_cast<std::size_t>(j)] = k;
      rec(j + 1, a);
    }
  };
  rec(0, 0.0);

  std::vector<double> lp(cand.size(), -std::numeric_limits<double>::infinity());
  std::vector<PointStats> cstats(stats ? cand.size() : 0);
  parallel_for(static_cast<int>(cand.size()), threads, [&](int c, int tid) {
    const auto cc = static_cast<std::size_t>(c);
    const auto& kk = cand[cc];
    int nonzero = 0, axis = -1;
    for (int j = 0; j < d; ++j)
      if (kk[static_cast<std::size_t>(j)] != 0) ++nonzero, axis = j;
    if (nonzero == 0) {
      lp[cc] = mode.log_post;
      if (stats) {
        Workspace& w = *ws[static_cast<std::size_t>(tid)];
        w.update(mode.mode);
        cstats[cc] = point_stats(w, Br, Bm);
      }
      return;
    }
    if (nonzero == 1) {
      const auto ax = static_cast<std::size_t>(axis);
      lp[cc] = lps[ax].at(kk[ax]);
      if (stats) cstats[cc] = std::move(axis_stats[ax].at(kk[ax]));
      return;
    }
    Eigen::VectorXd z(d);
    for (int j = 0; j < d; ++j) z[j] = kk[static_cast<std::size_t>(j)] * step;
    lp[cc] = lp_at(z, tid, stats ? &cstats[cc] : nullptr);
  });

  ThetaGrid grid;
  grid.hessian = mode.hessian;
  for (std::size_t c = 0; c < cand.size(); ++c) {
    if (!(mode.log_post - lp[c] < drop_max)) continue;
    GridPoint gp;
    gp.z.resize(d);
    for (int j = 0; j < d; ++j) gp.z[j] = cand[c][static_cast<std::size_t>(j)] * step;
    gp.theta = mode.mode + S * gp.z;
    gp.log_post = lp[c];
    grid.points.push_back(std::move(gp));
    if (stats) stats->push_back(std::move(cstats[c]));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.points.size(); ++i)
    if (grid.points[i].log_post > mx) mx = grid.points[i].log_post, grid.mode_index = static_cast<int>(i);
  double tot = 0.0;
  for (auto& gp : grid.points) tot += (gp.weight = std::exp(gp.log_post - mx));
  for (auto& gp : grid.points) gp.weight /= tot;
  grid.mode = grid.points[static_cast<std::size_t>(grid.mode_index)].theta;
  return grid;
}

}  // namespace

ThetaGrid explore_grid(const AssembledModel& am, const ModeResult& mode) { return explore_grid_impl(am, mode, nullptr); }

// ---------------------------------------------------------------------------
// Summaries

double mixture_quantile(const std::vector<double>& w, const std::vector<double>& mu, const std::vector<double>& sd,
                        double prob) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t k = 0; k < w.size(); ++k) {
    lo = std::min(lo, mu[k] - 12.0 * sd[k] - 1e-12);
    hi = std::max(hi, mu[k] + 12.0 * sd[k] + 1e-12);
  }
  auto cdf = [&](double q) {
    double s = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k)
      s += w[k] * (sd[k] > 0 ? normal_cdf((q - mu[k]) / sd[k]) : (q >= mu[k] ? 1.0 : 0.0));
    return s;
  };
  for (int it = 0; it < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(lo) + std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (cdf(mid) < prob ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

namespace {

Marginal discrete_marginal(const std::string& name, const std::vector<double>& w, const std::vector<double>& v) {
  Marginal mg;
  mg.name = name;
  double m1 = 0, m2 = 0;
  for (std::size_t k = 0; k < w.size(); ++k) m1 += w[k] * v[k];
  for (std::size_t k = 0; k < w.size(); ++k) m2 += w[k] * (v[k] - m1) * (v[k] - m1);
  mg.mean = m1;
  mg.sd = std::sqrt(std::max(m2, 0.0));
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  // mid-point CDF with linear interpolation between sorted support points
  std::vector<double> xs, fs;
  double acc = 0.0;
  for (auto i : idx) {
    xs.push_back(v[i]);
    fs.push_back(acc + 0.5 * w[i]);
    acc += w[i];
  }
  auto q = [&](double p) {
    if (p <= fs.front()) return xs.front();
    if (p >= fs.back()) return xs.back();
    const auto it = std::lower_bound(fs.begin(), fs.end(), p);
    const auto j = static_cast<std::size_t>(it - fs.begin());
    const double f0 = fs[j - 1], f1 = fs[j];
    return xs[j - 1] + (xs[j] - xs[j - 1]) * (p - f0) / std::max(f1 - f0, 1e-300);
  };
  mg.q025 = q(0.025);
  mg.q50 = q(0.5);
  mg.q975 = q(0.975);
  return mg;
}

}  // namespace

namespace {

FitResult summarize_impl(const AssembledModel& am, ThetaGrid grid, std::vector<PointStats> stats) {
  FitResult fr;
  fr.kind = am.spec.kind;
  fr.theta_names = am.theta_names;
  fr.beta_names = am.beta_names;
  const int K = static_cast<int>(grid.points.size());

  const int dim = am.layout.dim;
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(dim), m2 = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd e1 = Eigen::VectorXd::Zero(am.n), e2 = Eigen::VectorXd::Zero(am.n);
  const auto nm = am.B_miss.rows();
  Eigen::VectorXd p1 = Eigen::VectorXd::Zero(nm), p2 = Eigen::VectorXd::Zero(nm);
  std::vector<double> w(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const double wk = grid.points[static_cast<std::size_t>(k)].weight;
    w[static_cast<std::size_t>(k)] = wk;
    auto& s = stats[static_cast<std::size_t>(k)];
    m1 += wk * s.x_mean;
    m2 += wk * (s.x_var + s.x_mean.cwiseAbs2());
    e1 += wk * s.comp.eta_mean;
    e2 += wk * (s.comp.eta_var + s.comp.eta_mean.cwiseAbs2());
    if (s.comp.pred_mean.size()) {
      p1 += wk * s.comp.pred_mean;
      p2 += wk * (s.comp.pred_var + s.comp.pred_mean.cwiseAbs2());
    }
    s.x_mean.resize(0);
    s.x_var.resize(0);
    fr.components.push_back(std::move(s.comp));
  }
  fr.latent_mean = m1;
  fr.latent_sd = (m2 - m1.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  fr.fitted_mean = e1;
  fr.fitted_sd = (e2 - e1.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  fr.pred_mean = p1;
  fr.pred_sd = (p2 - p1.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();

  for (int j = 0; j < am.layout.p1; ++j) {
    std::vector<double> mu(static_cast<std::size_t>(K)), sd(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      mu[static_cast<std::size_t>(k)] = fr.components[static_cast<std::size_t>(k)].beta_mean[j];
      sd[static_cast<std::size_t>(k)] = fr.components[static_cast<std::size_t>(k)].beta_sd[j];
    }
    Marginal mg;
    mg.name = am.beta_names[static_cast<std::size_t>(j)];
    mg.mean = m1[am.layout.beta_offset + j];
    mg.sd = fr.latent_sd[am.layout.beta_offset + j];
    mg.q025 = mixture_quantile(w, mu, sd, 0.025);
    mg.q50 = mixture_quantile(w, mu, sd, 0.5);
    mg.q975 = mixture_quantile(w, mu, sd, 0.975);
    fr.beta_marginals.push_back(mg);
  }

  // natural-scale hyperparameters
  std::vector<std::pair<std::string, std::function<double(const HyperValues&)>>> hyp = {
      {"tau_eps", [](const HyperValues& h) { return h.tau_eps; }}};
  if (am.spec.kind != ModelKind::CovariateOnly) {
    hyp.emplace_back("range", [](const HyperValues& h) { return h.range; });
    hyp.emplace_back("sigma_omega", [](const HyperValues& h) { return h.sigma_omega; });
    if (am.spec.kind == ModelKind::FullST) hyp.emplace_back("phi", [](const HyperValues& h) { return h.phi; });
    if (am.layout.f_size > 0) {
      hyp.emplace_back("sigma_f", [](const HyperValues& h) { return h.sigma_f; });
      hyp.emplace_back("phi_f", [](const HyperValues& h) { return h.phi_f; });
    }
  }
  for (const auto& [name, fn] : hyp) {
    std::vector<double> v;
    for (const auto& gp : grid.points) v.push_back(fn(am.natural(gp.theta)));
    fr.hyper_marginals.push_back(discrete_marginal(name, w, v));
  }

  fr.mode_log_post = grid.points[static_cast<std::size_t>(grid.mode_index)].log_post;
  if (grid.hessian.rows() == am.theta_dim()) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(-grid.hessian);
    const double ld = es.eigenvalues().cwiseMax(1e-300).array().log().sum();
    fr.log_ml = fr.mode_log_post + 0.5 * am.theta_dim() * kLog2Pi - 0.5 * ld;
  } else {
    fr.log_ml = fr.mode_log_post;
  }
  fr.theta_grid = std::move(grid);
  return fr;
}

}  // namespace

FitResult summarize_grid(const AssembledModel& am, ThetaGrid grid) {
  const int K = static_cast<int>(grid.points.size());
  if (K == 0) throw Error("empty_grid", "theta grid has no points");
  const int threads = std::max(1, am.spec.threads);
  const RowMat Br = am.B, Bm = am.B_miss;
  std::vector<std::unique_ptr<Workspace>> ws;
  for (int t = 0; t < std::min(threads, K); ++t) ws.push_back(std::make_unique<Workspace>(am));
  std::vector<PointStats> stats(static_cast<std::size_t>(K));
  parallel_for(K, threads, [&](int k, int tid) {
    Workspace& w = *ws[static_cast<std::size_t>(tid)];
    w.update(grid.points[static_cast<std::size_t>(k)].theta);
    stats[static_cast<std::size_t>(k)] = point_stats(w, Br, Bm);
  });
  return summarize_impl(am, std::move(grid), std::move(stats));
}

FitResult fit(const AssembledModel& am, const Eigen::VectorXd& init) {
  const ModeResult mode = optimize_hyperparameters(am, init);
  std::vector<PointStats> stats;
  ThetaGrid grid = explore_grid_impl(am, mode, &stats);
  FitResult fr = summarize_impl(am, std::move(grid), std::move(stats));
  fr.converged = mode.converged;
  fr.hessian_repaired = mode.hessian_repaired;
  fr.iterations = mode.iterations;
  fr.warnings = mode.warnings;
  return fr;
}

FitResult fit(const AssembledModel& am) { return fit(am, am.initial_theta()); }

FitResult fit_at(const AssembledModel& am, const Eigen::VectorXd& theta) {
  ThetaGrid grid;
  GridPoint gp;
  gp.theta = theta;
  gp.z = Eigen::VectorXd::Zero(theta.size());
  gp.log_post = log_marginal_posterior(am, theta);
  gp.weight = 1.0;
  grid.points.push_back(gp);
  grid.mode = theta;
  FitResult fr = summarize_grid(am, std::move(grid));
  fr.converged = true;
  return fr;
}

}  // namespace stgmrf
