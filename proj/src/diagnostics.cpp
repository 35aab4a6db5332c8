#include "stgmrf/diagnostics.hpp"

#include "stgmrf/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace stgmrf {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double phi_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

void check_fit(const FitResult& fit, const AssembledModel& am) {
  if (fit.components.empty() || fit.components.size() != fit.theta_grid.points.size())
    throw Error("invalid_fit", "fit has no grid components");
  for (const auto& c : fit.components)
    if (c.eta_mean.size() != am.n) throw Error("dimension_mismatch", "fit does not belong to this model");
}

double log_sum_exp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

double normal_log_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (kLog2Pi + std::log(var) + d * d / var);
}

double normal_pdf(double x, double mean, double var) { return std::exp(normal_log_pdf(x, mean, var)); }

ScoreReport score(const Eigen::VectorXd& obs, const Eigen::VectorXd& pred, double response_sd) {
  if (obs.size() != pred.size()) throw Error("dimension_mismatch", "obs and pred differ in length");
  if (obs.size() < 2) throw Error("too_few_points", "scores need at least two values");
  ScoreReport s;
  s.n = static_cast<int>(obs.size());
  const Eigen::ArrayXd e = (pred - obs).array();
  s.mean_error = e.mean();
  s.rmse = std::sqrt(e.square().mean());
  s.mae = e.abs().mean();
  s.rmse_du = s.rmse * response_sd;
  s.mae_du = s.mae * response_sd;
  const Eigen::ArrayXd a = obs.array() - obs.mean(), b = pred.array() - pred.mean();
  const double saa = (a * a).sum(), sbb = (b * b).sum();
  if (saa > 0 && sbb > 0) s.r = std::clamp((a * b).sum() / std::sqrt(saa * sbb), -1.0, 1.0);
  return s;
}

DicResult dic(const FitResult& fit, const AssembledModel& am) {
  check_fit(fit, am);
  const auto& pts = fit.theta_grid.points;
  DicResult d;
  double tau_bar = 0.0;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const auto& c = fit.components[k];
    const double tau = c.tau_eps;
    tau_bar += pts[k].weight * tau;
    // E[D | theta_k] with the latent integrated exactly
    const double rss = (am.y - c.eta_mean).squaredNorm() + c.eta_var.sum();
    d.d_bar += pts[k].weight * (am.n * (kLog2Pi - std::log(tau)) + tau * rss);
  }
  d.d_hat = am.n * (kLog2Pi - std::log(tau_bar)) + tau_bar * (am.y - fit.fitted_mean).squaredNorm();
  d.p_dic = d.d_bar - d.d_hat;
  d.dic = d.d_hat + 2.0 * d.p_dic;
  return d;
}

WaicResult waic(const FitResult& fit, const AssembledModel& am) {
  check_fit(fit, am);
  const auto& pts = fit.theta_grid.points;
  const std::size_t K = pts.size();
  WaicResult w;
  w.latent_only = K == 1;
  std::vector<double> lw(K);
  for (std::size_t k = 0; k < K; ++k) lw[k] = std::log(pts[k].weight);
  std::vector<double> terms(K);
  for (int i = 0; i < am.n; ++i) {
    const double y = am.y[i];
    double e_l = 0.0, e_l2 = 0.0, e_var = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const auto& c = fit.components[k];
      const double tau = c.tau_eps, m = c.eta_mean[i], s2 = c.eta_var[i], d = y - m;
      terms[k] = lw[k] + normal_log_pdf(y, m, 1.0 / tau + s2);
      // log p(y_i | eta, theta) is quadratic in eta ~ N(m, s2): closed-form mean and variance
      const double mean_l = -0.5 * kLog2Pi + 0.5 * std::log(tau) - 0.5 * tau * (d * d + s2);
      const double var_l = 0.25 * tau * tau * (2.0 * s2 * s2 + 4.0 * d * d * s2);
      const double wk = pts[k].weight;
      e_l += wk * mean_l;
      e_l2 += wk * mean_l * mean_l;
      e_var += wk * var_l;
    }
    w.lppd += log_sum_exp(terms);
    w.p_waic += e_var + std::max(e_l2 - e_l * e_l, 0.0);
  }
  w.waic = -2.0 * (w.lppd - w.p_waic);
  return w;
}

bool loo_predictive(double y, double m, double s2, double noise_var, LooPredictive& out) {
  const double gap = noise_var - s2;
  if (!(gap > 1e-12)) return false;
  out.var = noise_var * noise_var / gap;
  out.mean = y - noise_var * (y - m) / gap;
  return true;
}

CpoResult cpo_pit(const FitResult& fit, const AssembledModel& am) {
  check_fit(fit, am);
  const auto& pts = fit.theta_grid.points;
  CpoResult r;
  r.cpo = Eigen::VectorXd::Zero(am.n);
  r.pit = Eigen::VectorXd::Zero(am.n);
  r.reliable.assign(static_cast<std::size_t>(am.n), true);
  double sum_log = 0.0;
  for (int i = 0; i < am.n; ++i) {
    const double y = am.y[i];
    double wsum = 0.0;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const auto& c = fit.components[k];
      LooPredictive lp;
      if (!loo_predictive(y, c.eta_mean[i], c.eta_var[i], 1.0 / c.tau_eps, lp)) {
        r.reliable[static_cast<std::size_t>(i)] = false;
        continue;
      }
      r.cpo[i] += pts[k].weight * normal_pdf(y, lp.mean, lp.var);
      r.pit[i] += pts[k].weight * phi_cdf((y - lp.mean) / std::sqrt(lp.var));
      wsum += pts[k].weight;
    }
    // components violating the guard are dropped and the rest renormalized
    if (wsum > 0) {
      r.cpo[i] /= wsum;
      r.pit[i] = std::clamp(r.pit[i] / wsum, 0.0, 1.0);
    } else {
      r.cpo[i] = std::numeric_limits<double>::quiet_NaN();
      r.pit[i] = std::numeric_limits<double>::quiet_NaN();
    }
    if (r.cpo[i] > 0) sum_log += std::log(r.cpo[i]);
  }
  r.lcpo = am.n > 0 ? -sum_log / am.n : 0.0;
  return r;
}

CriteriaReport criteria(const FitResult& fit, const AssembledModel& am) {
  CriteriaReport c;
  const auto d = dic(fit, am);
  c.dic = d.dic;
  c.p_dic = d.p_dic;
  c.d_bar = d.d_bar;
  c.d_hat = d.d_hat;
  const auto w = waic(fit, am);
  c.waic = w.waic;
  c.p_waic = w.p_waic;
  c.lppd = w.lppd;
  c.p_waic_latent_only = w.latent_only;
  auto cp = cpo_pit(fit, am);
  c.cpo = std::move(cp.cpo);
  c.pit = std::move(cp.pit);
  c.cpo_reliable = std::move(cp.reliable);
  c.lcpo = cp.lcpo;
  c.n_unreliable = static_cast<int>(std::count(c.cpo_reliable.begin(), c.cpo_reliable.end(), false));
  return c;
}

std::vector<int> pit_histogram(const Eigen::VectorXd& pit, int bins) {
  if (bins < 1) throw Error("invalid_parameter", "need at least one bin");
  std::vector<int> h(static_cast<std::size_t>(bins), 0);
  for (double u : pit) {
    if (!std::isfinite(u)) continue;
    const int b = std::clamp(static_cast<int>(std::floor(u * bins)), 0, bins - 1);
    ++h[static_cast<std::size_t>(b)];
  }
  return h;
}

double kolmogorov_survival(double x) {
  if (x <= 0) return 1.0;
  if (x < 0.2) return 1.0;
  double s = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double t = std::exp(-2.0 * k * k * x * x);
    s += (k % 2 ? 2.0 : -2.0) * t;
    if (t < 1e-17) break;
  }
  return std::clamp(s, 0.0, 1.0);
}

KsResult ks_uniform(const Eigen::VectorXd& u_in) {
  std::vector<double> u;
  for (double v : u_in)
    if (std::isfinite(v)) u.push_back(v);
  if (u.empty()) throw Error("too_few_points", "KS test needs at least one value");
  std::sort(u.begin(), u.end());
  const double n = static_cast<double>(u.size());
  double d = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double f = std::clamp(u[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  KsResult r;
  r.statistic = d;
  const double sn = std::sqrt(n);
  // small-sample correction of the asymptotic distribution
  r.p_value = kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d);
  return r;
}

}  // namespace stgmrf
