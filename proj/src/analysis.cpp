#include "sfl/analysis.hpp"

#include <cmath>
#include <stdexcept>

namespace sfl {

namespace {

void check_common(const BoundInputs& in) {
  if (!(in.mu > 0)) throw std::invalid_argument("bound: mu must be positive");
  if (!(in.gamma_value > 0)) throw std::invalid_argument("bound: gamma must be positive");
  if (in.N < 1) throw std::invalid_argument("bound: N must be >= 1");
  if (in.E < 1 || in.M < 1) throw std::invalid_argument("bound: E and M must be >= 1");
}

// All runs must be logs of the same geometry with step records at the same
// indices; returns the shared record count.
std::size_t check_same_geometry(const std::vector<RunLog>& runs) {
  if (runs.empty()) throw std::invalid_argument("analysis: no runs");
  const std::size_t count = runs[0].steps.size();
  for (const RunLog& run : runs) {
    if (run.steps.size() != count)
      throw std::invalid_argument("analysis: runs log different step counts");
    for (std::size_t k = 0; k < count; ++k)
      if (run.steps[k].i != runs[0].steps[k].i)
        throw std::invalid_argument("analysis: runs log different step indices");
  }
  return count;
}

}  // namespace

double prop1_bound(const BoundInputs& in, long i) {
  check_common(in);
  if (i < 0) throw std::invalid_argument("prop1_bound: i must be >= 0");
  const double nn = static_cast<double>(in.N) * in.N;
  const double mu2 = in.mu * in.mu;
  return (8.0 * in.R * in.R + mu2 * nn * (in.gamma_value + 1.0) * in.d0_server) /
         (mu2 * nn * (in.gamma_value + static_cast<double>(i)));
}

double h_constant(const BoundInputs& in) {
  if (in.E < 1 || in.M < 1) throw std::invalid_argument("h_constant: E and M must be >= 1");
  const double em = static_cast<double>(in.E) * in.M;
  double sigma_term = 0.0;
  if (in.sigma_sq.size() > 0) {
    if (in.p.size() != in.sigma_sq.size())
      throw std::invalid_argument("h_constant: p and sigma_sq size mismatch");
    for (Eigen::Index n = 0; n < in.p.size(); ++n)
      sigma_term += in.p(n) * in.p(n) * in.sigma_sq(n);
  }
  return 6.0 * em * in.R * in.R + 12.0 * em * em * in.delta * in.delta +
         6.0 * in.smoothness * in.gamma_gap + sigma_term;
}

double prop2_bound(const BoundInputs& in, long i) {
  check_common(in);
  if (i < 0) throw std::invalid_argument("prop2_bound: i must be >= 0");
  const double mu2 = in.mu * in.mu;
  return (4.0 * h_constant(in) + mu2 * (in.gamma_value + 1.0) * in.d0_client) /
         (mu2 * (in.gamma_value + static_cast<double>(i)));
}

BoundReport theorem1_bound(const BoundInputs& in, long total_steps) {
  if (total_steps < 1)
    throw std::invalid_argument("theorem1_bound: total_steps must be >= 1");
  BoundReport rep;
  rep.server_term = prop1_bound(in, total_steps);
  rep.client_term = prop2_bound(in, total_steps);
  rep.bound = in.smoothness * (rep.server_term + rep.client_term) / 2.0;
  return rep;
}

TrajectoryCheck check_trajectory_vs_bound(const std::vector<RunLog>& runs,
                                          const BoundInputs& in, BoundSide side,
                                          double tol) {
  const std::size_t count = check_same_geometry(runs);
  TrajectoryCheck out;
  for (std::size_t k = 0; k < count; ++k) {
    double mean = 0.0;
    bool usable = true;
    for (const RunLog& run : runs) {
      const StepRecord& rec = run.steps[k];
      const double d = side == BoundSide::kServer ? rec.dist_sq_server
                                                  : rec.dist_sq_client;
      if (!std::isfinite(d)) {
        usable = false;
        break;
      }
      mean += d;
    }
    if (!usable) continue;
    mean /= static_cast<double>(runs.size());
    const long i = runs[0].steps[k].i;
    const double bound = side == BoundSide::kServer ? prop1_bound(in, i)
                                                    : prop2_bound(in, i);
    ++out.checked;
    if (bound > 0) out.max_ratio = std::max(out.max_ratio, mean / bound);
    if (mean > bound * (1.0 + tol)) {
      ++out.violations;
      if (out.first_violation < 0) out.first_violation = i;
    }
  }
  return out;
}

double sum_coordinate_variance(const std::vector<Vector>& vecs) {
  if (vecs.empty()) throw std::invalid_argument("sum_coordinate_variance: no vectors");
  const double count = static_cast<double>(vecs.size());
  Vector mean = vecs[0];
  for (std::size_t v = 1; v < vecs.size(); ++v) {
    if (vecs[v].size() != mean.size())
      throw std::invalid_argument("sum_coordinate_variance: size mismatch");
    mean += vecs[v];
  }
  mean /= count;
  double total = 0.0;
  for (const Vector& v : vecs) total += (v - mean).squaredNorm();
  return total / count;
}

double grad_variance_at_client(const RunLog& log, int client, long end_i,
                               int window) {
  if (log.cut <= 0)
    throw std::invalid_argument("grad_variance_at_client: zero client-side layers");
  if (client < 0 || client >= log.N)
    throw std::invalid_argument("grad_variance_at_client: client out of range");
  const int w = window > 0 ? window : log.M;
  if (w < 1) return std::numeric_limits<double>::quiet_NaN();
  std::vector<Vector> grads;
  for (auto it = log.steps.rbegin(); it != log.steps.rend(); ++it) {
    if (it->i > end_i || it->client_grads.empty()) continue;
    if (client >= static_cast<int>(it->client_grads.size())) continue;
    grads.push_back(it->client_grads[static_cast<std::size_t>(client)]);
    if (static_cast<int>(grads.size()) == w) break;
  }
  if (grads.empty() || grads[0].size() == 0)
    return std::numeric_limits<double>::quiet_NaN();
  return sum_coordinate_variance(grads) / log.cut;
}

double grad_variance_across_clients(const RunLog& log, long i) {
  if (log.cut <= 0)
    throw std::invalid_argument("grad_variance_across_clients: zero client-side layers");
  for (const StepRecord& rec : log.steps) {
    if (rec.i != i) continue;
    if (rec.client_grads.size() < 2 || rec.client_grads[0].size() == 0)
      return std::numeric_limits<double>::quiet_NaN();
    return sum_coordinate_variance(rec.client_grads) / log.cut;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

LemmaCheck check_divergence_lemma(const std::vector<RunLog>& runs, double R_hat,
                                  double delta_hat, double tol) {
  const std::size_t count = check_same_geometry(runs);
  const double em = static_cast<double>(runs[0].E) * runs[0].M;
  const double constant =
      3.0 * em * R_hat * R_hat + 6.0 * em * em * delta_hat * delta_hat;
  LemmaCheck out;
  for (std::size_t k = 0; k < count; ++k) {
    if (runs[0].steps[k].i < 1) continue;
    double mean = 0.0;
    bool usable = true;
    const double eta_c = runs[0].steps[k].eta_c;
    for (const RunLog& run : runs) {
      const StepRecord& rec = run.steps[k];
      if (!std::isfinite(rec.client_divergence) || !std::isfinite(rec.eta_c)) {
        usable = false;
        break;
      }
      if (rec.eta_c != eta_c)
        throw std::invalid_argument("check_divergence_lemma: runs disagree on eta_c");
      mean += rec.client_divergence;
    }
    if (!usable) continue;
    mean /= static_cast<double>(runs.size());
    const double bound = constant * eta_c * eta_c;
    ++out.checked;
    if (bound > 0) out.max_ratio = std::max(out.max_ratio, mean / bound);
    if (mean > bound * (1.0 + tol)) ++out.violations;
  }
  return out;
}

LemmaCheck check_variance_lemma(const std::vector<RunLog>& runs,
                                const Vector& sigma_sq, const Vector& p,
                                double tol) {
  if (sigma_sq.size() != p.size())
    throw std::invalid_argument("check_variance_lemma: p and sigma_sq size mismatch");
  const std::size_t count = check_same_geometry(runs);
  double bound = 0.0;
  for (Eigen::Index n = 0; n < p.size(); ++n) bound += p(n) * p(n) * sigma_sq(n);
  LemmaCheck out;
  for (std::size_t k = 0; k < count; ++k) {
    if (runs[0].steps[k].i < 1) continue;
    double mean = 0.0;
    bool usable = true;
    for (const RunLog& run : runs) {
      const double v = run.steps[k].agg_grad_dev_sq;
      if (!std::isfinite(v)) {
        usable = false;
        break;
      }
      mean += v;
    }
    if (!usable) continue;
    mean /= static_cast<double>(runs.size());
    ++out.checked;
    if (bound > 0) out.max_ratio = std::max(out.max_ratio, mean / bound);
    if (mean > bound * (1.0 + tol)) ++out.violations;
  }
  return out;
}

RateFit rate_fit(const std::vector<RunLog>& runs, double gamma_value) {
  if (!(gamma_value > 0)) throw std::invalid_argument("rate_fit: gamma must be positive");
  const std::size_t count = check_same_geometry(runs);
  std::vector<double> xs, ys;
  for (std::size_t k = 0; k < count; ++k) {
    if (runs[0].steps[k].i < 1) continue;
    double mean = 0.0;
    bool usable = true;
    for (const RunLog& run : runs) {
      const double d = run.steps[k].dist_sq_to_wstar;
      if (!std::isfinite(d)) {
        usable = false;
        break;
      }
      mean += d;
    }
    if (!usable) continue;
    mean /= static_cast<double>(runs.size());
    if (!(mean > 0)) continue;
    xs.push_back(std::log(gamma_value + static_cast<double>(runs[0].steps[k].i)));
    ys.push_back(std::log(mean));
  }
  if (xs.size() < 2)
    throw std::invalid_argument("rate_fit: need at least two usable points");
  const double n = static_cast<double>(xs.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sx += xs[k];
    sy += ys[k];
    sxx += xs[k] * xs[k];
    sxy += xs[k] * ys[k];
  }
  const double denom = n * sxx - sx * sx;
  if (denom == 0.0) throw std::invalid_argument("rate_fit: degenerate abscissae");
  RateFit fit;
  fit.slope = (n * sxy - sx * sy) / denom;
  fit.intercept = (sy - fit.slope * sx) / n;
  fit.points = static_cast<long>(xs.size());
  double ss_res = 0.0, ss_tot = 0.0;
  const double y_mean = sy / n;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double e = ys[k] - (fit.intercept + fit.slope * xs[k]);
    ss_res += e * e;
    ss_tot += (ys[k] - y_mean) * (ys[k] - y_mean);
  }
  fit.r_squared = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

}  // namespace sfl
