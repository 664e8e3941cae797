#include "sfl/protocol.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "run_util.hpp"
#include "sfl/algorithms.hpp"
#include "sfl/analysis.hpp"

namespace sfl {

long step_index(int t, int e, int m, int E, int M) {
  if (E < 1 || M < 1) throw std::invalid_argument("step_index: E and M must be >= 1");
  if (t < 1) throw std::invalid_argument("step_index: t must be >= 1");
  if (e < 1 || e > E) throw std::invalid_argument("step_index: e out of range");
  if (m < 1 || m > M) throw std::invalid_argument("step_index: m out of range");
  return (static_cast<long>(t) - 1) * E * M + (static_cast<long>(e) - 1) * M + m;
}

std::vector<long> sync_points(int T, int E, int M) {
  if (T < 1 || E < 1 || M < 1)
    throw std::invalid_argument("sync_points: T, E, M must be >= 1");
  std::vector<long> points;
  points.reserve(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) points.push_back(static_cast<long>(t) * E * M);
  return points;
}

Vector weighted_mean(const std::vector<Vector>& vectors, const Vector& weights) {
  if (vectors.empty()) throw std::invalid_argument("weighted_mean: no vectors");
  if (weights.size() != static_cast<Eigen::Index>(vectors.size()))
    throw std::invalid_argument("weighted_mean: weight count mismatch");
  double sum = 0.0;
  for (Eigen::Index n = 0; n < weights.size(); ++n) sum += weights(n);
  if (std::abs(sum - 1.0) > 1e-12)
    throw std::invalid_argument("weighted_mean: weights sum to " + format_full(sum) +
                                ", expected 1");
  Vector acc = weights(0) * vectors[0];
  for (std::size_t n = 1; n < vectors.size(); ++n) {
    if (vectors[n].size() != acc.size())
      throw std::invalid_argument("weighted_mean: vector size mismatch");
    acc += weights(static_cast<Eigen::Index>(n)) * vectors[n];
  }
  return acc;
}

double weighted_spread(const std::vector<Vector>& vectors, const Vector& weights) {
  if (vectors.empty()) throw std::invalid_argument("weighted_spread: no vectors");
  if (weights.size() != static_cast<Eigen::Index>(vectors.size()))
    throw std::invalid_argument("weighted_spread: weight count mismatch");
  double total = 0.0;
  for (std::size_t n = 0; n < vectors.size(); ++n)
    for (std::size_t m = n + 1; m < vectors.size(); ++m)
      total += weights(static_cast<Eigen::Index>(n)) *
               weights(static_cast<Eigen::Index>(m)) *
               (vectors[n] - vectors[m]).squaredNorm();
  return total;
}

namespace {

void check_finite(const Vector& v, long step, const char* what) {
  if (!v.allFinite())
    throw NumericError("step " + std::to_string(step) + ": non-finite " + what);
}

}  // namespace

StepDiag minibatch_sfl_step(const SplitTask& task, SplitState& state,
                            const std::vector<std::vector<int>>& batches,
                            double eta_c, double eta_s) {
  const int N = task.num_clients();
  if (static_cast<int>(batches.size()) != N)
    throw std::invalid_argument("minibatch_sfl_step: need one batch per client");
  if (static_cast<int>(state.client_params.size()) != N)
    throw std::invalid_argument("minibatch_sfl_step: client parameter count mismatch");
  const Vector& p = task.client_weights();
  const long i = state.step + 1;

  // Phase 1: every client runs its batch through its model.
  std::vector<ClientForward> acts;
  acts.reserve(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n)
    acts.push_back(task.client_forward(n, state.client_params[n], batches[n]));

  // Phase 2: server-side losses and gradients, all at the pre-update server
  // parameters; the feedback sent back to the clients is taken from this same
  // point, so the server's own update never leaks into the client step.
  StepDiag diag;
  diag.client_grads.resize(static_cast<std::size_t>(N));
  double weight_sum = 0.0;
  Vector server_acc;
  std::vector<Matrix> feedback(static_cast<std::size_t>(N));
  std::vector<double> server_sq(static_cast<std::size_t>(N), 0.0);
  for (int n = 0; n < N; ++n) {
    SplitTask::ServerOut out = task.server_backward(state.server_params, acts[n]);
    diag.batch_loss += p(n) * out.loss;
    server_sq[static_cast<std::size_t>(n)] = out.grad_server.squaredNorm();
    feedback[static_cast<std::size_t>(n)] = std::move(out.grad_wrt_smashed);
    if (n == 0)
      server_acc = p(0) * out.grad_server;
    else
      server_acc += p(n) * out.grad_server;
    weight_sum += p(n);
  }
  if (std::abs(weight_sum - 1.0) > 1e-12)
    throw std::invalid_argument("minibatch_sfl_step: client weights sum to " +
                                format_full(weight_sum) + ", expected 1");
  if (server_acc.size() > 0) {
    state.server_params -= eta_s * (server_acc / weight_sum);
    check_finite(state.server_params, i, "server parameters");
  }

  // Phase 3: clients finish their gradients from the feedback and step.
  for (int n = 0; n < N; ++n) {
    Vector g = task.client_backward(n, state.client_params[n], acts[n],
                                    feedback[static_cast<std::size_t>(n)]);
    diag.max_full_sq_grad_norm = std::max(
        diag.max_full_sq_grad_norm, g.squaredNorm() + server_sq[static_cast<std::size_t>(n)]);
    if (n == 0)
      diag.agg_client_grad = p(0) * g;
    else
      diag.agg_client_grad += p(n) * g;
    if (g.size() > 0) {
      state.client_params[n] -= eta_c * g;
      check_finite(state.client_params[n], i, "client parameters");
    }
    diag.client_grads[static_cast<std::size_t>(n)] = std::move(g);
  }

  state.step = i;
  return diag;
}

bool maybe_sync(SplitState& state, const SyncSchedule& sched, const Vector& weights) {
  if (!sched.is_sync(state.step)) return false;
  Vector mean = weighted_mean(state.client_params, weights);
  for (auto& params : state.client_params) params = mean;
  return true;
}

RunLog run_training(const TrainConfig& cfg, const SplitTask& task) {
  detail::validate_config(cfg, task);
  const int N = task.num_clients();
  const Vector& p = task.client_weights();
  const ResolvedSchedule sched = resolve_schedule(cfg.schedule, cfg.epochs,
                                                  cfg.batches_per_epoch);
  const SyncSchedule sync{cfg.rounds, cfg.epochs, cfg.batches_per_epoch};

  SplitState state;
  state.client_params.assign(static_cast<std::size_t>(N),
                             task.init_client(mix_seed(cfg.seed, detail::kInitTag)));
  state.server_params = task.init_server(mix_seed(cfg.seed, detail::kInitTag));

  detail::LogBuilder lb("minibatch_sfl", cfg, task, task.client_units(),
                        cfg.schedule.mode == ScheduleParams::Mode::kDiminishing
                            ? sched.gamma_value
                            : std::numeric_limits<double>::quiet_NaN());
  lb.record_initial(state.client_params, state.server_params);
  if (cfg.trace_params) lb.push_trace(state.client_params, state.server_params);

  std::vector<BatchPlan> plans(static_cast<std::size_t>(N));
  for (int t = 1; t <= cfg.rounds; ++t) {
    for (int e = 1; e <= cfg.epochs; ++e) {
      for (int n = 0; n < N; ++n)
        plans[static_cast<std::size_t>(n)] =
            make_batch_plan(task.shards()[static_cast<std::size_t>(n)], cfg.batch_size,
                            cfg.batches_per_epoch,
                            mix_seed(cfg.seed, detail::kBatchTag,
                                     static_cast<std::uint64_t>(n),
                                     static_cast<std::uint64_t>(t),
                                     static_cast<std::uint64_t>(e)));
      for (int m = 1; m <= cfg.batches_per_epoch; ++m) {
        const long i = step_index(t, e, m, cfg.epochs, cfg.batches_per_epoch);
        const double eta = sched.eta(i);
        const bool will_log = cfg.log_every_step || sync.is_sync(i);

        // Reference for the aggregate-variance samples: the p-weighted full
        // (shard) client gradient at the same pre-step parameters the
        // stochastic step is about to use.
        Vector full_ref;
        if (cfg.log_variance_samples && will_log) {
          for (int n = 0; n < N; ++n) {
            Vector g = task.full_shard_gradient(n, state.client_params[n],
                                                state.server_params)
                           .client;
            if (n == 0)
              full_ref = p(0) * g;
            else
              full_ref += p(n) * g;
          }
        }

        std::vector<std::vector<int>> batches;
        batches.reserve(static_cast<std::size_t>(N));
        for (int n = 0; n < N; ++n)
          batches.push_back(
              plans[static_cast<std::size_t>(n)].batches[static_cast<std::size_t>(m - 1)]);

        StepDiag diag;
        try {
          diag = minibatch_sfl_step(task, state, batches, eta, eta);
        } catch (const NumericError& err) {
          lb.abort(i, err.what());
          return lb.take();
        }
        const bool synced = maybe_sync(state, sync, p);
        if (will_log) {
          double dev = std::numeric_limits<double>::quiet_NaN();
          if (cfg.log_variance_samples)
            dev = (diag.agg_client_grad - full_ref).squaredNorm();
          lb.record_step(i, t, e, m, eta, eta, state.client_params,
                         state.server_params, diag, synced, dev);
        }
        if (cfg.trace_params) lb.push_trace(state.client_params, state.server_params);
      }
    }
  }
  lb.finalize(state.client_params, state.server_params);
  return lb.take();
}

namespace detail {

void validate_config(const TrainConfig& cfg, const SplitTask& task) {
  if (cfg.rounds < 1 || cfg.epochs < 1 || cfg.batches_per_epoch < 1)
    throw std::invalid_argument("config: rounds, epochs, batches_per_epoch must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (task.num_clients() < 1) throw std::invalid_argument("config: task has no clients");
  if (cfg.schedule.mode == ScheduleParams::Mode::kConstant) {
    if (!(cfg.schedule.constant_lr > 0))
      throw std::invalid_argument("config: constant learning rate must be positive");
  } else {
    if (!(cfg.schedule.mu > 0) || !(cfg.schedule.smoothness > 0))
      throw std::invalid_argument("config: diminishing schedule needs mu > 0 and smoothness > 0");
  }
}

LogBuilder::LogBuilder(std::string algo, const TrainConfig& cfg, const SplitTask& task,
                       int cut_metric, double gamma_or_nan)
    : task_(task), cfg_(cfg) {
  log_.algorithm = std::move(algo);
  log_.seed = cfg.seed;
  log_.T = cfg.rounds;
  log_.E = cfg.epochs;
  log_.M = cfg.batches_per_epoch;
  log_.B = cfg.batch_size;
  log_.N = task.num_clients();
  log_.cut = cut_metric;
  log_.gamma = gamma_or_nan;
  has_opt_ = task.has_optimum();
  if (has_opt_) {
    opt_c_ = task.optimum_client();
    opt_s_ = task.optimum_server();
  }
}

Vector LogBuilder::client_mean(const std::vector<Vector>& clients) const {
  if (clients.size() == 1) return clients[0];
  return weighted_mean(clients, task_.client_weights());
}

void LogBuilder::record_initial(const std::vector<Vector>& clients,
                                const Vector& server_view) {
  StepRecord rec;
  rec.i = 0;
  Vector wbar = client_mean(clients);
  if (has_opt_) {
    rec.dist_sq_client = (wbar - opt_c_).squaredNorm();
    rec.dist_sq_server = (server_view - opt_s_).squaredNorm();
    rec.dist_sq_to_wstar = rec.dist_sq_client + rec.dist_sq_server;
  }
  rec.client_divergence =
      clients.size() > 1 ? weighted_spread(clients, task_.client_weights()) : 0.0;
  EvalResult ev = task_.evaluate(wbar, server_view);
  rec.loss = ev.loss;
  rec.accuracy = ev.accuracy;
  log_.steps.push_back(std::move(rec));
}

void LogBuilder::record_step(long i, int t, int e, int m, double eta_c, double eta_s,
                             const std::vector<Vector>& clients,
                             const Vector& server_view, const StepDiag& diag,
                             bool synced, double agg_dev_sq) {
  StepRecord rec;
  rec.i = i;
  rec.t = t;
  rec.e = e;
  rec.m = m;
  rec.eta_c = eta_c;
  rec.eta_s = eta_s;
  Vector wbar = client_mean(clients);
  if (has_opt_) {
    rec.dist_sq_client = (wbar - opt_c_).squaredNorm();
    rec.dist_sq_server = (server_view - opt_s_).squaredNorm();
    rec.dist_sq_to_wstar = rec.dist_sq_client + rec.dist_sq_server;
  }
  rec.client_divergence =
      clients.size() > 1 ? weighted_spread(clients, task_.client_weights()) : 0.0;
  rec.batch_loss = diag.batch_loss;
  rec.max_full_sq_grad_norm = diag.max_full_sq_grad_norm;
  rec.agg_grad_dev_sq = agg_dev_sq;
  if (synced || cfg_.eval_every_log) {
    EvalResult ev = task_.evaluate(wbar, server_view);
    rec.loss = ev.loss;
    rec.accuracy = ev.accuracy;
  }
  if (cfg_.log_client_grads && !diag.client_grads.empty())
    rec.client_grads = diag.client_grads;
  log_.steps.push_back(std::move(rec));
  if (cfg_.log_client_grads && log_.cut > 0 && !log_.steps.back().client_grads.empty()) {
    StepRecord& back = log_.steps.back();
    back.grad_var_across_clients = grad_variance_across_clients(log_, i);
    double sum = 0.0;
    int counted = 0;
    for (int n = 0; n < log_.N; ++n) {
      double v = grad_variance_at_client(log_, n, i, 0);
      if (std::isfinite(v)) {
        sum += v;
        ++counted;
      }
    }
    back.grad_var_at_client_mean =
        counted > 0 ? sum / counted : std::numeric_limits<double>::quiet_NaN();
  }
}

void LogBuilder::push_trace(const std::vector<Vector>& clients,
                            const Vector& server_view) {
  log_.client_trace.push_back(clients);
  log_.server_trace.push_back(server_view);
}

void LogBuilder::push_trace_per_client_server(const std::vector<Vector>& clients,
                                              const std::vector<Vector>& servers) {
  log_.client_trace.push_back(clients);
  log_.server_trace_per_client.push_back(servers);
}

void LogBuilder::finalize(const std::vector<Vector>& clients,
                          const Vector& server_view) {
  log_.final_client_mean = client_mean(clients);
  log_.final_server = server_view;
  EvalResult ev = task_.evaluate(log_.final_client_mean, log_.final_server);
  log_.final_loss = ev.loss;
  log_.final_accuracy = ev.accuracy;
}

void LogBuilder::abort(long i, const std::string& why) {
  log_.aborted_at = i;
  log_.abort_reason = why;
}

}  // namespace detail

}  // namespace sfl
