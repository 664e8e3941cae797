#include "sfl/algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "run_util.hpp"

namespace sfl {

double gamma(double smoothness, double mu, int E, int M) {
  if (!(mu > 0) || !(smoothness > 0))
    throw std::invalid_argument("gamma: mu and smoothness must be positive");
  if (E < 1 || M < 1) throw std::invalid_argument("gamma: E and M must be >= 1");
  return std::max(8.0 * smoothness / mu - 1.0, static_cast<double>(E) * M);
}

double lr_at(long i, double mu, double gamma_value) {
  if (!(mu > 0)) throw std::invalid_argument("lr_at: mu must be positive");
  if (!(gamma_value + static_cast<double>(i) > 0))
    throw std::invalid_argument("lr_at: gamma + i must be positive");
  return 2.0 / (mu * (gamma_value + static_cast<double>(i)));
}

ResolvedSchedule resolve_schedule(const ScheduleParams& params, int E, int M) {
  ResolvedSchedule out;
  out.params = params;
  if (params.mode == ScheduleParams::Mode::kConstant) {
    if (!(params.constant_lr > 0))
      throw std::invalid_argument("resolve_schedule: constant learning rate must be positive");
  } else {
    out.gamma_value = gamma(params.smoothness, params.mu, E, M);
  }
  return out;
}

namespace {

double run_gamma(const TrainConfig& cfg, const ResolvedSchedule& sched) {
  return cfg.schedule.mode == ScheduleParams::Mode::kDiminishing
             ? sched.gamma_value
             : std::numeric_limits<double>::quiet_NaN();
}

void check_finite_or_throw(const Vector& v, long step, const char* what) {
  if (!v.allFinite())
    throw NumericError("step " + std::to_string(step) + ": non-finite " + what);
}

}  // namespace

RunLog run_fedavg(const TrainConfig& cfg, const SplitTask& task) {
  detail::validate_config(cfg, task);
  const int N = task.num_clients();
  const Vector& p = task.client_weights();
  const ResolvedSchedule sched = resolve_schedule(cfg.schedule, cfg.epochs,
                                                  cfg.batches_per_epoch);
  const SyncSchedule sync{cfg.rounds, cfg.epochs, cfg.batches_per_epoch};

  std::vector<Vector> clients(static_cast<std::size_t>(N),
                              task.init_client(mix_seed(cfg.seed, detail::kInitTag)));
  std::vector<Vector> servers(static_cast<std::size_t>(N),
                              task.init_server(mix_seed(cfg.seed, detail::kInitTag)));

  detail::LogBuilder lb("fedavg", cfg, task, task.client_units(),
                        run_gamma(cfg, sched));
  lb.record_initial(clients, servers[0]);
  if (cfg.trace_params) lb.push_trace_per_client_server(clients, servers);

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
        StepDiag diag;
        diag.client_grads.resize(static_cast<std::size_t>(N));
        try {
          for (int n = 0; n < N; ++n) {
            const auto& batch =
                plans[static_cast<std::size_t>(n)].batches[static_cast<std::size_t>(m - 1)];
            SplitTask::FullGrad g =
                task.full_gradient(n, clients[static_cast<std::size_t>(n)],
                                   servers[static_cast<std::size_t>(n)], batch);
            diag.batch_loss += p(n) * g.loss;
            diag.max_full_sq_grad_norm =
                std::max(diag.max_full_sq_grad_norm,
                         g.client.squaredNorm() + g.server.squaredNorm());
            if (n == 0)
              diag.agg_client_grad = p(0) * g.client;
            else
              diag.agg_client_grad += p(n) * g.client;
            if (g.client.size() > 0) {
              clients[static_cast<std::size_t>(n)] -= eta * g.client;
              check_finite_or_throw(clients[static_cast<std::size_t>(n)], i,
                                    "client parameters");
            }
            if (g.server.size() > 0) {
              servers[static_cast<std::size_t>(n)] -= eta * g.server;
              check_finite_or_throw(servers[static_cast<std::size_t>(n)], i,
                                    "server parameters");
            }
            diag.client_grads[static_cast<std::size_t>(n)] = std::move(g.client);
          }
        } catch (const NumericError& err) {
          lb.abort(i, err.what());
          return lb.take();
        }
        const bool synced = sync.is_sync(i);
        if (synced) {
          Vector cbar = weighted_mean(clients, p);
          Vector sbar = weighted_mean(servers, p);
          for (auto& c : clients) c = cbar;
          for (auto& s : servers) s = sbar;
        }
        if (cfg.log_every_step || synced) {
          Vector server_view = synced ? servers[0] : weighted_mean(servers, p);
          lb.record_step(i, t, e, m, eta, eta, clients, server_view, diag, synced,
                         std::numeric_limits<double>::quiet_NaN());
        }
        if (cfg.trace_params) lb.push_trace_per_client_server(clients, servers);
      }
    }
  }
  lb.finalize(clients, weighted_mean(servers, p));
  return lb.take();
}

RunLog run_sfl_v2(const TrainConfig& cfg, const SplitTask& task) {
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

  detail::LogBuilder lb("sfl_v2", cfg, task, task.client_units(),
                        run_gamma(cfg, sched));
  lb.record_initial(state.client_params, state.server_params);
  if (cfg.trace_params) lb.push_trace(state.client_params, state.server_params);

  std::vector<int> order(static_cast<std::size_t>(N));
  std::vector<BatchPlan> plans(static_cast<std::size_t>(N));
  for (int t = 1; t <= cfg.rounds; ++t) {
    std::iota(order.begin(), order.end(), 0);
    if (cfg.sfl_v2_shuffle)
      seeded_shuffle(order, mix_seed(cfg.seed, detail::kOrderTag,
                                     static_cast<std::uint64_t>(t)));
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
        StepDiag diag;
        diag.client_grads.resize(static_cast<std::size_t>(N));
        try {
          std::vector<ClientForward> acts;
          acts.reserve(static_cast<std::size_t>(N));
          for (int n = 0; n < N; ++n)
            acts.push_back(task.client_forward(
                n, state.client_params[static_cast<std::size_t>(n)],
                plans[static_cast<std::size_t>(n)].batches[static_cast<std::size_t>(m - 1)]));

          // The server walks the clients one at a time, stepping after each;
          // a client's feedback reflects every earlier visit this step.
          for (int idx = 0; idx < N; ++idx) {
            const int n = order[static_cast<std::size_t>(idx)];
            SplitTask::ServerOut out =
                task.server_backward(state.server_params, acts[static_cast<std::size_t>(n)]);
            diag.batch_loss += p(n) * out.loss;
            if (out.grad_server.size() > 0) {
              state.server_params -= eta * out.grad_server;
              check_finite_or_throw(state.server_params, i, "server parameters");
            }
            Vector g = task.client_backward(
                n, state.client_params[static_cast<std::size_t>(n)],
                acts[static_cast<std::size_t>(n)], out.grad_wrt_smashed);
            diag.max_full_sq_grad_norm =
                std::max(diag.max_full_sq_grad_norm,
                         g.squaredNorm() + out.grad_server.squaredNorm());
            diag.client_grads[static_cast<std::size_t>(n)] = std::move(g);
          }
          for (int n = 0; n < N; ++n) {
            const Vector& g = diag.client_grads[static_cast<std::size_t>(n)];
            if (n == 0)
              diag.agg_client_grad = p(0) * g;
            else
              diag.agg_client_grad += p(n) * g;
            if (g.size() > 0) {
              state.client_params[static_cast<std::size_t>(n)] -= eta * g;
              check_finite_or_throw(state.client_params[static_cast<std::size_t>(n)], i,
                                    "client parameters");
            }
          }
        } catch (const NumericError& err) {
          lb.abort(i, err.what());
          return lb.take();
        }
        state.step = i;
        const bool synced = maybe_sync(state, sync, p);
        if (cfg.log_every_step || synced)
          lb.record_step(i, t, e, m, eta, eta, state.client_params,
                         state.server_params, diag, synced,
                         std::numeric_limits<double>::quiet_NaN());
        if (cfg.trace_params) lb.push_trace(state.client_params, state.server_params);
      }
    }
  }
  lb.finalize(state.client_params, state.server_params);
  return lb.take();
}

RunLog run_centralized(const TrainConfig& cfg, const SplitTask& task) {
  detail::validate_config(cfg, task);
  const ResolvedSchedule sched = resolve_schedule(cfg.schedule, cfg.epochs,
                                                  cfg.batches_per_epoch);
  const SyncSchedule sync{cfg.rounds, cfg.epochs, cfg.batches_per_epoch};

  Shard pooled;
  pooled.client_id = -1;
  for (const Shard& s : task.shards())
    pooled.indices.insert(pooled.indices.end(), s.indices.begin(), s.indices.end());

  Vector c = task.init_client(mix_seed(cfg.seed, detail::kInitTag));
  Vector s = task.init_server(mix_seed(cfg.seed, detail::kInitTag));
  std::vector<Vector> single{c};

  detail::LogBuilder lb("centralized", cfg, task, task.client_units(),
                        run_gamma(cfg, sched));
  lb.record_initial(single, s);
  if (cfg.trace_params) lb.push_trace(single, s);

  for (int t = 1; t <= cfg.rounds; ++t) {
    for (int e = 1; e <= cfg.epochs; ++e) {
      BatchPlan plan = make_batch_plan(
          pooled, cfg.batch_size, cfg.batches_per_epoch,
          mix_seed(cfg.seed, detail::kBatchTag, detail::kCentralTag,
                   static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(e)));
      for (int m = 1; m <= cfg.batches_per_epoch; ++m) {
        const long i = step_index(t, e, m, cfg.epochs, cfg.batches_per_epoch);
        const double eta = sched.eta(i);
        StepDiag diag;
        try {
          SplitTask::FullGrad g = task.full_gradient(
              0, single[0], s, plan.batches[static_cast<std::size_t>(m - 1)]);
          diag.batch_loss = g.loss;
          diag.max_full_sq_grad_norm =
              g.client.squaredNorm() + g.server.squaredNorm();
          diag.agg_client_grad = g.client;
          if (g.client.size() > 0) {
            single[0] -= eta * g.client;
            check_finite_or_throw(single[0], i, "client parameters");
          }
          if (g.server.size() > 0) {
            s -= eta * g.server;
            check_finite_or_throw(s, i, "server parameters");
          }
        } catch (const NumericError& err) {
          lb.abort(i, err.what());
          return lb.take();
        }
        const bool synced = sync.is_sync(i);
        if (cfg.log_every_step || synced)
          lb.record_step(i, t, e, m, eta, eta, single, s, diag, synced,
                         std::numeric_limits<double>::quiet_NaN());
        if (cfg.trace_params) lb.push_trace(single, s);
      }
    }
  }
  lb.finalize(single, s);
  return lb.take();
}

RunLog run_minibatch_sgd(const TrainConfig& cfg, const SplitTask& task) {
  detail::validate_config(cfg, task);
  const int N = task.num_clients();
  const Vector& p = task.client_weights();
  const ResolvedSchedule sched = resolve_schedule(cfg.schedule, cfg.epochs,
                                                  cfg.batches_per_epoch);
  const SyncSchedule sync{cfg.rounds, cfg.epochs, cfg.batches_per_epoch};

  std::vector<Vector> single{task.init_client(mix_seed(cfg.seed, detail::kInitTag))};
  Vector s = task.init_server(mix_seed(cfg.seed, detail::kInitTag));

  detail::LogBuilder lb("minibatch_sgd", cfg, task, task.client_units(),
                        run_gamma(cfg, sched));
  lb.record_initial(single, s);
  if (cfg.trace_params) lb.push_trace(single, s);

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
        StepDiag diag;
        diag.client_grads.resize(static_cast<std::size_t>(N));
        try {
          Vector acc_c, acc_s;
          for (int n = 0; n < N; ++n) {
            const auto& batch =
                plans[static_cast<std::size_t>(n)].batches[static_cast<std::size_t>(m - 1)];
            SplitTask::FullGrad g = task.full_gradient(n, single[0], s, batch);
            diag.batch_loss += p(n) * g.loss;
            diag.max_full_sq_grad_norm =
                std::max(diag.max_full_sq_grad_norm,
                         g.client.squaredNorm() + g.server.squaredNorm());
            if (n == 0) {
              acc_c = p(0) * g.client;
              acc_s = p(0) * g.server;
            } else {
              acc_c += p(n) * g.client;
              acc_s += p(n) * g.server;
            }
            diag.client_grads[static_cast<std::size_t>(n)] = std::move(g.client);
          }
          diag.agg_client_grad = acc_c;
          if (acc_c.size() > 0) {
            single[0] -= eta * acc_c;
            check_finite_or_throw(single[0], i, "client parameters");
          }
          if (acc_s.size() > 0) {
            s -= eta * acc_s;
            check_finite_or_throw(s, i, "server parameters");
          }
        } catch (const NumericError& err) {
          lb.abort(i, err.what());
          return lb.take();
        }
        const bool synced = sync.is_sync(i);
        if (cfg.log_every_step || synced)
          lb.record_step(i, t, e, m, eta, eta, single, s, diag, synced,
                         std::numeric_limits<double>::quiet_NaN());
        if (cfg.trace_params) lb.push_trace(single, s);
      }
    }
  }
  lb.finalize(single, s);
  return lb.take();
}

}  // namespace sfl
