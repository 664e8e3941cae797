#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "sfl/task.hpp"
#include "sfl/types.hpp"

namespace sfl {

// Global SGD-step index: round t, local epoch e, batch m, all 1-based.
long step_index(int t, int e, int m, int E, int M);

// The synchronization set: step indices {t*E*M, t = 1..T} at which client
// models are aggregated.
std::vector<long> sync_points(int T, int E, int M);

struct SyncSchedule {
  int T = 1, E = 1, M = 1;
  bool is_sync(long i) const {
    return i > 0 && i % (static_cast<long>(E) * M) == 0;
  }
};

// Learning-rate policy. Constant mode ignores mu/smoothness; diminishing mode
// follows 2 / (mu * (gamma + lr-index)) where the lr-index of step i is i-1.
struct ScheduleParams {
  enum class Mode { kConstant, kDiminishing };
  Mode mode = Mode::kConstant;
  double constant_lr = 0.01;
  double mu = 1.0;
  double smoothness = 1.0;
};

// Knobs for a single training run. The master seed fully determines the
// initialization and every batch, independent of scheduling or threading.
struct TrainConfig {
  int rounds = 1;             // T
  int epochs = 5;             // E
  int batches_per_epoch = 1;  // M
  int batch_size = 32;        // B
  ScheduleParams schedule;
  std::uint64_t seed = 0;
  bool log_every_step = false;     // default: sync points only
  bool eval_every_log = false;     // evaluate() at every logged step
  bool log_client_grads = false;   // keep per-client gradients in the log
  bool log_variance_samples = false;  // also log ||agg stochastic - agg full||^2
  bool trace_params = false;       // keep full parameters at every step
  bool sfl_v2_shuffle = false;     // seeded per-round client order for SFL-V2
};

struct StepRecord {
  long i = 0;
  int t = 0, e = 0, m = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double dist_sq_to_wstar = std::numeric_limits<double>::quiet_NaN();
  double dist_sq_server = std::numeric_limits<double>::quiet_NaN();
  double dist_sq_client = std::numeric_limits<double>::quiet_NaN();
  double eta_c = std::numeric_limits<double>::quiet_NaN();
  double eta_s = std::numeric_limits<double>::quiet_NaN();
  double grad_var_at_client_mean = std::numeric_limits<double>::quiet_NaN();
  double grad_var_across_clients = std::numeric_limits<double>::quiet_NaN();
  double client_divergence = std::numeric_limits<double>::quiet_NaN();
  double agg_grad_dev_sq = std::numeric_limits<double>::quiet_NaN();
  double batch_loss = std::numeric_limits<double>::quiet_NaN();
  double max_full_sq_grad_norm = std::numeric_limits<double>::quiet_NaN();
  std::vector<Vector> client_grads;  // client-side grads when logging them
};

struct RunLog {
  std::string algorithm;
  std::uint64_t seed = 0;
  int T = 0, E = 0, M = 0, B = 0, N = 0;
  int cut = 0;  // client-side layer count (dense) / coordinate count (quadratic)
  double gamma = std::numeric_limits<double>::quiet_NaN();
  std::vector<StepRecord> steps;  // first entry is the i=0 baseline

  // Optional (trace_params): parameters after every step, index 0 = initial.
  std::vector<std::vector<Vector>> client_trace;
  std::vector<Vector> server_trace;
  std::vector<std::vector<Vector>> server_trace_per_client;  // fedavg only

  Vector final_client_mean, final_server;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  double final_accuracy = std::numeric_limits<double>::quiet_NaN();
  long aborted_at = -1;
  std::string abort_reason;
};

// Orchestrator-owned state of one split-training run.
struct SplitState {
  std::vector<Vector> client_params;  // w_{c,n}
  Vector server_params;               // w_s
  long step = 0;                      // last completed step index
};

struct StepDiag {
  double batch_loss = 0.0;            // weighted mean of per-client batch losses
  std::vector<Vector> client_grads;   // stochastic client-side gradients
  Vector agg_client_grad;             // sum_n p_n * grad_n (client side)
  double max_full_sq_grad_norm = 0.0; // max_n ||(g_client,n ; g_server,n)||^2
};

// One protocol step: every client forwards its batch, the server takes a
// single step on the weight-normalized average of the per-client server
// gradients, and every client steps on feedback computed from the
// *pre-update* server parameters. Advances state.step by one.
StepDiag minibatch_sfl_step(const SplitTask& task, SplitState& state,
                            const std::vector<std::vector<int>>& batches,
                            double eta_c, double eta_s);

// Replaces every client model with the p-weighted average when state.step is
// a sync point. Returns whether a sync happened.
bool maybe_sync(SplitState& state, const SyncSchedule& sched, const Vector& weights);

// Weighted sum of same-sized vectors accumulated in ascending index order.
// Weights must sum to 1 within 1e-12.
Vector weighted_mean(const std::vector<Vector>& vectors, const Vector& weights);

// sum_n p_n ||v_n - v_bar||^2 computed in the pairwise form
// 0.5 * sum_{n,m} p_n p_m ||v_n - v_m||^2, which is exactly zero whenever all
// vectors are bitwise identical.
double weighted_spread(const std::vector<Vector>& vectors, const Vector& weights);

// Full MiniBatch-SFL training run.
RunLog run_training(const TrainConfig& cfg, const SplitTask& task);

}  // namespace sfl
