#pragma once

#include "sfl/protocol.hpp"

namespace sfl {

// gamma = max(8*smoothness/mu - 1, E*M): the shift that keeps the diminishing
// schedule below 1/(4*smoothness) from step 1 on and no faster than the
// sync interval decays.
double gamma(double smoothness, double mu, int E, int M);

// Diminishing step size 2 / (mu * (gamma + i)). `i` is the lr index; step k
// of a run uses lr index k-1, so lr_at(0, ...) is the first step's rate (the
// one point that may still exceed 1/(4*smoothness)).
double lr_at(long i, double mu, double gamma_value);

// Schedule with gamma resolved against the run geometry.
struct ResolvedSchedule {
  ScheduleParams params;
  double gamma_value = 0.0;  // meaningful in diminishing mode

  // Learning rate used by (1-based) step i.
  double eta(long i) const {
    return params.mode == ScheduleParams::Mode::kConstant
               ? params.constant_lr
               : lr_at(i - 1, params.mu, gamma_value);
  }
};

ResolvedSchedule resolve_schedule(const ScheduleParams& params, int E, int M);

// FedAvg baseline: every client takes E*M local SGD steps per round on the
// full model (direct unsplit gradients), full models are p-averaged at round
// ends. Batch streams and schedule match run_training for the same seed.
RunLog run_fedavg(const TrainConfig& cfg, const SplitTask& task);

// SFL-V2-style baseline: clients forward in parallel, then the server takes
// one SGD step per client *sequentially*, each client's feedback coming from
// the server parameters in effect at its turn. Client updates and sync follow
// the protocol.
RunLog run_sfl_v2(const TrainConfig& cfg, const SplitTask& task);

// Centralized SGD on the pooled data: one batch of B per step, T*E*M steps.
RunLog run_centralized(const TrainConfig& cfg, const SplitTask& task);

// Large-batch SGD on a single global model: each step averages the clients'
// batch gradients with weights p_n (no normalization) and takes one step.
RunLog run_minibatch_sgd(const TrainConfig& cfg, const SplitTask& task);

}  // namespace sfl
