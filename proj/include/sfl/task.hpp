#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "sfl/data.hpp"
#include "sfl/nn.hpp"
#include "sfl/types.hpp"

namespace sfl {

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;  // NaN for tasks without a notion of accuracy
};

// A split optimization problem over sharded data: per-client losses whose
// parameters divide into a client-side part and a server-side part, exposed
// both as the three-phase split pipeline (client forward -> server backward ->
// client backward) and as a direct unsplit gradient route. Parameters travel
// as flat vectors so the training loops stay task-agnostic.
class SplitTask {
 public:
  virtual ~SplitTask() = default;

  virtual int num_clients() const = 0;
  virtual const Vector& client_weights() const = 0;
  virtual const std::vector<Shard>& shards() const = 0;
  virtual int client_dim() const = 0;
  virtual int server_dim() const = 0;

  // Client/server halves of one seed-determined joint initial point, so both
  // calls with the same seed describe a single model draw.
  virtual Vector init_client(std::uint64_t seed) const = 0;
  virtual Vector init_server(std::uint64_t seed) const = 0;

  // Phase 1: run the batch through the client part.
  virtual ClientForward client_forward(int client, const Vector& client_params,
                                       const std::vector<int>& batch) const = 0;

  struct ServerOut {
    double loss = 0.0;
    Vector grad_server;       // dLoss/d(server params), flat
    Matrix grad_wrt_smashed;  // feedback for phase 3
  };

  // Phase 2, per client: loss + gradients at the given server parameters.
  virtual ServerOut server_backward(const Vector& server_params,
                                    const ClientForward& act) const = 0;

  // Phase 3: finish the client-side gradient from the server's feedback.
  virtual Vector client_backward(int client, const Vector& client_params,
                                 const ClientForward& act,
                                 const Matrix& grad_wrt_smashed) const = 0;

  struct FullGrad {
    double loss = 0.0;
    Vector client;
    Vector server;
  };

  // Unsplit route: one direct pass over the same batch loss.
  virtual FullGrad full_gradient(int client, const Vector& client_params,
                                 const Vector& server_params,
                                 const std::vector<int>& batch) const = 0;

  // Full-shard (expected) gradient for one client.
  FullGrad full_shard_gradient(int client, const Vector& client_params,
                               const Vector& server_params) const {
    return full_gradient(client, client_params, server_params,
                         shards()[client].indices);
  }

  // Global objective on the task's evaluation data.
  virtual EvalResult evaluate(const Vector& client_params,
                              const Vector& server_params) const = 0;

  // Divisor for the per-client gradient-variance metrics: client-side layer
  // count for dense models, client-side coordinate count otherwise.
  virtual int client_units() const { return client_dim(); }

  virtual bool has_optimum() const { return false; }
  virtual Vector optimum_client() const {
    throw std::logic_error("task has no closed-form optimum");
  }
  virtual Vector optimum_server() const {
    throw std::logic_error("task has no closed-form optimum");
  }
};

// Dense-network task: the model defined by `specs` is cut after `cut_layer`;
// batches are rows of `data` addressed through the shards. Evaluation runs on
// a separate dataset (pass the training data itself to evaluate in-sample).
class DenseSplitTask final : public SplitTask {
 public:
  DenseSplitTask(Dataset data, std::vector<Shard> shards, Vector weights,
                 std::vector<LayerSpec> specs, int cut_layer, Dataset eval_data);

  int num_clients() const override { return static_cast<int>(shards_.size()); }
  const Vector& client_weights() const override { return weights_; }
  const std::vector<Shard>& shards() const override { return shards_; }
  int client_dim() const override { return client_dim_; }
  int server_dim() const override { return server_dim_; }
  Vector init_client(std::uint64_t seed) const override;
  Vector init_server(std::uint64_t seed) const override;
  ClientForward client_forward(int client, const Vector& client_params,
                               const std::vector<int>& batch) const override;
  ServerOut server_backward(const Vector& server_params,
                            const ClientForward& act) const override;
  Vector client_backward(int client, const Vector& client_params,
                         const ClientForward& act,
                         const Matrix& grad_wrt_smashed) const override;
  FullGrad full_gradient(int client, const Vector& client_params,
                         const Vector& server_params,
                         const std::vector<int>& batch) const override;
  EvalResult evaluate(const Vector& client_params,
                      const Vector& server_params) const override;

  int client_units() const override { return cut_layer_; }

  int cut_layer() const { return cut_layer_; }
  const std::vector<LayerSpec>& specs() const { return specs_; }

 private:
  Matrix batch_inputs(const std::vector<int>& batch) const;
  Targets batch_targets(const std::vector<int>& batch) const;
  ModelParams client_shaped(const Vector& flat) const;
  ModelParams server_shaped(const Vector& flat) const;
  ModelParams joined(const Vector& client_flat, const Vector& server_flat) const;

  Dataset data_;
  Dataset eval_;
  std::vector<Shard> shards_;
  Vector weights_;
  std::vector<LayerSpec> specs_;
  int cut_layer_ = 0;
  Activation head_ = Activation::kIdentity;
  ModelParams client_template_;  // shapes only
  ModelParams server_template_;
  int client_dim_ = 0;
  int server_dim_ = 0;
};

// Separable quadratic task: parameters are a single d-vector whose first
// `client_dims` coordinates live on the clients. The "smashed data" a client
// sends is simply the server-coordinate slice of its batch.
class QuadraticSplitTask final : public SplitTask {
 public:
  // init_scale 0 starts every run at the origin; otherwise the initial point
  // is init_scale * N(0, I), drawn jointly for both halves.
  QuadraticSplitTask(QuadraticTask task, int client_dims, double init_scale);

  int num_clients() const override {
    return static_cast<int>(task_.shards.size());
  }
  const Vector& client_weights() const override { return task_.weights; }
  const std::vector<Shard>& shards() const override { return task_.shards; }
  int client_dim() const override { return client_dims_; }
  int server_dim() const override {
    return static_cast<int>(task_.centers.cols()) - client_dims_;
  }
  Vector init_client(std::uint64_t seed) const override;
  Vector init_server(std::uint64_t seed) const override;
  ClientForward client_forward(int client, const Vector& client_params,
                               const std::vector<int>& batch) const override;
  ServerOut server_backward(const Vector& server_params,
                            const ClientForward& act) const override;
  Vector client_backward(int client, const Vector& client_params,
                         const ClientForward& act,
                         const Matrix& grad_wrt_smashed) const override;
  FullGrad full_gradient(int client, const Vector& client_params,
                         const Vector& server_params,
                         const std::vector<int>& batch) const override;
  EvalResult evaluate(const Vector& client_params,
                      const Vector& server_params) const override;
  bool has_optimum() const override { return true; }
  Vector optimum_client() const override {
    return task_.w_star.head(client_dims_);
  }
  Vector optimum_server() const override {
    return task_.w_star.tail(server_dim());
  }

  const QuadraticTask& quadratic() const { return task_; }

 private:
  Vector joint_init(std::uint64_t seed) const;

  QuadraticTask task_;
  int client_dims_ = 0;
  double init_scale_ = 0.0;
};

// Empirical bounds on the heterogeneity/noise constants, taken as maxima over
// seeded random parameter probes and batches. These estimate lower bounds of
// the true suprema: a finite probe set can only ever under-cover them.
struct ConstantsEstimate {
  double R_hat = 0.0;      // max observed stochastic-gradient norm
  double delta_hat = 0.0;  // max observed || grad f_n - grad F ||
  Vector sigma_sq;         // per client: max over probes of the mean squared
                           // batch-gradient deviation from the shard gradient
};

ConstantsEstimate estimate_constants(const SplitTask& task, int probes,
                                     int batches_per_probe, int batch_size,
                                     std::uint64_t seed);

}  // namespace sfl
