#include "sfl/task.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace sfl {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

}  // namespace

DenseSplitTask::DenseSplitTask(Dataset data, std::vector<Shard> shards,
                               Vector weights, std::vector<LayerSpec> specs,
                               int cut_layer, Dataset eval_data)
    : data_(std::move(data)),
      eval_(std::move(eval_data)),
      shards_(std::move(shards)),
      weights_(std::move(weights)),
      specs_(std::move(specs)),
      cut_layer_(cut_layer) {
  validate_specs(specs_);
  const int L = static_cast<int>(specs_.size());
  if (cut_layer_ < 0 || cut_layer_ > L) {
    std::ostringstream os;
    os << "cut_layer " << cut_layer_ << " outside [0, " << L << "]";
    throw std::invalid_argument(os.str());
  }
  if (specs_.front().input_dim != data_.dim()) {
    std::ostringstream os;
    os << "model expects " << specs_.front().input_dim
       << " inputs but data has " << data_.dim();
    throw std::invalid_argument(os.str());
  }
  if (weights_.size() != static_cast<long>(shards_.size()))
    throw std::invalid_argument("client weight count mismatch");
  if (std::abs(weights_.sum() - 1.0) > 1e-12)
    throw std::invalid_argument("client weights sum to " +
                                format_full(weights_.sum()) + ", expected 1");
  head_ = specs_.back().activation;
  ModelParams proto = init_model(specs_, 0);
  auto [c, s] = split_model(proto, cut_layer_);
  client_template_ = std::move(c);
  server_template_ = std::move(s);
  client_dim_ = static_cast<int>(client_template_.param_count());
  server_dim_ = static_cast<int>(server_template_.param_count());
}

Matrix DenseSplitTask::batch_inputs(const std::vector<int>& batch) const {
  Matrix x(data_.dim(), batch.size());
  for (std::size_t j = 0; j < batch.size(); ++j)
    x.col(j) = data_.features.row(batch[j]).transpose();
  return x;
}

Targets DenseSplitTask::batch_targets(const std::vector<int>& batch) const {
  Targets t;
  t.is_classification = true;
  t.labels.resize(batch.size());
  for (std::size_t j = 0; j < batch.size(); ++j)
    t.labels(j) = data_.labels(batch[j]);
  return t;
}

ModelParams DenseSplitTask::client_shaped(const Vector& flat) const {
  ModelParams m = client_template_;
  unflatten(flat, m);
  return m;
}

ModelParams DenseSplitTask::server_shaped(const Vector& flat) const {
  ModelParams m = server_template_;
  unflatten(flat, m);
  return m;
}

ModelParams DenseSplitTask::joined(const Vector& client_flat,
                                   const Vector& server_flat) const {
  ModelParams full;
  full.specs = specs_;
  ModelParams c = client_shaped(client_flat);
  ModelParams s = server_shaped(server_flat);
  full.layers.reserve(specs_.size());
  for (auto& l : c.layers) full.layers.push_back(std::move(l));
  for (auto& l : s.layers) full.layers.push_back(std::move(l));
  return full;
}

Vector DenseSplitTask::init_client(std::uint64_t seed) const {
  ModelParams full = init_model(specs_, seed);
  auto [c, s] = split_model(full, cut_layer_);
  (void)s;
  return flatten(c);
}

Vector DenseSplitTask::init_server(std::uint64_t seed) const {
  ModelParams full = init_model(specs_, seed);
  auto [c, s] = split_model(full, cut_layer_);
  (void)c;
  return flatten(s);
}

ClientForward DenseSplitTask::client_forward(int client,
                                             const Vector& client_params,
                                             const std::vector<int>& batch) const {
  return forward_client(client_shaped(client_params), batch_inputs(batch),
                        batch_targets(batch), client);
}

SplitTask::ServerOut DenseSplitTask::server_backward(
    const Vector& server_params, const ClientForward& act) const {
  ModelParams part = server_shaped(server_params);
  ServerForward fwd = forward_server(part, act.smashed, head_);
  ServerBackward bwd = backward_server(part, fwd.cache);
  ServerOut out;
  out.loss = fwd.loss;
  out.grad_server = flatten(bwd.grads);
  out.grad_wrt_smashed = std::move(bwd.grad_wrt_smashed);
  return out;
}

Vector DenseSplitTask::client_backward(int client, const Vector& client_params,
                                       const ClientForward& act,
                                       const Matrix& grad_wrt_smashed) const {
  (void)client;
  ModelParams part = client_shaped(client_params);
  return flatten(backward_client(part, act.cache, grad_wrt_smashed));
}

SplitTask::FullGrad DenseSplitTask::full_gradient(
    int client, const Vector& client_params, const Vector& server_params,
    const std::vector<int>& batch) const {
  (void)client;
  ModelParams full = joined(client_params, server_params);
  LossGrad lg = loss_and_grad(full, batch_inputs(batch), batch_targets(batch));
  auto [gc, gs] = split_model(lg.grads, cut_layer_);
  FullGrad out;
  out.loss = lg.loss;
  out.client = flatten(gc);
  out.server = flatten(gs);
  return out;
}

EvalResult DenseSplitTask::evaluate(const Vector& client_params,
                                    const Vector& server_params) const {
  ModelParams full = joined(client_params, server_params);
  Matrix x(eval_.dim(), eval_.size());
  for (long j = 0; j < eval_.size(); ++j)
    x.col(j) = eval_.features.row(j).transpose();
  Targets t;
  t.is_classification = true;
  t.labels = eval_.labels;
  // Forward through the whole model via the split pipeline with an empty
  // client part (pure pass-through).
  ClientForward pass = forward_client(ModelParams{}, x, t, -1);
  ServerForward fwd = forward_server(full, pass.smashed, head_);
  EvalResult out;
  out.loss = fwd.loss;
  out.accuracy = head_ == Activation::kSoftmaxXentHead
                     ? accuracy_from_logits(fwd.cache.acts.back(), t.labels)
                     : kNan;
  return out;
}

QuadraticSplitTask::QuadraticSplitTask(QuadraticTask task, int client_dims,
                                       double init_scale)
    : task_(std::move(task)), client_dims_(client_dims), init_scale_(init_scale) {
  const int d = static_cast<int>(task_.centers.cols());
  if (client_dims_ < 0 || client_dims_ > d) {
    std::ostringstream os;
    os << "client_dims " << client_dims_ << " outside [0, " << d << "]";
    throw std::invalid_argument(os.str());
  }
}

Vector QuadraticSplitTask::joint_init(std::uint64_t seed) const {
  const int d = static_cast<int>(task_.centers.cols());
  if (init_scale_ == 0.0) return Vector::Zero(d);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector w(d);
  for (int j = 0; j < d; ++j) w(j) = init_scale_ * gauss(rng);
  return w;
}

Vector QuadraticSplitTask::init_client(std::uint64_t seed) const {
  return joint_init(seed).head(client_dims_);
}

Vector QuadraticSplitTask::init_server(std::uint64_t seed) const {
  return joint_init(seed).tail(server_dim());
}

ClientForward QuadraticSplitTask::client_forward(
    int client, const Vector& client_params, const std::vector<int>& batch) const {
  (void)client_params;
  if (batch.empty()) throw std::invalid_argument("empty batch");
  ClientForward out;
  out.smashed.client_id = client;
  out.smashed.activations.resize(server_dim(), batch.size());
  out.cache.input.resize(client_dims_, batch.size());
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto row = task_.centers.row(batch[j]);
    out.cache.input.col(j) = row.head(client_dims_).transpose();
    out.smashed.activations.col(j) = row.tail(server_dim()).transpose();
  }
  return out;
}

SplitTask::ServerOut QuadraticSplitTask::server_backward(
    const Vector& server_params, const ClientForward& act) const {
  ServerOut out;
  const long B = act.smashed.activations.cols();
  const Vector mean = act.smashed.activations.rowwise().mean();
  out.grad_server = server_params - mean;
  double loss = 0.0;
  for (long j = 0; j < B; ++j)
    loss += 0.5 * (server_params - act.smashed.activations.col(j)).squaredNorm();
  out.loss = loss / static_cast<double>(B);
  out.grad_wrt_smashed = Matrix();  // separable: nothing flows back
  return out;
}

Vector QuadraticSplitTask::client_backward(int client,
                                           const Vector& client_params,
                                           const ClientForward& act,
                                           const Matrix& grad_wrt_smashed) const {
  (void)client;
  (void)grad_wrt_smashed;
  if (client_dims_ == 0) return Vector(0);
  return client_params - act.cache.input.rowwise().mean();
}

SplitTask::FullGrad QuadraticSplitTask::full_gradient(
    int client, const Vector& client_params, const Vector& server_params,
    const std::vector<int>& batch) const {
  (void)client;
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const int d = static_cast<int>(task_.centers.cols());
  Vector mean = Vector::Zero(d);
  double loss = 0.0;
  Vector w(d);
  w.head(client_dims_) = client_params;
  w.tail(server_dim()) = server_params;
  for (int idx : batch) {
    const Vector c = task_.centers.row(idx).transpose();
    mean += c;
    loss += 0.5 * (w - c).squaredNorm();
  }
  mean /= static_cast<double>(batch.size());
  FullGrad out;
  out.loss = loss / static_cast<double>(batch.size());
  Vector g = w - mean;
  out.client = g.head(client_dims_);
  out.server = g.tail(server_dim());
  return out;
}

EvalResult QuadraticSplitTask::evaluate(const Vector& client_params,
                                        const Vector& server_params) const {
  const int d = static_cast<int>(task_.centers.cols());
  Vector w(d);
  w.head(client_dims_) = client_params;
  w.tail(server_dim()) = server_params;
  double loss = 0.0;
  for (int n = 0; n < num_clients(); ++n) {
    loss += task_.weights(n) *
            (0.5 * (w - task_.client_means.row(n).transpose()).squaredNorm() +
             task_.within_value(n));
  }
  return {loss, kNan};
}

ConstantsEstimate estimate_constants(const SplitTask& task, int probes,
                                     int batches_per_probe, int batch_size,
                                     std::uint64_t seed) {
  if (probes <= 0 || batches_per_probe <= 0)
    throw std::invalid_argument("estimate_constants: probes and batches must be positive");
  const int N = task.num_clients();
  const Vector& p = task.client_weights();
  ConstantsEstimate est;
  est.sigma_sq = Vector::Zero(N);
  double max_sq_norm = 0.0;
  for (int q = 0; q < probes; ++q) {
    const std::uint64_t probe_seed = mix_seed(seed, 0xE5, q);
    const Vector wc = task.init_client(probe_seed);
    const Vector ws = task.init_server(probe_seed);

    std::vector<Vector> shard_grads(N);
    Vector grad_f(task.client_dim() + task.server_dim());
    grad_f.setZero();
    for (int n = 0; n < N; ++n) {
      auto g = task.full_shard_gradient(n, wc, ws);
      Vector flat(g.client.size() + g.server.size());
      flat << g.client, g.server;
      shard_grads[n] = std::move(flat);
      grad_f += p(n) * shard_grads[n];
    }
    for (int n = 0; n < N; ++n)
      est.delta_hat = std::max(est.delta_hat, (shard_grads[n] - grad_f).norm());

    for (int n = 0; n < N; ++n) {
      const BatchPlan plan =
          make_batch_plan(task.shards()[n], batch_size, batches_per_probe,
                          mix_seed(seed, 0xB, q, n));
      double mean_dev = 0.0;
      for (const auto& batch : plan.batches) {
        auto g = task.full_gradient(n, wc, ws, batch);
        Vector flat(g.client.size() + g.server.size());
        flat << g.client, g.server;
        max_sq_norm = std::max(max_sq_norm, flat.squaredNorm());
        mean_dev += (flat - shard_grads[n]).squaredNorm();
      }
      mean_dev /= static_cast<double>(batches_per_probe);
      est.sigma_sq(n) = std::max(est.sigma_sq(n), mean_dev);
    }
  }
  est.R_hat = std::sqrt(max_sq_norm);
  return est;
}

}  // namespace sfl
