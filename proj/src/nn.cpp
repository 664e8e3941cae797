#include "sfl/nn.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace sfl {

std::string format_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

long ModelParams::param_count() const {
  long n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void validate_specs(const std::vector<LayerSpec>& specs) {
  for (std::size_t k = 0; k < specs.size(); ++k) {
    if (specs[k].input_dim <= 0 || specs[k].output_dim <= 0) {
      std::ostringstream os;
      os << "layer " << k << ": dims must be positive, got "
         << specs[k].input_dim << "x" << specs[k].output_dim;
      throw std::invalid_argument(os.str());
    }
    if (k > 0 && specs[k].input_dim != specs[k - 1].output_dim) {
      std::ostringstream os;
      os << "layer " << k << ": input_dim " << specs[k].input_dim
         << " does not match layer " << k - 1 << " output_dim "
         << specs[k - 1].output_dim;
      throw std::invalid_argument(os.str());
    }
    if (specs[k].activation == Activation::kSoftmaxXentHead &&
        k + 1 != specs.size()) {
      std::ostringstream os;
      os << "layer " << k << ": softmax head is only legal on the last layer";
      throw std::invalid_argument(os.str());
    }
  }
}

ModelParams init_model(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
  if (specs.empty()) throw std::invalid_argument("init_model: empty spec list");
  validate_specs(specs);
  ModelParams m;
  m.specs = specs;
  m.layers.resize(specs.size());
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(specs[k].input_dim));
    std::uniform_real_distribution<double> unif(-scale, scale);
    Matrix w(specs[k].output_dim, specs[k].input_dim);
    for (int i = 0; i < w.rows(); ++i)
      for (int j = 0; j < w.cols(); ++j) w(i, j) = unif(rng);
    m.layers[k].weight = std::move(w);
    m.layers[k].bias = Vector::Zero(specs[k].output_dim);
  }
  return m;
}

std::pair<ModelParams, ModelParams> split_model(const ModelParams& model,
                                                int cut_layer) {
  const int L = model.num_layers();
  if (cut_layer < 0 || cut_layer > L) {
    std::ostringstream os;
    os << "split_model: cut_layer " << cut_layer << " outside [0, " << L << "]";
    throw std::invalid_argument(os.str());
  }
  ModelParams client, server;
  client.specs.assign(model.specs.begin(), model.specs.begin() + cut_layer);
  client.layers.assign(model.layers.begin(), model.layers.begin() + cut_layer);
  server.specs.assign(model.specs.begin() + cut_layer, model.specs.end());
  server.layers.assign(model.layers.begin() + cut_layer, model.layers.end());
  return {std::move(client), std::move(server)};
}

namespace {

Matrix apply_activation(Activation a, const Matrix& z) {
  switch (a) {
    case Activation::kIdentity:
    case Activation::kSoftmaxXentHead:  // head emits logits; loss handles the rest
      return z;
    case Activation::kRelu:
      return z.cwiseMax(0.0);
    case Activation::kTanh:
      return z.array().tanh().matrix();
  }
  throw std::invalid_argument("unknown activation");
}

// Elementwise d activation / d pre-activation. relu'(0) is defined as 0.
Matrix activation_grad(Activation a, const Matrix& z) {
  switch (a) {
    case Activation::kIdentity:
    case Activation::kSoftmaxXentHead:
      return Matrix::Ones(z.rows(), z.cols());
    case Activation::kRelu:
      return (z.array() > 0.0).cast<double>().matrix();
    case Activation::kTanh:
      return (1.0 - z.array().tanh().square()).matrix();
  }
  throw std::invalid_argument("unknown activation");
}

// Stable per-column softmax.
Matrix softmax_columns(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (int b = 0; b < logits.cols(); ++b) {
    const double mx = logits.col(b).maxCoeff();
    Vector e = (logits.col(b).array() - mx).exp().matrix();
    out.col(b) = e / e.sum();
  }
  return out;
}

void check_batch(const Matrix& inputs, const Targets& t) {
  if (inputs.cols() == 0) throw std::invalid_argument("empty batch");
  if (t.batch_size() != inputs.cols()) {
    std::ostringstream os;
    os << "batch has " << inputs.cols() << " samples but " << t.batch_size()
       << " targets";
    throw std::invalid_argument(os.str());
  }
}

// Forward through a (possibly empty) model part, recording caches.
Matrix forward_part(const ModelParams& part, const Matrix& inputs,
                    ForwardCache& cache) {
  cache.input = inputs;
  cache.pre_acts.clear();
  cache.acts.clear();
  Matrix cur = inputs;
  for (int k = 0; k < part.num_layers(); ++k) {
    if (cur.rows() != part.specs[k].input_dim) {
      std::ostringstream os;
      os << "layer " << k << ": got " << cur.rows() << " input rows, expected "
         << part.specs[k].input_dim;
      throw std::invalid_argument(os.str());
    }
    Matrix z = (part.layers[k].weight * cur).colwise() + part.layers[k].bias;
    Matrix a = apply_activation(part.specs[k].activation, z);
    cache.pre_acts.push_back(std::move(z));
    cur = a;
    cache.acts.push_back(cur);
  }
  return cur;
}

// Backward through a part. `grad_out` is dLoss/d(output of the part); when
// `grad_is_preact_of_last` the terminal activation derivative has already
// been folded in (softmax-xent case). Returns grads and dLoss/d(input).
std::pair<ModelParams, Matrix> backward_part(const ModelParams& part,
                                             const ForwardCache& cache,
                                             const Matrix& grad_out,
                                             bool grad_is_preact_of_last) {
  ModelParams grads;
  grads.specs = part.specs;
  grads.layers.resize(part.layers.size());
  Matrix d = grad_out;
  for (int k = part.num_layers() - 1; k >= 0; --k) {
    Matrix dz;
    if (k == part.num_layers() - 1 && grad_is_preact_of_last) {
      dz = d;
    } else {
      dz = d.cwiseProduct(activation_grad(part.specs[k].activation,
                                          cache.pre_acts[k]));
    }
    const Matrix& below = (k == 0) ? cache.input : cache.acts[k - 1];
    grads.layers[k].weight = dz * below.transpose();
    grads.layers[k].bias = dz.rowwise().sum();
    d = part.layers[k].weight.transpose() * dz;
  }
  return {std::move(grads), std::move(d)};
}

}  // namespace

double head_loss(Activation head, const Matrix& output, const Targets& t) {
  const double B = static_cast<double>(output.cols());
  if (head == Activation::kSoftmaxXentHead) {
    if (!t.is_classification)
      throw std::invalid_argument("softmax head requires integer labels");
    double loss = 0.0;
    for (int b = 0; b < output.cols(); ++b) {
      const int y = t.labels(b);
      if (y < 0 || y >= output.rows())
        throw std::invalid_argument("label " + std::to_string(y) +
                                    " outside logit range");
      const double mx = output.col(b).maxCoeff();
      const double lse = std::log((output.col(b).array() - mx).exp().sum()) + mx;
      loss += lse - output(y, b);
    }
    return loss / B;
  }
  if (t.is_classification)
    throw std::invalid_argument("squared-error head requires real targets");
  return 0.5 * (output - t.values).squaredNorm() / B;
}

Matrix head_output_grad(Activation head, const Matrix& output, const Targets& t) {
  const double B = static_cast<double>(output.cols());
  if (head == Activation::kSoftmaxXentHead) {
    Matrix g = softmax_columns(output);
    for (int b = 0; b < output.cols(); ++b) g(t.labels(b), b) -= 1.0;
    return g / B;
  }
  return (output - t.values) / B;
}

ClientForward forward_client(const ModelParams& client_part,
                             const Matrix& inputs, const Targets& targets,
                             int client_id) {
  check_batch(inputs, targets);
  ClientForward out;
  Matrix top = forward_part(client_part, inputs, out.cache);
  out.smashed.activations = std::move(top);
  out.smashed.targets = targets;
  out.smashed.client_id = client_id;
  return out;
}

ServerForward forward_server(const ModelParams& server_part,
                             const SmashedData& smashed, Activation head) {
  check_batch(smashed.activations, smashed.targets);
  if (!server_part.empty() &&
      server_part.specs.back().activation != head) {
    throw std::invalid_argument(
        "head activation does not match the server part's terminal layer");
  }
  ServerForward out;
  Matrix top = forward_part(server_part, smashed.activations, out.cache);
  out.cache.targets = smashed.targets;
  out.cache.head = head;
  out.loss = head_loss(head, top, smashed.targets);
  return out;
}

ServerBackward backward_server(const ModelParams& server_part,
                               const ForwardCache& cache) {
  ServerBackward out;
  if (server_part.empty()) {
    // Loss was applied to the smashed activations directly.
    out.grads.specs.clear();
    out.grads.layers.clear();
    out.grad_wrt_smashed = head_output_grad(cache.head, cache.input, cache.targets);
    return out;
  }
  const Activation head = cache.head;
  Matrix seed;
  bool seed_is_preact = false;
  if (head == Activation::kSoftmaxXentHead) {
    seed = head_output_grad(head, cache.acts.back(), cache.targets);
    seed_is_preact = true;  // softmax-xent gradient is already w.r.t. logits
  } else {
    seed = head_output_grad(head, cache.acts.back(), cache.targets);
  }
  auto [grads, din] = backward_part(server_part, cache, seed, seed_is_preact);
  out.grads = std::move(grads);
  out.grad_wrt_smashed = std::move(din);
  return out;
}

ModelParams backward_client(const ModelParams& client_part,
                            const ForwardCache& cache,
                            const Matrix& grad_wrt_smashed) {
  if (client_part.empty()) return ModelParams{};
  auto [grads, dunused] =
      backward_part(client_part, cache, grad_wrt_smashed, false);
  (void)dunused;
  return grads;
}

ModelParams sgd_step(const ModelParams& params, const ModelParams& grads,
                     double lr) {
  if (params.num_layers() != grads.num_layers())
    throw std::invalid_argument("sgd_step: layer count mismatch");
  ModelParams out = params;
  for (int k = 0; k < params.num_layers(); ++k) {
    if (params.layers[k].weight.rows() != grads.layers[k].weight.rows() ||
        params.layers[k].weight.cols() != grads.layers[k].weight.cols())
      throw std::invalid_argument("sgd_step: shape mismatch at layer " +
                                  std::to_string(k));
    out.layers[k].weight -= lr * grads.layers[k].weight;
    out.layers[k].bias -= lr * grads.layers[k].bias;
    if (!out.layers[k].weight.allFinite() || !out.layers[k].bias.allFinite())
      throw NumericError("sgd_step: non-finite parameters at layer " +
                         std::to_string(k));
  }
  return out;
}

ModelParams aggregate(const std::vector<ModelParams>& models,
                      const Vector& weights) {
  if (models.empty()) throw std::invalid_argument("aggregate: no models");
  if (weights.size() != static_cast<long>(models.size()))
    throw std::invalid_argument("aggregate: weight count mismatch");
  const double wsum = weights.sum();
  if (std::abs(wsum - 1.0) > 1e-12)
    throw std::invalid_argument("aggregate: weights sum to " +
                                format_full(wsum) + ", expected 1");
  ModelParams acc;
  acc.specs = models[0].specs;
  acc.layers.resize(models[0].layers.size());
  for (std::size_t n = 0; n < models.size(); ++n) {
    if (models[n].num_layers() != models[0].num_layers())
      throw std::invalid_argument("aggregate: layer count mismatch at model " +
                                  std::to_string(n));
    for (int k = 0; k < models[n].num_layers(); ++k) {
      if (n == 0) {
        acc.layers[k].weight = weights(0) * models[0].layers[k].weight;
        acc.layers[k].bias = weights(0) * models[0].layers[k].bias;
      } else {
        acc.layers[k].weight += weights(n) * models[n].layers[k].weight;
        acc.layers[k].bias += weights(n) * models[n].layers[k].bias;
      }
    }
  }
  return acc;
}

LossGrad loss_and_grad(const ModelParams& model, const Matrix& inputs,
                       const Targets& targets) {
  if (model.empty()) throw std::invalid_argument("loss_and_grad: empty model");
  check_batch(inputs, targets);
  ForwardCache cache;
  Matrix top = forward_part(model, inputs, cache);
  const Activation head = model.specs.back().activation;
  LossGrad out;
  out.loss = head_loss(head, top, targets);
  Matrix seed = head_output_grad(head, top, targets);
  const bool preact = head == Activation::kSoftmaxXentHead;
  auto [grads, dunused] = backward_part(model, cache, seed, preact);
  (void)dunused;
  out.grads = std::move(grads);
  return out;
}

ModelParams finite_diff_grad(const std::function<double(const ModelParams&)>& f,
                             const ModelParams& at, double eps) {
  ModelParams g;
  g.specs = at.specs;
  g.layers.resize(at.layers.size());
  ModelParams probe = at;
  for (int k = 0; k < at.num_layers(); ++k) {
    g.layers[k].weight.resize(at.layers[k].weight.rows(),
                              at.layers[k].weight.cols());
    g.layers[k].bias.resize(at.layers[k].bias.size());
    for (int i = 0; i < at.layers[k].weight.rows(); ++i) {
      for (int j = 0; j < at.layers[k].weight.cols(); ++j) {
        const double v = at.layers[k].weight(i, j);
        probe.layers[k].weight(i, j) = v + eps;
        const double hi = f(probe);
        probe.layers[k].weight(i, j) = v - eps;
        const double lo = f(probe);
        probe.layers[k].weight(i, j) = v;
        g.layers[k].weight(i, j) = (hi - lo) / (2.0 * eps);
      }
    }
    for (int i = 0; i < at.layers[k].bias.size(); ++i) {
      const double v = at.layers[k].bias(i);
      probe.layers[k].bias(i) = v + eps;
      const double hi = f(probe);
      probe.layers[k].bias(i) = v - eps;
      const double lo = f(probe);
      probe.layers[k].bias(i) = v;
      g.layers[k].bias(i) = (hi - lo) / (2.0 * eps);
    }
  }
  return g;
}

double accuracy_from_logits(const Matrix& logits, const IntVector& labels) {
  if (logits.cols() != labels.size())
    throw std::invalid_argument("accuracy: size mismatch");
  long hits = 0;
  for (int b = 0; b < logits.cols(); ++b) {
    int arg = 0;
    logits.col(b).maxCoeff(&arg);
    if (arg == labels(b)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

Vector flatten(const ModelParams& params) {
  Vector flat(params.param_count());
  long at = 0;
  for (const auto& l : params.layers) {
    Eigen::Map<Matrix>(flat.data() + at, l.weight.rows(), l.weight.cols()) =
        l.weight;
    at += l.weight.size();
    flat.segment(at, l.bias.size()) = l.bias;
    at += l.bias.size();
  }
  return flat;
}

void unflatten(const Vector& flat, ModelParams& into) {
  if (flat.size() != into.param_count())
    throw std::invalid_argument("unflatten: size mismatch");
  long at = 0;
  for (auto& l : into.layers) {
    l.weight = Eigen::Map<const Matrix>(flat.data() + at, l.weight.rows(),
                                        l.weight.cols());
    at += l.weight.size();
    l.bias = flat.segment(at, l.bias.size());
    at += l.bias.size();
  }
}

}  // namespace sfl
