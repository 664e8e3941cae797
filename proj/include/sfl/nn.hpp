#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "sfl/types.hpp"

namespace sfl {

// Activations for dense layers. kSoftmaxXentHead marks the terminal layer of
// a classifier: the layer itself emits logits (identity on the affine output)
// and the loss applies softmax cross-entropy over them. It is only legal on
// the last layer of a model.
enum class Activation { kIdentity, kRelu, kTanh, kSoftmaxXentHead };

struct LayerSpec {
  int input_dim = 0;
  int output_dim = 0;
  Activation activation = Activation::kIdentity;
};

struct DenseLayer {
  Matrix weight;  // output_dim x input_dim
  Vector bias;    // output_dim
};

// A dense model (or a contiguous piece of one after a split). specs and
// layers always stay index-aligned.
struct ModelParams {
  std::vector<LayerSpec> specs;
  std::vector<DenseLayer> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }
  bool empty() const { return layers.empty(); }
  long param_count() const;
};

// Batch targets. Classification batches carry integer labels; everything else
// carries a real target matrix with one column per sample.
struct Targets {
  bool is_classification = true;
  IntVector labels;  // size B when classification
  Matrix values;     // out_dim x B otherwise

  long batch_size() const {
    return is_classification ? labels.size() : values.cols();
  }
};

// What a client transmits for one batch: activations at the cut (one column
// per sample) plus the targets the server needs to form the loss.
struct SmashedData {
  Matrix activations;  // cut_dim x B
  Targets targets;
  int client_id = -1;
};

// Intermediate state of a forward pass, kept around for the backward pass.
// For server-side caches, targets/head are filled in so the backward pass is
// self-contained.
struct ForwardCache {
  Matrix input;                  // what entered this model part
  std::vector<Matrix> pre_acts;  // per layer: W x + b
  std::vector<Matrix> acts;      // per layer: activation(pre_act)
  Targets targets;
  Activation head = Activation::kIdentity;
};

// Validates a layer chain: positive dims, consecutive dims matching, softmax
// head nowhere but the last layer. Throws std::invalid_argument naming the
// offending layer.
void validate_specs(const std::vector<LayerSpec>& specs);

// Fresh model: weights uniform in (-1/sqrt(input_dim), 1/sqrt(input_dim)),
// biases zero. Fully determined by (specs, seed).
ModelParams init_model(const std::vector<LayerSpec>& specs, std::uint64_t seed);

// Splits after layer `cut_layer` (0 => empty client part, num_layers => empty
// server part). Parts keep their spec slices.
std::pair<ModelParams, ModelParams> split_model(const ModelParams& model,
                                                int cut_layer);

struct ClientForward {
  SmashedData smashed;
  ForwardCache cache;
};

// Phase-1 pass through the client part. An empty part forwards the raw
// inputs unchanged.
ClientForward forward_client(const ModelParams& client_part,
                             const Matrix& inputs, const Targets& targets,
                             int client_id);

struct ServerForward {
  double loss = 0.0;
  ForwardCache cache;
};

// Pass through the server part ending in the loss. `head` is the terminal
// activation of the *full* model; when the server part is empty the loss is
// applied to the smashed activations directly.
ServerForward forward_server(const ModelParams& server_part,
                             const SmashedData& smashed, Activation head);

struct ServerBackward {
  ModelParams grads;       // same shapes as the server part
  Matrix grad_wrt_smashed; // dLoss/d(smashed activations)
};

ServerBackward backward_server(const ModelParams& server_part,
                               const ForwardCache& cache);

// Continues the backward pass through the client part given dLoss/d(smashed).
ModelParams backward_client(const ModelParams& client_part,
                            const ForwardCache& cache,
                            const Matrix& grad_wrt_smashed);

// params - lr * grads. Shape-validated; throws NumericError if the result is
// not finite. lr may be zero (exact fixed point).
ModelParams sgd_step(const ModelParams& params, const ModelParams& grads,
                     double lr);

// Weighted entrywise sum of same-shaped models, accumulated in ascending
// index order. Weights must sum to 1 within 1e-12.
ModelParams aggregate(const std::vector<ModelParams>& models,
                      const Vector& weights);

struct LossGrad {
  double loss = 0.0;
  ModelParams grads;
};

// Single-pass loss + gradient through the whole (unsplit) model. Kept as an
// independent route from the forward_client/forward_server split pipeline so
// the two can be checked against each other.
LossGrad loss_and_grad(const ModelParams& model, const Matrix& inputs,
                       const Targets& targets);

// Central finite differences of an arbitrary scalar function of the params.
// The numerical ground truth the analytic gradients are tested against.
ModelParams finite_diff_grad(const std::function<double(const ModelParams&)>& f,
                             const ModelParams& at, double eps);

// Mean loss of the terminal head over outputs with one column per sample.
// Softmax head treats `output` as logits; other heads use the squared error
// (1/B) sum_b 0.5 ||o_b - t_b||^2.
double head_loss(Activation head, const Matrix& output, const Targets& t);

// dLoss/d(output) of the terminal head, same shape as `output`.
Matrix head_output_grad(Activation head, const Matrix& output, const Targets& t);

// Fraction of columns whose argmax matches the label.
double accuracy_from_logits(const Matrix& logits, const IntVector& labels);

// Flat parameter vector (per layer: column-major weights, then bias) and its
// exact inverse. Copies only; bit-faithful both ways.
Vector flatten(const ModelParams& params);
void unflatten(const Vector& flat, ModelParams& into);

}  // namespace sfl
