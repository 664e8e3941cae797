#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <stdexcept>

#include "sfl/nn.hpp"

using namespace sfl;

namespace {

Matrix random_matrix(long rows, long cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = gauss(rng);
  return m;
}

Targets random_labels(int classes, int batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> draw(0, classes - 1);
  Targets t;
  t.is_classification = true;
  t.labels.resize(batch);
  for (int j = 0; j < batch; ++j) t.labels(j) = draw(rng);
  return t;
}

Targets random_values(int out_dim, int batch, std::uint64_t seed) {
  Targets t;
  t.is_classification = false;
  t.values = random_matrix(out_dim, batch, seed);
  return t;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  REQUIRE(a.size() == b.size());
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

double max_rel_diff(const Vector& a, const Vector& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (long k = 0; k < a.size(); ++k) {
    const double denom = std::max({1.0, std::abs(a(k)), std::abs(b(k))});
    worst = std::max(worst, std::abs(a(k) - b(k)) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("validate_specs rejects bad layer chains") {
  CHECK_THROWS_AS(validate_specs({{0, 3, Activation::kRelu}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(validate_specs({{3, 0, Activation::kRelu}}),
                  std::invalid_argument);
  // consecutive dims must match
  CHECK_THROWS_AS(validate_specs({{3, 4, Activation::kRelu},
                                  {5, 2, Activation::kIdentity}}),
                  std::invalid_argument);
  // softmax head only on the last layer
  CHECK_THROWS_AS(validate_specs({{3, 4, Activation::kSoftmaxXentHead},
                                  {4, 2, Activation::kIdentity}}),
                  std::invalid_argument);
  CHECK_NOTHROW(validate_specs({{3, 4, Activation::kTanh},
                                {4, 2, Activation::kSoftmaxXentHead}}));
}

TEST_CASE("init_model is deterministic with bounded weights and zero biases") {
  const std::vector<LayerSpec> specs = {{9, 7, Activation::kTanh},
                                        {7, 3, Activation::kSoftmaxXentHead}};
  const ModelParams a = init_model(specs, 42);
  const ModelParams b = init_model(specs, 42);
  const ModelParams c = init_model(specs, 43);
  CHECK(flatten(a) == flatten(b));
  CHECK(flatten(a) != flatten(c));
  for (int l = 0; l < a.num_layers(); ++l) {
    const double limit = 1.0 / std::sqrt(specs[l].input_dim);
    CHECK(a.layers[l].weight.cwiseAbs().maxCoeff() <= limit);
    CHECK(a.layers[l].bias.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.layers[l].weight.rows() == specs[l].output_dim);
    CHECK(a.layers[l].weight.cols() == specs[l].input_dim);
  }
  CHECK(a.param_count() == 9 * 7 + 7 + 7 * 3 + 3);
}

TEST_CASE("analytic gradients match central finite differences") {
  // mixed activations, both heads
  const std::vector<std::vector<LayerSpec>> model_specs = {
      {{4, 3, Activation::kSoftmaxXentHead}},
      {{3, 5, Activation::kTanh}, {5, 4, Activation::kSoftmaxXentHead}},
      {{5, 4, Activation::kRelu},
       {4, 4, Activation::kTanh},
       {4, 2, Activation::kSoftmaxXentHead}},
      {{4, 6, Activation::kIdentity}},
      {{3, 4, Activation::kTanh}, {4, 2, Activation::kIdentity}},
      {{6, 5, Activation::kRelu},
       {5, 3, Activation::kTanh},
       {3, 3, Activation::kIdentity}},
  };
  for (std::size_t k = 0; k < model_specs.size(); ++k) {
    const auto& specs = model_specs[k];
    const ModelParams model = init_model(specs, 100 + k);
    const int B = 7;
    const Matrix X = random_matrix(specs.front().input_dim, B, 200 + k);
    const bool classify =
        specs.back().activation == Activation::kSoftmaxXentHead;
    const Targets t = classify
                          ? random_labels(specs.back().output_dim, B, 300 + k)
                          : random_values(specs.back().output_dim, B, 300 + k);
    const LossGrad lg = loss_and_grad(model, X, t);
    const ModelParams fd = finite_diff_grad(
        [&](const ModelParams& m) { return loss_and_grad(m, X, t).loss; },
        model, 1e-5);
    CHECK(max_rel_diff(flatten(lg.grads), flatten(fd)) <= 1e-6);
  }
}

TEST_CASE("split pipeline reproduces the unsplit gradient at every cut") {
  const std::vector<LayerSpec> specs = {{5, 6, Activation::kTanh},
                                        {6, 4, Activation::kRelu},
                                        {4, 4, Activation::kTanh},
                                        {4, 3, Activation::kSoftmaxXentHead}};
  const ModelParams model = init_model(specs, 7);
  const int B = 6;
  const Matrix X = random_matrix(5, B, 17);
  const Targets t = random_labels(3, B, 27);
  const LossGrad direct = loss_and_grad(model, X, t);

  for (int cut = 0; cut <= 4; ++cut) {
    CAPTURE(cut);
    const auto [client_part, server_part] = split_model(model, cut);
    CHECK(client_part.num_layers() == cut);
    CHECK(server_part.num_layers() == 4 - cut);
    const ClientForward cf = forward_client(client_part, X, t, 0);
    const ServerForward sf =
        forward_server(server_part, cf.smashed, Activation::kSoftmaxXentHead);
    const ServerBackward sb = backward_server(server_part, sf.cache);
    const ModelParams cg =
        backward_client(client_part, cf.cache, sb.grad_wrt_smashed);

    CHECK(sf.loss == doctest::Approx(direct.loss).epsilon(1e-14));
    const auto [dg_client, dg_server] = split_model(direct.grads, cut);
    CHECK(max_abs_diff(flatten(cg), flatten(dg_client)) <= 1e-12);
    CHECK(max_abs_diff(flatten(sb.grads), flatten(dg_server)) <= 1e-12);
  }
}

TEST_CASE("empty client part forwards raw inputs unchanged") {
  const Matrix X = random_matrix(4, 3, 5);
  const Targets t = random_labels(2, 3, 6);
  ModelParams empty;
  const ClientForward cf = forward_client(empty, X, t, 9);
  CHECK(cf.smashed.activations == X);
  CHECK(cf.smashed.client_id == 9);
}

TEST_CASE("zero feedback produces zero client gradients") {
  const std::vector<LayerSpec> specs = {{4, 5, Activation::kTanh},
                                        {5, 3, Activation::kRelu}};
  const ModelParams part = init_model(specs, 11);
  const Matrix X = random_matrix(4, 5, 12);
  const Targets t = random_labels(3, 5, 13);
  const ClientForward cf = forward_client(part, X, t, 0);
  const Matrix zero = Matrix::Zero(3, 5);
  const ModelParams grads = backward_client(part, cf.cache, zero);
  CHECK(flatten(grads).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("aggregate computes the weighted mean and validates inputs") {
  const std::vector<LayerSpec> specs = {{2, 2, Activation::kIdentity}};
  ModelParams a = init_model(specs, 1);
  ModelParams b = init_model(specs, 2);
  Vector w(2);
  w << 0.25, 0.75;
  const ModelParams mean = aggregate({a, b}, w);
  const Vector expect = 0.25 * flatten(a) + 0.75 * flatten(b);
  CHECK(max_abs_diff(flatten(mean), expect) == 0.0);

  Vector bad(2);
  bad << 0.5, 0.4;
  CHECK_THROWS_AS(aggregate({a, b}, bad), std::invalid_argument);
  Vector wrong_count(1);
  wrong_count << 1.0;
  CHECK_THROWS_AS(aggregate({a, b}, wrong_count), std::invalid_argument);
}

TEST_CASE("sgd_step applies params - lr * grads and rejects blowups") {
  const std::vector<LayerSpec> specs = {{2, 2, Activation::kIdentity}};
  const ModelParams p = init_model(specs, 3);
  ModelParams g = init_model(specs, 4);
  const ModelParams stepped = sgd_step(p, g, 0.5);
  CHECK(max_abs_diff(flatten(stepped), flatten(p) - 0.5 * flatten(g)) == 0.0);
  // lr = 0 is the exact fixed point
  CHECK(flatten(sgd_step(p, g, 0.0)) == flatten(p));
  g.layers[0].weight(0, 0) = 1.0;
  CHECK_THROWS_AS(sgd_step(p, g, std::numeric_limits<double>::infinity()),
                  NumericError);
}

TEST_CASE("head_loss matches hand arithmetic") {
  // squared error head: (1/B) sum_b 0.5 ||o_b - t_b||^2
  Matrix o(2, 2);
  o << 1.0, 0.0, 2.0, 2.0;
  Targets t;
  t.is_classification = false;
  t.values = Matrix::Zero(2, 2);
  // columns: [1,2] and [0,2] -> 0.5*(5) and 0.5*(4), mean 2.25
  CHECK(head_loss(Activation::kIdentity, o, t) == doctest::Approx(2.25));

  // softmax cross-entropy: two logits [1, 0], label 0 -> ln(1 + e^-1)
  Matrix logits(2, 1);
  logits << 1.0, 0.0;
  Targets lab;
  lab.is_classification = true;
  lab.labels.resize(1);
  lab.labels(0) = 0;
  CHECK(head_loss(Activation::kSoftmaxXentHead, logits, lab) ==
        doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-14));
  // equal logits, any label -> ln(K)
  Matrix even = Matrix::Zero(3, 1);
  Targets lab3;
  lab3.is_classification = true;
  lab3.labels.resize(1);
  lab3.labels(0) = 2;
  CHECK(head_loss(Activation::kSoftmaxXentHead, even, lab3) ==
        doctest::Approx(std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("identity head gradient is (output - target) / batch") {
  Matrix o(2, 2);
  o << 1.0, 0.0, 2.0, 2.0;
  Targets t;
  t.is_classification = false;
  t.values = Matrix::Constant(2, 2, 0.5);
  const Matrix g = head_output_grad(Activation::kIdentity, o, t);
  CHECK((g - (o.array() - 0.5).matrix() / 2.0).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("softmax head stays finite on extreme logits") {
  Matrix logits(2, 2);
  logits << 1000.0, -1000.0, 0.0, 0.0;
  Targets t;
  t.is_classification = true;
  t.labels.resize(2);
  t.labels << 0, 0;
  const double loss = head_loss(Activation::kSoftmaxXentHead, logits, t);
  CHECK(std::isfinite(loss));
  // column 1: logit gap +1000 and true class dominant -> ~0 loss;
  // column 2: gap -1000 -> ~1000 loss; mean ~500
  CHECK(loss == doctest::Approx(500.0).epsilon(1e-6));
  const Matrix g = head_output_grad(Activation::kSoftmaxXentHead, logits, t);
  CHECK(g.allFinite());
}

TEST_CASE("softmax gradient matches finite differences of the loss") {
  const Matrix logits = random_matrix(4, 3, 77);
  const Targets t = random_labels(4, 3, 78);
  const Matrix g = head_output_grad(Activation::kSoftmaxXentHead, logits, t);
  const double eps = 1e-6;
  for (long i = 0; i < logits.rows(); ++i)
    for (long j = 0; j < logits.cols(); ++j) {
      Matrix up = logits, down = logits;
      up(i, j) += eps;
      down(i, j) -= eps;
      const double fd = (head_loss(Activation::kSoftmaxXentHead, up, t) -
                         head_loss(Activation::kSoftmaxXentHead, down, t)) /
                        (2 * eps);
      CHECK(g(i, j) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("accuracy_from_logits counts argmax hits") {
  Matrix logits(3, 4);
  // argmaxes: 0, 2, 1, 1
  logits << 5.0, 0.0, 1.0, -1.0,
            1.0, 1.0, 3.0, 2.0,
            0.0, 2.0, 2.0, 0.0;
  IntVector labels(4);
  labels << 0, 2, 0, 1;
  CHECK(accuracy_from_logits(logits, labels) == doctest::Approx(0.75));
}

TEST_CASE("flatten and unflatten are exact inverses") {
  const std::vector<LayerSpec> specs = {{3, 5, Activation::kRelu},
                                        {5, 2, Activation::kIdentity}};
  const ModelParams model = init_model(specs, 21);
  const Vector flat = flatten(model);
  CHECK(flat.size() == model.param_count());
  ModelParams rebuilt = init_model(specs, 22);
  unflatten(flat, rebuilt);
  CHECK(flatten(rebuilt) == flat);
  for (int l = 0; l < model.num_layers(); ++l) {
    CHECK(rebuilt.layers[l].weight == model.layers[l].weight);
    CHECK(rebuilt.layers[l].bias == model.layers[l].bias);
  }
}

TEST_CASE("split_model covers the degenerate cuts") {
  const std::vector<LayerSpec> specs = {{3, 4, Activation::kTanh},
                                        {4, 2, Activation::kSoftmaxXentHead}};
  const ModelParams model = init_model(specs, 30);
  const auto [none, all] = split_model(model, 0);
  CHECK(none.empty());
  CHECK(all.num_layers() == 2);
  const auto [everything, nothing] = split_model(model, 2);
  CHECK(everything.num_layers() == 2);
  CHECK(nothing.empty());
  CHECK_THROWS_AS(split_model(model, 3), std::invalid_argument);
  CHECK_THROWS_AS(split_model(model, -1), std::invalid_argument);
}
