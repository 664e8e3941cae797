#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "sfl/protocol.hpp"

using namespace sfl;

namespace {

// Two-client scalar model z = c * (a * x) with squared-error loss, one sample
// per client. Every gradient is hand-checkable, and the feedback e*c depends
// on the server parameter, so the test can tell pre-update feedback from
// post-update feedback exactly.
class LinearToyTask final : public SplitTask {
 public:
  LinearToyTask() {
    x_ = {2.0, -1.0};
    t_ = {1.0, 2.0};
    weights_.resize(2);
    weights_ << 0.25, 0.75;
    shards_.resize(2);
    shards_[0].client_id = 0;
    shards_[0].indices = {0};
    shards_[1].client_id = 1;
    shards_[1].indices = {1};
  }

  int num_clients() const override { return 2; }
  const Vector& client_weights() const override { return weights_; }
  const std::vector<Shard>& shards() const override { return shards_; }
  int client_dim() const override { return 1; }
  int server_dim() const override { return 1; }
  Vector init_client(std::uint64_t) const override {
    return Vector::Constant(1, 0.5);
  }
  Vector init_server(std::uint64_t) const override {
    return Vector::Constant(1, 0.75);
  }

  ClientForward client_forward(int client, const Vector& client_params,
                               const std::vector<int>& batch) const override {
    REQUIRE(batch.size() == 1);
    ClientForward out;
    out.smashed.activations = Matrix::Constant(1, 1, client_params(0) * x_[client]);
    out.smashed.targets.is_classification = false;
    out.smashed.targets.values = Matrix::Constant(1, 1, t_[batch[0]]);
    out.smashed.client_id = client;
    return out;
  }

  ServerOut server_backward(const Vector& server_params,
                            const ClientForward& act) const override {
    const double y = act.smashed.activations(0, 0);
    const double c = server_params(0);
    const double e = c * y - act.smashed.targets.values(0, 0);
    ServerOut out;
    out.loss = 0.5 * e * e;
    out.grad_server = Vector::Constant(1, e * y);
    out.grad_wrt_smashed = Matrix::Constant(1, 1, e * c);
    return out;
  }

  Vector client_backward(int client, const Vector&, const ClientForward&,
                         const Matrix& grad_wrt_smashed) const override {
    return Vector::Constant(1, grad_wrt_smashed(0, 0) * x_[client]);
  }

  FullGrad full_gradient(int client, const Vector& client_params,
                         const Vector& server_params,
                         const std::vector<int>& batch) const override {
    const double y = client_params(0) * x_[client];
    const double c = server_params(0);
    const double e = c * y - t_[batch[0]];
    FullGrad g;
    g.loss = 0.5 * e * e;
    g.client = Vector::Constant(1, e * c * x_[client]);
    g.server = Vector::Constant(1, e * y);
    return g;
  }

  EvalResult evaluate(const Vector& client_params,
                      const Vector& server_params) const override {
    EvalResult ev;
    for (int n = 0; n < 2; ++n) {
      const double e = server_params(0) * client_params(0) * x_[n] - t_[n];
      ev.loss += weights_(n) * 0.5 * e * e;
    }
    ev.accuracy = std::numeric_limits<double>::quiet_NaN();
    return ev;
  }

 private:
  std::vector<double> x_, t_;
  Vector weights_;
  std::vector<Shard> shards_;
};

QuadraticTask same_center_clients(int n_clients) {
  Matrix centers(n_clients, 2);
  for (int n = 0; n < n_clients; ++n) centers.row(n) << 4.0, -2.0;
  std::vector<Shard> shards(n_clients);
  for (int n = 0; n < n_clients; ++n) {
    shards[n].client_id = n;
    shards[n].indices = {n};
  }
  return assemble_quadratic_task(centers, shards,
                                 Vector::Constant(n_clients, 1.0 / n_clients));
}

bool bitwise_equal(const Vector& a, const Vector& b) {
  return a.size() == b.size() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

}  // namespace

TEST_CASE("step_index lays rounds, epochs and batches out 1-based") {
  CHECK(step_index(1, 1, 1, 5, 10) == 1);
  CHECK(step_index(1, 1, 10, 5, 10) == 10);
  CHECK(step_index(1, 2, 1, 5, 10) == 11);
  CHECK(step_index(2, 1, 1, 5, 10) == 51);
  CHECK(step_index(3, 5, 10, 5, 10) == 150);
  CHECK_THROWS_AS(step_index(0, 1, 1, 5, 10), std::invalid_argument);
  CHECK_THROWS_AS(step_index(1, 6, 1, 5, 10), std::invalid_argument);
  CHECK_THROWS_AS(step_index(1, 1, 11, 5, 10), std::invalid_argument);
}

TEST_CASE("sync points sit at whole-round boundaries") {
  CHECK(sync_points(3, 5, 10) == std::vector<long>{50, 100, 150});
  CHECK(sync_points(1, 1, 1) == std::vector<long>{1});
  SyncSchedule s{2, 2, 3};
  CHECK(!s.is_sync(0));
  CHECK(!s.is_sync(5));
  CHECK(s.is_sync(6));
  CHECK(!s.is_sync(7));
  CHECK(s.is_sync(12));
}

TEST_CASE("weighted mean and spread match hand values and validate input") {
  std::vector<Vector> vs(2);
  vs[0] = Vector::Constant(1, 0.0);
  vs[1] = Vector::Constant(1, 2.0);
  Vector w(2);
  w << 0.5, 0.5;
  CHECK(weighted_mean(vs, w)(0) == 1.0);
  CHECK(weighted_spread(vs, w) == 0.5 * 0.5 * 4.0);

  Vector uneven(2);
  uneven << 0.25, 0.75;
  CHECK(weighted_mean(vs, uneven)(0) == 1.5);

  // identical vectors have zero spread
  vs[1] = vs[0];
  CHECK(weighted_spread(vs, w) == 0.0);

  Vector bad_sum(2);
  bad_sum << 0.5, 0.4;
  CHECK_THROWS_AS(weighted_mean(vs, bad_sum), std::invalid_argument);
  Vector wrong_count(3);
  wrong_count << 0.5, 0.25, 0.25;
  CHECK_THROWS_AS(weighted_mean(vs, wrong_count), std::invalid_argument);
  CHECK_THROWS_AS(weighted_mean({}, w), std::invalid_argument);
}

TEST_CASE("one step follows the hand-derived linear oracle exactly") {
  LinearToyTask task;
  SplitState state;
  state.client_params = {Vector::Constant(1, 0.5), Vector::Constant(1, -0.25)};
  state.server_params = Vector::Constant(1, 0.75);
  state.step = 0;
  const std::vector<std::vector<int>> batches = {{0}, {1}};

  const StepDiag diag = minibatch_sfl_step(task, state, batches, 0.125, 0.25);

  // server aggregate of e*y: 0.25*(-0.25) + 0.75*(-0.453125) = -0.40234375
  CHECK(state.server_params(0) == 0.75 - 0.25 * (-0.40234375));
  // clients step on feedback taken at the PRE-update server parameter 0.75:
  // a1 <- 0.5 - 0.125*(-0.25*0.75*2), a2 <- -0.25 - 0.125*(-1.8125*0.75*-1)
  CHECK(state.client_params[0](0) == 0.546875);
  CHECK(state.client_params[1](0) == -0.419921875);
  CHECK(state.step == 1);

  CHECK(diag.batch_loss == 1.23974609375);
  CHECK(diag.agg_client_grad(0) == 0.92578125);
  CHECK(diag.max_full_sq_grad_norm == 2.05322265625);
  REQUIRE(diag.client_grads.size() == 2);
  CHECK(diag.client_grads[0](0) == -0.375);
  CHECK(diag.client_grads[1](0) == 1.359375);
}

TEST_CASE("a post-update-feedback implementation would land elsewhere") {
  // the same step computed with feedback at the post-update server parameter;
  // anchors that the oracle above actually discriminates the two orders
  const double c_post = 0.75 - 0.25 * (-0.40234375);
  const double a1_wrong = 0.5 - 0.125 * (-0.25 * c_post * 2.0);
  CHECK(a1_wrong != 0.546875);
}

TEST_CASE("step validation rejects mismatched shapes") {
  LinearToyTask task;
  SplitState state;
  state.client_params = {Vector::Constant(1, 0.5), Vector::Constant(1, 0.5)};
  state.server_params = Vector::Constant(1, 0.75);
  std::vector<std::vector<int>> one_batch = {{0}};
  CHECK_THROWS_AS(minibatch_sfl_step(task, state, one_batch, 0.1, 0.1),
                  std::invalid_argument);
  state.client_params.pop_back();
  std::vector<std::vector<int>> two = {{0}, {1}};
  CHECK_THROWS_AS(minibatch_sfl_step(task, state, two, 0.1, 0.1),
                  std::invalid_argument);
}

TEST_CASE("maybe_sync equalizes exactly at sync steps and only there") {
  LinearToyTask task;
  SplitState state;
  state.client_params = {Vector::Constant(1, 1.0), Vector::Constant(1, 3.0)};
  state.server_params = Vector::Constant(1, 0.0);
  const SyncSchedule sched{1, 1, 2};
  Vector w(2);
  w << 0.25, 0.75;

  state.step = 1;  // not a sync step (EM = 2)
  CHECK(!maybe_sync(state, sched, w));
  CHECK(state.client_params[0](0) == 1.0);

  state.step = 2;
  CHECK(maybe_sync(state, sched, w));
  CHECK(state.client_params[0](0) == 2.5);
  CHECK(state.client_params[0] == state.client_params[1]);
}

TEST_CASE("clients with identical data never drift apart") {
  const QuadraticSplitTask task(same_center_clients(3), 1, 0.0);
  TrainConfig cfg;
  cfg.rounds = 2;
  cfg.epochs = 2;
  cfg.batches_per_epoch = 3;
  cfg.batch_size = 1;
  cfg.schedule.mode = ScheduleParams::Mode::kConstant;
  cfg.schedule.constant_lr = 0.25;
  cfg.seed = 5;
  cfg.log_every_step = true;
  cfg.trace_params = true;
  const RunLog log = run_training(cfg, task);
  for (const auto& step_params : log.client_trace)
    for (std::size_t n = 1; n < step_params.size(); ++n)
      CHECK(bitwise_equal(step_params[n], step_params[0]));
  for (const StepRecord& rec : log.steps)
    if (rec.i > 0) CHECK(rec.client_divergence == 0.0);
}

TEST_CASE("run_training logs the full step grid with schedule rates") {
  const QuadraticSplitTask task(gen_quadratic_clients(3, 2, 4, 1.0, 0.5, 77),
                                1, 0.0);
  TrainConfig cfg;
  cfg.rounds = 2;
  cfg.epochs = 5;
  cfg.batches_per_epoch = 10;
  cfg.batch_size = 2;
  cfg.schedule.mode = ScheduleParams::Mode::kDiminishing;
  cfg.schedule.mu = 1.0;
  cfg.schedule.smoothness = 1.0;
  cfg.seed = 2;
  cfg.log_every_step = true;
  cfg.eval_every_log = true;
  const RunLog log = run_training(cfg, task);

  REQUIRE(log.steps.size() == 101);  // baseline + 100 steps
  CHECK(log.steps[0].i == 0);
  CHECK(log.T == 2);
  CHECK(log.E == 5);
  CHECK(log.M == 10);
  CHECK(log.N == 3);
  CHECK(log.gamma == 50.0);  // max(8*1/1 - 1, 50)
  for (long k = 1; k <= 100; ++k) {
    const StepRecord& rec = log.steps[static_cast<std::size_t>(k)];
    CHECK(rec.i == k);
    CHECK(step_index(rec.t, rec.e, rec.m, 5, 10) == k);
    CHECK(rec.eta_c == 2.0 / (50.0 + static_cast<double>(k - 1)));
    CHECK(rec.eta_s == rec.eta_c);
    CHECK(std::isfinite(rec.dist_sq_to_wstar));
    CHECK(std::isfinite(rec.loss));
  }
  const StepRecord& r51 = log.steps[51];
  CHECK(r51.t == 2);
  CHECK(r51.e == 1);
  CHECK(r51.m == 1);
  CHECK(std::isfinite(log.final_loss));
  CHECK(log.aborted_at == -1);
}

TEST_CASE("run_training is bitwise deterministic in the seed") {
  const QuadraticSplitTask task(gen_quadratic_clients(2, 3, 6, 1.0, 1.0, 21),
                                1, 0.5);
  TrainConfig cfg;
  cfg.rounds = 1;
  cfg.epochs = 3;
  cfg.batches_per_epoch = 4;
  cfg.batch_size = 2;
  cfg.schedule.mode = ScheduleParams::Mode::kConstant;
  cfg.schedule.constant_lr = 0.05;
  cfg.seed = 9;
  const RunLog a = run_training(cfg, task);
  const RunLog b = run_training(cfg, task);
  CHECK(bitwise_equal(a.final_client_mean, b.final_client_mean));
  CHECK(bitwise_equal(a.final_server, b.final_server));
  CHECK(a.final_loss == b.final_loss);
  cfg.seed = 10;
  const RunLog c = run_training(cfg, task);
  CHECK(!bitwise_equal(a.final_client_mean, c.final_client_mean));
}

TEST_CASE("a divergent run aborts with the failing step recorded") {
  Matrix centers(2, 1);
  centers << 0.0, 2.0;
  const QuadraticSplitTask task(
      build_quadratic_task(centers, Vector::Constant(2, 0.5)), 0, 1.0);
  TrainConfig cfg;
  cfg.rounds = 1;
  cfg.epochs = 1;
  cfg.batches_per_epoch = 50;
  cfg.batch_size = 1;
  cfg.schedule.mode = ScheduleParams::Mode::kConstant;
  cfg.schedule.constant_lr = 1e200;
  cfg.seed = 4;
  cfg.log_every_step = true;
  const RunLog log = run_training(cfg, task);
  CHECK(log.aborted_at > 0);
  CHECK(log.aborted_at <= 50);
  CHECK(!log.abort_reason.empty());
  CHECK(log.abort_reason.find("non-finite") != std::string::npos);
  // records stop at the failure
  CHECK(log.steps.back().i < log.aborted_at);
}

TEST_CASE("sync steps equalize client models bitwise in a full run") {
  const QuadraticSplitTask task(gen_quadratic_clients(4, 2, 8, 1.0, 1.0, 31),
                                1, 0.0);
  TrainConfig cfg;
  cfg.rounds = 3;
  cfg.epochs = 2;
  cfg.batches_per_epoch = 2;
  cfg.batch_size = 2;
  cfg.schedule.mode = ScheduleParams::Mode::kConstant;
  cfg.schedule.constant_lr = 0.1;
  cfg.seed = 6;
  cfg.log_every_step = true;
  cfg.trace_params = true;
  const RunLog log = run_training(cfg, task);
  const long em = 4;
  for (long i = em; i <= 12; i += em) {
    const auto& clients = log.client_trace.at(static_cast<std::size_t>(i));
    for (std::size_t n = 1; n < clients.size(); ++n)
      CHECK(bitwise_equal(clients[n], clients[0]));
    CHECK(log.steps.at(static_cast<std::size_t>(i)).client_divergence == 0.0);
  }
  // strictly between syncs the clients genuinely differ
  bool some_divergence = false;
  for (long i = 1; i <= 12; ++i)
    if (i % em != 0 &&
        log.steps.at(static_cast<std::size_t>(i)).client_divergence > 0.0)
      some_divergence = true;
  CHECK(some_divergence);
}
