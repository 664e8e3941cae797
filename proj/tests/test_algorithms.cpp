#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <stdexcept>
#include <vector>

#include "sfl/algorithms.hpp"

using namespace sfl;

namespace {

bool bitwise_equal(const Vector& a, const Vector& b) {
  return a.size() == b.size() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

TrainConfig constant_cfg(int T, int E, int M, int B, double lr,
                         std::uint64_t seed) {
  TrainConfig cfg;
  cfg.rounds = T;
  cfg.epochs = E;
  cfg.batches_per_epoch = M;
  cfg.batch_size = B;
  cfg.schedule.mode = ScheduleParams::Mode::kConstant;
  cfg.schedule.constant_lr = lr;
  cfg.seed = seed;
  cfg.log_every_step = true;
  return cfg;
}

// One client, one sample: every algorithm collapses to plain gradient descent
// on 0.5*||w - c||^2, so their trajectories must agree to the bit.
QuadraticSplitTask single_client_task(double init_scale) {
  Matrix centers(1, 2);
  centers << 3.0, -1.0;
  return QuadraticSplitTask(build_quadratic_task(centers, Vector::Ones(1)), 1,
                            init_scale);
}

DenseSplitTask single_client_dense(int cut) {
  Dataset ds = gen_synthetic_classification(4, 3, 6, 1.0, 13);
  std::vector<Shard> shards(1);
  shards[0].client_id = 0;
  for (int j = 0; j < ds.size(); ++j) shards[0].indices.push_back(j);
  std::vector<LayerSpec> specs = {{4, 5, Activation::kTanh},
                                  {5, 4, Activation::kRelu},
                                  {4, 3, Activation::kSoftmaxXentHead}};
  return DenseSplitTask(ds, shards, Vector::Ones(1), specs, cut, ds);
}

}  // namespace

TEST_CASE("gamma takes the larger of the curvature and sync-interval floors") {
  CHECK(gamma(1.0, 1.0, 5, 10) == 50.0);
  CHECK(gamma(100.0, 1.0, 1, 1) == 799.0);
  CHECK(gamma(1.0, 16.0, 1, 1) == 1.0);  // 8S/mu - 1 < EM
  CHECK_THROWS_AS(gamma(0.0, 1.0, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(gamma(1.0, -1.0, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(gamma(1.0, 1.0, 0, 1), std::invalid_argument);
}

TEST_CASE("lr_at follows 2/(mu*(gamma+i))") {
  CHECK(lr_at(0, 1.0, 50.0) == 0.04);
  CHECK(lr_at(50, 1.0, 50.0) == 0.02);
  CHECK(lr_at(0, 2.0, 50.0) == 0.02);
  CHECK_THROWS_AS(lr_at(0, 0.0, 50.0), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(-50, 1.0, 50.0), std::invalid_argument);
}

TEST_CASE("diminishing rates respect the curvature cap from step 1 on") {
  for (double S : {1.0, 10.0, 100.0}) {
    const double g = gamma(S, 1.0, 5, 10);
    for (long i = 1; i <= 200; ++i) CHECK(lr_at(i, 1.0, g) <= 1.0 / (4.0 * S));
  }
  // the very first rate (lr index 0) is allowed to sit above the cap
  CHECK(lr_at(0, 1.0, gamma(100.0, 1.0, 5, 10)) > 1.0 / 400.0);
}

TEST_CASE("resolve_schedule fills gamma only in diminishing mode") {
  ScheduleParams p;
  p.mode = ScheduleParams::Mode::kDiminishing;
  p.mu = 1.0;
  p.smoothness = 1.0;
  ResolvedSchedule sched = resolve_schedule(p, 5, 10);
  CHECK(sched.gamma_value == 50.0);
  CHECK(sched.eta(1) == 0.04);   // lr index 0
  CHECK(sched.eta(51) == 0.02);  // lr index 50

  ScheduleParams c;
  c.constant_lr = 0.3;
  ResolvedSchedule fixed = resolve_schedule(c, 5, 10);
  CHECK(fixed.eta(1) == 0.3);
  CHECK(fixed.eta(1000) == 0.3);
  c.constant_lr = 0.0;
  CHECK_THROWS_AS(resolve_schedule(c, 5, 10), std::invalid_argument);
}

TEST_CASE("all five drivers coincide bitwise on the degenerate problem") {
  const QuadraticSplitTask task = single_client_task(0.7);
  const TrainConfig cfg = constant_cfg(2, 2, 3, 1, 0.125, 42);

  const RunLog a = run_training(cfg, task);
  const RunLog b = run_fedavg(cfg, task);
  const RunLog c = run_sfl_v2(cfg, task);
  const RunLog d = run_centralized(cfg, task);
  const RunLog e = run_minibatch_sgd(cfg, task);

  for (const RunLog* log : {&b, &c, &d, &e}) {
    CHECK(bitwise_equal(a.final_client_mean, log->final_client_mean));
    CHECK(bitwise_equal(a.final_server, log->final_server));
    CHECK(a.final_loss == log->final_loss);
    REQUIRE(log->steps.size() == a.steps.size());
    for (std::size_t k = 0; k < a.steps.size(); ++k)
      CHECK(a.steps[k].dist_sq_to_wstar == log->steps[k].dist_sq_to_wstar);
  }
  // and it really is gradient descent: dist to the optimum contracts by
  // (1-lr)^2 per step on this quadratic
  const double rho = (1.0 - 0.125) * (1.0 - 0.125);
  for (std::size_t k = 1; k < a.steps.size(); ++k)
    CHECK(a.steps[k].dist_sq_to_wstar ==
          doctest::Approx(rho * a.steps[k - 1].dist_sq_to_wstar).epsilon(1e-12));
}

TEST_CASE("sequential server visits replay the hand-computed two-step path") {
  Matrix centers(2, 1);
  centers << 0.0, 2.0;
  const QuadraticSplitTask task(
      build_quadratic_task(centers, Vector::Constant(2, 0.5)), 0, 0.0);
  const TrainConfig cfg = constant_cfg(1, 1, 2, 1, 0.25, 9);

  const RunLog v2 = run_sfl_v2(cfg, task);
  CHECK(v2.final_server(0) == 0.78125);
  REQUIRE(v2.steps.size() == 3);
  CHECK(v2.steps[1].batch_loss == 1.0);
  CHECK(v2.steps[2].batch_loss == 0.72265625);

  // the parallel protocol aggregates both gradients before stepping, which
  // lands somewhere else entirely
  const RunLog par = run_training(cfg, task);
  CHECK(par.final_server(0) == 0.4375);
  CHECK(par.steps[1].batch_loss == 1.0);  // losses are pre-step either way
}

TEST_CASE("client visiting order is seeded and changes the outcome") {
  Matrix centers(3, 1);
  centers << 0.0, 2.0, 8.0;
  const QuadraticSplitTask task(
      build_quadratic_task(centers, Vector::Constant(3, 1.0 / 3.0)), 0, 0.0);

  TrainConfig plain = constant_cfg(2, 1, 1, 1, 0.25, 5);
  const RunLog fixed1 = run_sfl_v2(plain, task);
  const RunLog fixed2 = run_sfl_v2(plain, task);
  CHECK(bitwise_equal(fixed1.final_server, fixed2.final_server));

  plain.sfl_v2_shuffle = true;
  const RunLog shuf1 = run_sfl_v2(plain, task);
  const RunLog shuf2 = run_sfl_v2(plain, task);
  CHECK(bitwise_equal(shuf1.final_server, shuf2.final_server));

  // some seed must reorder the visits away from the identity permutation
  bool any_difference = false;
  for (std::uint64_t s = 1; s <= 20 && !any_difference; ++s) {
    TrainConfig probe = constant_cfg(2, 1, 1, 1, 0.25, s);
    const RunLog base = run_sfl_v2(probe, task);
    probe.sfl_v2_shuffle = true;
    const RunLog shuffled = run_sfl_v2(probe, task);
    if (shuffled.final_server(0) != base.final_server(0)) any_difference = true;
  }
  CHECK(any_difference);
}

TEST_CASE("one-client split and sequential runs agree with the protocol bitwise") {
  const DenseSplitTask task = single_client_dense(1);
  const TrainConfig cfg = [] {
    TrainConfig c = constant_cfg(2, 2, 2, 4, 0.05, 7);
    c.trace_params = true;
    return c;
  }();

  const RunLog par = run_training(cfg, task);
  const RunLog v2 = run_sfl_v2(cfg, task);
  REQUIRE(par.client_trace.size() == v2.client_trace.size());
  for (std::size_t k = 0; k < par.client_trace.size(); ++k) {
    CHECK(bitwise_equal(par.client_trace[k][0], v2.client_trace[k][0]));
    CHECK(bitwise_equal(par.server_trace[k], v2.server_trace[k]));
  }
  CHECK(par.final_loss == v2.final_loss);
}

TEST_CASE("with every layer on the clients the protocol is exactly local SGD") {
  const QuadraticSplitTask task(gen_quadratic_clients(3, 2, 3, 1.0, 1.0, 101),
                                2, 0.3);
  TrainConfig cfg = constant_cfg(2, 2, 3, 1, 0.05, 11);
  cfg.trace_params = true;

  const RunLog split = run_training(cfg, task);
  const RunLog fed = run_fedavg(cfg, task);
  REQUIRE(split.client_trace.size() == fed.client_trace.size());
  for (std::size_t k = 0; k < split.client_trace.size(); ++k)
    for (std::size_t n = 0; n < split.client_trace[k].size(); ++n)
      CHECK(bitwise_equal(split.client_trace[k][n], fed.client_trace[k][n]));
  CHECK(bitwise_equal(split.final_client_mean, fed.final_client_mean));
  CHECK(split.final_server.size() == 0);
}

TEST_CASE("clients holding identical data make large-batch SGD centralized") {
  Matrix centers(2, 2);
  centers.row(0) << 3.0, -1.0;
  centers.row(1) << 3.0, -1.0;
  const QuadraticSplitTask task(
      build_quadratic_task(centers, Vector::Constant(2, 0.5)), 1, 0.5);
  const TrainConfig cfg = constant_cfg(2, 2, 2, 1, 0.1, 17);

  const RunLog mb = run_minibatch_sgd(cfg, task);
  const RunLog cen = run_centralized(cfg, task);
  CHECK(bitwise_equal(mb.final_client_mean, cen.final_client_mean));
  CHECK(bitwise_equal(mb.final_server, cen.final_server));
  REQUIRE(mb.steps.size() == cen.steps.size());
  for (std::size_t k = 0; k < mb.steps.size(); ++k)
    CHECK(mb.steps[k].dist_sq_to_wstar == cen.steps[k].dist_sq_to_wstar);
}

TEST_CASE("centralized runs are seed-deterministic and seed-sensitive") {
  const QuadraticSplitTask task(gen_quadratic_clients(2, 2, 10, 1.0, 1.0, 55),
                                1, 0.5);
  const TrainConfig cfg = constant_cfg(1, 2, 3, 2, 0.05, 23);
  const RunLog a = run_centralized(cfg, task);
  const RunLog b = run_centralized(cfg, task);
  CHECK(bitwise_equal(a.final_client_mean, b.final_client_mean));
  CHECK(bitwise_equal(a.final_server, b.final_server));
  TrainConfig other = cfg;
  other.seed = 24;
  const RunLog c = run_centralized(other, task);
  CHECK(!bitwise_equal(a.final_server, c.final_server));
}

TEST_CASE("every driver stamps its name and geometry into the log") {
  const QuadraticSplitTask task = single_client_task(0.2);
  const TrainConfig cfg = constant_cfg(2, 1, 2, 1, 0.1, 3);
  CHECK(run_training(cfg, task).algorithm == "minibatch_sfl");
  CHECK(run_fedavg(cfg, task).algorithm == "fedavg");
  CHECK(run_sfl_v2(cfg, task).algorithm == "sfl_v2");
  CHECK(run_centralized(cfg, task).algorithm == "centralized");
  CHECK(run_minibatch_sgd(cfg, task).algorithm == "minibatch_sgd");
  const RunLog log = run_fedavg(cfg, task);
  CHECK(log.T == 2);
  CHECK(log.E == 1);
  CHECK(log.M == 2);
  CHECK(log.B == 1);
  CHECK(log.N == 1);
  CHECK(log.seed == 3);
  CHECK(log.steps.size() == 5);  // baseline + T*E*M
}
