#include "sfl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "run_util.hpp"
#include "sfl/nn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sfl {

namespace {

// ---------------------------------------------------------------------------
// config parsing

[[noreturn]] void key_error(const std::string& path, const std::string& what) {
  throw std::invalid_argument("config: key '" + path + "': " + what);
}

long long get_integer(const json& v, const std::string& path) {
  if (!v.is_number_integer() && !v.is_number_unsigned())
    key_error(path, "expected an integer");
  return v.get<long long>();
}

int get_int(const json& v, const std::string& path) {
  const long long x = get_integer(v, path);
  if (x < -(1ll << 31) || x >= (1ll << 31)) key_error(path, "out of range");
  return static_cast<int>(x);
}

std::uint64_t get_u64(const json& v, const std::string& path) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer()) {
    const long long x = v.get<long long>();
    if (x < 0) key_error(path, "expected a nonnegative integer");
    return static_cast<std::uint64_t>(x);
  }
  key_error(path, "expected a nonnegative integer");
}

double get_double(const json& v, const std::string& path) {
  if (!v.is_number()) key_error(path, "expected a number");
  return v.get<double>();
}

bool get_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) key_error(path, "expected true or false");
  return v.get<bool>();
}

std::string get_string(const json& v, const std::string& path) {
  if (!v.is_string()) key_error(path, "expected a string");
  return v.get<std::string>();
}

template <typename T, typename Getter>
std::vector<T> get_array(const json& v, const std::string& path, Getter get) {
  if (!v.is_array()) key_error(path, "expected an array");
  std::vector<T> out;
  std::size_t k = 0;
  for (const json& el : v) {
    out.push_back(get(el, path + "[" + std::to_string(k) + "]"));
    ++k;
  }
  if (out.empty()) key_error(path, "must not be empty");
  return out;
}

void bind_key(ExperimentConfig& cfg, const std::string& key, const json& v) {
  if (key == "task") cfg.task = get_string(v, key);
  else if (key == "dim") cfg.dim = get_int(v, key);
  else if (key == "classes") cfg.classes = get_int(v, key);
  else if (key == "per_class") cfg.per_class = get_int(v, key);
  else if (key == "eval_per_class") cfg.eval_per_class = get_int(v, key);
  else if (key == "spread") cfg.spread = get_double(v, key);
  else if (key == "hidden") {
    if (!v.is_array()) key_error(key, "expected an array");
    cfg.hidden.clear();
    std::size_t k = 0;
    for (const json& el : v)
      cfg.hidden.push_back(get_int(el, key + "[" + std::to_string(k++) + "]"));
  } else if (key == "quad_per_client") cfg.quad_per_client = get_int(v, key);
  else if (key == "quad_center_scale") cfg.quad_center_scale = get_double(v, key);
  else if (key == "quad_noise") cfg.quad_noise = get_double(v, key);
  else if (key == "quad_init_scale") cfg.quad_init_scale = get_double(v, key);
  else if (key == "idx_images") cfg.idx_images = get_string(v, key);
  else if (key == "idx_labels") cfg.idx_labels = get_string(v, key);
  else if (key == "idx_eval_images") cfg.idx_eval_images = get_string(v, key);
  else if (key == "idx_eval_labels") cfg.idx_eval_labels = get_string(v, key);
  else if (key == "clients") cfg.clients = get_int(v, key);
  else if (key == "uniform_weights") cfg.uniform_weights = get_bool(v, key);
  else if (key == "data_seed") cfg.data_seed = get_u64(v, key);
  else if (key == "rounds") cfg.rounds = get_int(v, key);
  else if (key == "epochs") cfg.epochs = get_int(v, key);
  else if (key == "batches_per_epoch") cfg.batches_per_epoch = get_int(v, key);
  else if (key == "batch_size") cfg.batch_size = get_int(v, key);
  else if (key == "lr_mode") {
    const std::string s = get_string(v, key);
    if (s == "constant") cfg.schedule.mode = ScheduleParams::Mode::kConstant;
    else if (s == "diminishing")
      cfg.schedule.mode = ScheduleParams::Mode::kDiminishing;
    else key_error(key, "expected 'constant' or 'diminishing'");
  } else if (key == "lr") cfg.schedule.constant_lr = get_double(v, key);
  else if (key == "mu") cfg.schedule.mu = get_double(v, key);
  else if (key == "smoothness") cfg.schedule.smoothness = get_double(v, key);
  else if (key == "log_every_step") cfg.log_every_step = get_bool(v, key);
  else if (key == "eval_every_log") cfg.eval_every_log = get_bool(v, key);
  else if (key == "log_client_grads") cfg.log_client_grads = get_bool(v, key);
  else if (key == "log_variance_samples")
    cfg.log_variance_samples = get_bool(v, key);
  else if (key == "sfl_v2_shuffle") cfg.sfl_v2_shuffle = get_bool(v, key);
  else if (key == "algorithms")
    cfg.algorithms = get_array<std::string>(v, key, get_string);
  else if (key == "r_values")
    cfg.r_values = get_array<double>(v, key, get_double);
  else if (key == "cut_layers")
    cfg.cut_layers = get_array<int>(v, key, get_int);
  else if (key == "seeds") cfg.seeds = get_array<std::uint64_t>(v, key, get_u64);
  else if (key == "out_dir") cfg.out_dir = get_string(v, key);
  else if (key == "workers") cfg.workers = get_int(v, key);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

const std::set<std::string>& known_algorithms() {
  static const std::set<std::string> k = {"minibatch_sfl", "fedavg", "sfl_v2",
                                          "centralized", "minibatch_sgd"};
  return k;
}

void require_positive(int v, const std::string& key) {
  if (v <= 0) key_error(key, "must be positive");
}

void validate_config(ExperimentConfig& cfg, std::vector<std::string>* warnings) {
  if (cfg.task != "synthetic_classification" && cfg.task != "quadratic" &&
      cfg.task != "idx_files")
    key_error("task", "unknown task '" + cfg.task +
                          "' (expected synthetic_classification, quadratic, "
                          "or idx_files)");
  require_positive(cfg.dim, "dim");
  if (cfg.classes < 2) key_error("classes", "need at least 2 classes");
  require_positive(cfg.per_class, "per_class");
  require_positive(cfg.eval_per_class, "eval_per_class");
  if (cfg.spread <= 0.0) key_error("spread", "must be positive");
  for (std::size_t k = 0; k < cfg.hidden.size(); ++k)
    if (cfg.hidden[k] <= 0)
      key_error("hidden[" + std::to_string(k) + "]", "must be positive");
  require_positive(cfg.quad_per_client, "quad_per_client");
  if (cfg.quad_center_scale < 0.0) key_error("quad_center_scale", "must be >= 0");
  if (cfg.quad_noise < 0.0) key_error("quad_noise", "must be >= 0");
  if (cfg.quad_init_scale < 0.0) key_error("quad_init_scale", "must be >= 0");
  require_positive(cfg.clients, "clients");
  require_positive(cfg.rounds, "rounds");
  require_positive(cfg.epochs, "epochs");
  require_positive(cfg.batches_per_epoch, "batches_per_epoch");
  require_positive(cfg.batch_size, "batch_size");
  require_positive(cfg.workers, "workers");
  if (cfg.schedule.mode == ScheduleParams::Mode::kConstant) {
    if (cfg.schedule.constant_lr <= 0.0) key_error("lr", "must be positive");
  } else {
    if (cfg.schedule.mu <= 0.0) key_error("mu", "must be positive");
    if (cfg.schedule.smoothness <= 0.0)
      key_error("smoothness", "must be positive");
  }
  if (cfg.task == "idx_files") {
    if (cfg.idx_images.empty()) key_error("idx_images", "required for idx_files");
    if (cfg.idx_labels.empty()) key_error("idx_labels", "required for idx_files");
  }

  if (cfg.algorithms.empty()) key_error("algorithms", "must not be empty");
  std::set<std::string> seen_algo;
  for (std::size_t k = 0; k < cfg.algorithms.size(); ++k) {
    const std::string path = "algorithms[" + std::to_string(k) + "]";
    if (!known_algorithms().count(cfg.algorithms[k]))
      key_error(path, "unknown algorithm '" + cfg.algorithms[k] + "'");
    if (!seen_algo.insert(cfg.algorithms[k]).second)
      key_error(path, "duplicate algorithm '" + cfg.algorithms[k] + "'");
  }

  std::set<double> seen_r;
  for (std::size_t k = 0; k < cfg.r_values.size(); ++k) {
    const std::string path = "r_values[" + std::to_string(k) + "]";
    if (!(cfg.r_values[k] >= 0.0 && cfg.r_values[k] <= 1.0))
      key_error(path, "must lie in [0, 1]");
    if (!seen_r.insert(cfg.r_values[k]).second)
      key_error(path, "duplicate value");
  }

  // layer count of the dense model (hidden + head); coordinate count for the
  // separable quadratic
  const int depth = cfg.task == "quadratic"
                        ? cfg.dim
                        : static_cast<int>(cfg.hidden.size()) + 1;
  std::set<int> seen_cut;
  for (std::size_t k = 0; k < cfg.cut_layers.size(); ++k) {
    const std::string path = "cut_layers[" + std::to_string(k) + "]";
    if (cfg.cut_layers[k] < 0) key_error(path, "must be >= 0");
    if (cfg.cut_layers[k] > depth)
      key_error(path, "value " + std::to_string(cfg.cut_layers[k]) +
                          " exceeds the model depth " + std::to_string(depth));
    if (!seen_cut.insert(cfg.cut_layers[k]).second)
      key_error(path, "duplicate value");
  }

  if (cfg.seeds.empty()) key_error("seeds", "must not be empty");
  std::vector<std::uint64_t> unique_seeds;
  for (std::uint64_t s : cfg.seeds) {
    if (std::find(unique_seeds.begin(), unique_seeds.end(), s) !=
        unique_seeds.end()) {
      if (warnings)
        warnings->push_back("config: duplicate seed " + std::to_string(s) +
                            " ignored");
      continue;
    }
    unique_seeds.push_back(s);
  }
  cfg.seeds = std::move(unique_seeds);
}

// ---------------------------------------------------------------------------
// misc shared helpers

std::string format_compact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    f << content;
    f.flush();
    if (!f) throw std::runtime_error("write to '" + tmp + "' failed");
  }
  fs::rename(tmp, path);
}

TrainConfig make_train_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainConfig tc;
  tc.rounds = cfg.rounds;
  tc.epochs = cfg.epochs;
  tc.batches_per_epoch = cfg.batches_per_epoch;
  tc.batch_size = cfg.batch_size;
  tc.schedule = cfg.schedule;
  tc.seed = seed;
  tc.log_every_step = cfg.log_every_step;
  tc.eval_every_log = cfg.eval_every_log;
  tc.log_client_grads = cfg.log_client_grads;
  tc.log_variance_samples = cfg.log_variance_samples;
  tc.sfl_v2_shuffle = cfg.sfl_v2_shuffle;
  return tc;
}

std::vector<LayerSpec> make_dense_specs(int input_dim,
                                        const std::vector<int>& hidden,
                                        int classes) {
  std::vector<LayerSpec> specs;
  int in = input_dim;
  for (int h : hidden) {
    specs.push_back({in, h, Activation::kRelu});
    in = h;
  }
  specs.push_back({in, classes, Activation::kSoftmaxXentHead});
  return specs;
}

// seed tags for the independent random streams derived from data_seed
constexpr std::uint64_t kCentersTag = 0xC3;
constexpr std::uint64_t kTrainTag = 0x7A;
constexpr std::uint64_t kEvalTag = 0xE7;
constexpr std::uint64_t kPartitionTag = 0x9A;
constexpr std::uint64_t kQuadraticTag = 0x9D;
constexpr std::uint64_t kEstimateTag = 0xE57;

}  // namespace

// ---------------------------------------------------------------------------
// public config surface

ExperimentConfig parse_config(const std::string& path,
                              const std::vector<std::string>& overrides,
                              std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config: " + path + ": " + e.what());
  }
  if (!j.is_object())
    throw std::invalid_argument("config: top level must be a JSON object");

  for (const std::string& ov : overrides) {
    const std::size_t eq = ov.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::invalid_argument("override '" + ov + "': expected key=value");
    const std::string key = ov.substr(0, eq);
    const std::string raw = ov.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;  // unquoted strings pass through as-is
    }
    j[key] = value;
  }

  ExperimentConfig cfg;
  for (const auto& item : j.items()) bind_key(cfg, item.key(), item.value());
  if (cfg.out_dir.empty()) {
    const char* env = std::getenv("SFLSIM_OUT");
    cfg.out_dir = env && *env ? env : "runs";
  }
  validate_config(cfg, warnings);
  return cfg;
}

std::string config_echo(const ExperimentConfig& cfg) {
  // Everything that affects run *results*, so a run is replayable from its
  // echo. Deliberately excludes out_dir and workers: neither changes a byte
  // of any run log.
  json j;
  j["task"] = cfg.task;
  j["dim"] = cfg.dim;
  j["classes"] = cfg.classes;
  j["per_class"] = cfg.per_class;
  j["eval_per_class"] = cfg.eval_per_class;
  j["spread"] = cfg.spread;
  j["hidden"] = cfg.hidden;
  j["quad_per_client"] = cfg.quad_per_client;
  j["quad_center_scale"] = cfg.quad_center_scale;
  j["quad_noise"] = cfg.quad_noise;
  j["quad_init_scale"] = cfg.quad_init_scale;
  j["idx_images"] = cfg.idx_images;
  j["idx_labels"] = cfg.idx_labels;
  j["idx_eval_images"] = cfg.idx_eval_images;
  j["idx_eval_labels"] = cfg.idx_eval_labels;
  j["clients"] = cfg.clients;
  j["uniform_weights"] = cfg.uniform_weights;
  j["data_seed"] = cfg.data_seed;
  j["rounds"] = cfg.rounds;
  j["epochs"] = cfg.epochs;
  j["batches_per_epoch"] = cfg.batches_per_epoch;
  j["batch_size"] = cfg.batch_size;
  j["lr_mode"] = cfg.schedule.mode == ScheduleParams::Mode::kConstant
                     ? "constant"
                     : "diminishing";
  j["lr"] = cfg.schedule.constant_lr;
  j["mu"] = cfg.schedule.mu;
  j["smoothness"] = cfg.schedule.smoothness;
  j["log_every_step"] = cfg.log_every_step;
  j["eval_every_log"] = cfg.eval_every_log;
  j["log_client_grads"] = cfg.log_client_grads;
  j["log_variance_samples"] = cfg.log_variance_samples;
  j["sfl_v2_shuffle"] = cfg.sfl_v2_shuffle;
  j["algorithms"] = cfg.algorithms;
  j["r_values"] = cfg.r_values;
  j["cut_layers"] = cfg.cut_layers;
  j["seeds"] = cfg.seeds;
  return j.dump();
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string echo = config_echo(cfg);
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  for (unsigned char c : echo) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// task construction and cell runs

std::unique_ptr<SplitTask> build_task(const ExperimentConfig& cfg, double r,
                                      int cut) {
  if (cfg.task == "quadratic") {
    if (cut < 0 || cut > cfg.dim)
      key_error("cut_layers", "value " + std::to_string(cut) +
                                  " exceeds the model depth " +
                                  std::to_string(cfg.dim));
    QuadraticTask qt = gen_quadratic_clients(
        cfg.clients, cfg.dim, cfg.quad_per_client, cfg.quad_center_scale,
        cfg.quad_noise, mix_seed(cfg.data_seed, kQuadraticTag));
    return std::make_unique<QuadraticSplitTask>(std::move(qt), cut,
                                                cfg.quad_init_scale);
  }

  Dataset train, eval;
  if (cfg.task == "synthetic_classification") {
    const Matrix centers = make_class_centers(
        cfg.classes, cfg.dim, mix_seed(cfg.data_seed, kCentersTag));
    train = sample_classification(centers, cfg.per_class, cfg.spread,
                                  mix_seed(cfg.data_seed, kTrainTag));
    eval = sample_classification(centers, cfg.eval_per_class, cfg.spread,
                                 mix_seed(cfg.data_seed, kEvalTag));
  } else if (cfg.task == "idx_files") {
    train = load_idx(cfg.idx_images, cfg.idx_labels);
    eval = cfg.idx_eval_images.empty()
               ? train
               : load_idx(cfg.idx_eval_images, cfg.idx_eval_labels);
  } else {
    key_error("task", "unknown task '" + cfg.task + "'");
  }

  int classes = cfg.classes;
  if (cfg.task == "idx_files") {
    classes = 0;
    for (long k = 0; k < train.labels.size(); ++k)
      classes = std::max(classes, static_cast<int>(train.labels(k)) + 1);
    if (classes < 2) key_error("idx_labels", "fewer than 2 label values");
  }

  const std::vector<LayerSpec> specs =
      make_dense_specs(train.dim(), cfg.hidden, classes);
  const int depth = static_cast<int>(specs.size());
  if (cut < 0 || cut > depth)
    key_error("cut_layers", "value " + std::to_string(cut) +
                                " exceeds the model depth " +
                                std::to_string(depth));

  Partition part = partition_noniid(train, cfg.clients, r,
                                    mix_seed(cfg.data_seed, kPartitionTag),
                                    cfg.uniform_weights);
  return std::make_unique<DenseSplitTask>(std::move(train),
                                          std::move(part.shards),
                                          std::move(part.weights), specs, cut,
                                          std::move(eval));
}

RunLog run_cell(const ExperimentConfig& cfg, const std::string& algorithm,
                double r, int cut, std::uint64_t seed) {
  const std::unique_ptr<SplitTask> task = build_task(cfg, r, cut);
  const TrainConfig tc = make_train_config(cfg, seed);
  if (algorithm == "minibatch_sfl") return run_training(tc, *task);
  if (algorithm == "fedavg") return run_fedavg(tc, *task);
  if (algorithm == "sfl_v2") return run_sfl_v2(tc, *task);
  if (algorithm == "centralized") return run_centralized(tc, *task);
  if (algorithm == "minibatch_sgd") return run_minibatch_sgd(tc, *task);
  throw std::invalid_argument("unknown algorithm '" + algorithm + "'");
}

std::string cell_csv_name(const std::string& algorithm, double r, int cut,
                          std::uint64_t seed) {
  return algorithm + "_r" + format_compact(r) + "_cut" + std::to_string(cut) +
         "_seed" + std::to_string(seed) + ".csv";
}

// ---------------------------------------------------------------------------
// run logs on disk

namespace {

void append_cell(std::string& row, double v) {
  row += ',';
  if (std::isfinite(v)) row += format_full(v);
}

}  // namespace

void write_run_csv(const std::string& path, const RunLog& log,
                   const ExperimentConfig& cfg) {
  std::string s;
  s.reserve(log.steps.size() * 160 + 4096);
  s += "# ";
  s += log.algorithm;
  s += " seed=";
  s += std::to_string(log.seed);
  s += "\n# config_hash ";
  s += config_hash(cfg);
  s += "\n# config ";
  s += config_echo(cfg);
  s += "\n# T=" + std::to_string(log.T) + " E=" + std::to_string(log.E) +
       " M=" + std::to_string(log.M) + " B=" + std::to_string(log.B) +
       " N=" + std::to_string(log.N) + " cut=" + std::to_string(log.cut) +
       " gamma=";
  if (std::isfinite(log.gamma)) s += format_full(log.gamma);
  s += "\ni,t,e,m,loss,accuracy,dist_sq_to_wstar,eta_c,eta_s,"
       "grad_var_at_client_mean,grad_var_across_clients,dist_sq_server,"
       "dist_sq_client,client_divergence\n";
  for (const StepRecord& r : log.steps) {
    s += std::to_string(r.i);
    s += ',';
    s += std::to_string(r.t);
    s += ',';
    s += std::to_string(r.e);
    s += ',';
    s += std::to_string(r.m);
    append_cell(s, r.loss);
    append_cell(s, r.accuracy);
    append_cell(s, r.dist_sq_to_wstar);
    append_cell(s, r.eta_c);
    append_cell(s, r.eta_s);
    append_cell(s, r.grad_var_at_client_mean);
    append_cell(s, r.grad_var_across_clients);
    append_cell(s, r.dist_sq_server);
    append_cell(s, r.dist_sq_client);
    append_cell(s, r.client_divergence);
    s += '\n';
  }
  s += "# final_loss=";
  if (std::isfinite(log.final_loss)) s += format_full(log.final_loss);
  s += " final_accuracy=";
  if (std::isfinite(log.final_accuracy)) s += format_full(log.final_accuracy);
  s += " aborted_at=" + std::to_string(log.aborted_at);
  s += " abort_reason=";
  s += log.abort_reason;
  s += '\n';
  atomic_write(path, s);
}

// ---------------------------------------------------------------------------
// run subcommand

int cmd_run(const ExperimentConfig& cfg, std::ostream& out) {
  fs::create_directories(cfg.out_dir);
  const std::string echo = config_echo(cfg);
  const std::string hash = config_hash(cfg);

  struct Cell {
    std::string algorithm;
    double r = 0.0;
    int cut = 0;
    std::uint64_t seed = 0;
  };
  std::vector<Cell> cells;
  for (const std::string& a : cfg.algorithms)
    for (double r : cfg.r_values)
      for (int cut : cfg.cut_layers)
        for (std::uint64_t seed : cfg.seeds) cells.push_back({a, r, cut, seed});

  struct CellResult {
    std::string csv;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    double final_accuracy = std::numeric_limits<double>::quiet_NaN();
    long aborted_at = -1;
    std::string abort_reason;
    std::string error;
  };
  std::vector<CellResult> results(cells.size());

  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= cells.size()) return;
      const Cell& c = cells[k];
      CellResult& res = results[k];
      res.csv = cell_csv_name(c.algorithm, c.r, c.cut, c.seed);
      try {
        const RunLog log = run_cell(cfg, c.algorithm, c.r, c.cut, c.seed);
        write_run_csv((fs::path(cfg.out_dir) / res.csv).string(), log, cfg);
        res.final_loss = log.final_loss;
        res.final_accuracy = log.final_accuracy;
        res.aborted_at = log.aborted_at;
        res.abort_reason = log.abort_reason;
      } catch (const std::exception& e) {
        res.error = e.what();
      }
    }
  };

  const int workers =
      std::max(1, std::min<int>(cfg.workers, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (std::thread& th : pool) th.join();

  out << "config_hash " << hash << "\n";
  out << cells.size() << " cells -> " << cfg.out_dir << "\n";
  bool failed = false;
  json cells_json = json::array();
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const Cell& c = cells[k];
    const CellResult& res = results[k];
    json jc;
    jc["algorithm"] = c.algorithm;
    jc["r"] = c.r;
    jc["cut"] = c.cut;
    jc["seed"] = c.seed;
    jc["csv"] = res.csv;
    if (!res.error.empty()) {
      failed = true;
      jc["error"] = res.error;
      out << res.csv << ": ERROR " << res.error << "\n";
    } else {
      jc["final_loss"] = res.final_loss;
      jc["final_accuracy"] = res.final_accuracy;
      jc["aborted_at"] = res.aborted_at;
      jc["abort_reason"] = res.abort_reason;
      out << res.csv << ": final_loss=";
      out << (std::isfinite(res.final_loss) ? format_full(res.final_loss) : "-");
      out << " final_accuracy="
          << (std::isfinite(res.final_accuracy)
                  ? format_full(res.final_accuracy)
                  : "-");
      if (res.aborted_at >= 0)
        out << " [aborted at step " << res.aborted_at << ": "
            << res.abort_reason << "]";
      out << "\n";
    }
    cells_json.push_back(jc);
  }

  json summary;
  summary["config"] = json::parse(echo);
  summary["config_hash"] = hash;
  summary["cells"] = cells_json;
  atomic_write((fs::path(cfg.out_dir) / "summary.json").string(),
               summary.dump(2) + "\n");
  out << "summary: " << (fs::path(cfg.out_dir) / "summary.json").string()
      << "\n";
  return failed ? 1 : 0;
}

// ---------------------------------------------------------------------------
// compare subcommand

namespace {

struct CellKey {
  std::string algorithm;
  double r = 0.0;
  int cut = 0;

  bool operator<(const CellKey& o) const {
    if (algorithm != o.algorithm) return algorithm < o.algorithm;
    if (r != o.r) return r < o.r;
    return cut < o.cut;
  }
  std::string label() const {
    return algorithm + " r=" + format_compact(r) + " cut=" +
           std::to_string(cut);
  }
};

struct SummaryData {
  std::string path;
  // per cell key: seed -> (final_loss, final_accuracy)
  std::map<CellKey, std::map<std::uint64_t, std::pair<double, double>>> cells;
};

double json_num(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null())
    return std::numeric_limits<double>::quiet_NaN();
  return j[key].get<double>();
}

SummaryData load_summary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("compare: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("compare: " + path + ": " + e.what());
  }
  if (!j.contains("cells") || !j["cells"].is_array())
    throw std::invalid_argument("compare: " + path + ": no cells array");
  SummaryData data;
  data.path = path;
  for (const json& c : j["cells"]) {
    CellKey key{c.at("algorithm").get<std::string>(), c.at("r").get<double>(),
                c.at("cut").get<int>()};
    const std::uint64_t seed = c.at("seed").get<std::uint64_t>();
    data.cells[key][seed] = {json_num(c, "final_loss"),
                             json_num(c, "final_accuracy")};
  }
  return data;
}

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std_dev = std::numeric_limits<double>::quiet_NaN();
  long n = 0;
};

MeanStd mean_std(const std::vector<double>& vals) {
  MeanStd out;
  double sum = 0.0;
  for (double v : vals)
    if (std::isfinite(v)) {
      sum += v;
      ++out.n;
    }
  if (out.n == 0) return out;
  out.mean = sum / static_cast<double>(out.n);
  if (out.n == 1) {
    out.std_dev = 0.0;
    return out;
  }
  double ss = 0.0;
  for (double v : vals)
    if (std::isfinite(v)) ss += (v - out.mean) * (v - out.mean);
  out.std_dev = std::sqrt(ss / static_cast<double>(out.n - 1));
  return out;
}

std::string fmt_stat(const MeanStd& s) {
  if (s.n == 0) return "-";
  return format_compact(s.mean) + "+-" + format_compact(s.std_dev);
}

std::string trend_of(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return "undefined";
  bool up = true, down = true;
  for (std::size_t k = 1; k < v.size(); ++k) {
    if (v[k] > v[k - 1]) down = false;
    if (v[k] < v[k - 1]) up = false;
  }
  if (up && down) return "constant";
  if (up) return "non-decreasing";
  if (down) return "non-increasing";
  return "mixed";
}

}  // namespace

int cmd_compare(const std::vector<std::string>& summary_paths,
                const std::string& json_out, std::ostream& out) {
  if (summary_paths.size() < 2)
    throw std::invalid_argument("compare: need at least two summary files");
  std::vector<SummaryData> summaries;
  for (const std::string& p : summary_paths) summaries.push_back(load_summary(p));

  // identical cell sets required
  const SummaryData& first = summaries.front();
  for (std::size_t s = 1; s < summaries.size(); ++s) {
    for (const auto& [key, seeds] : first.cells) {
      auto it = summaries[s].cells.find(key);
      if (it == summaries[s].cells.end())
        throw std::invalid_argument("compare: cell '" + key.label() +
                                    "' missing from " + summaries[s].path);
      for (const auto& [seed, _] : seeds)
        if (!it->second.count(seed))
          throw std::invalid_argument(
              "compare: cell '" + key.label() + "' seed " +
              std::to_string(seed) + " missing from " + summaries[s].path);
    }
    for (const auto& [key, seeds] : summaries[s].cells) {
      auto it = first.cells.find(key);
      if (it == first.cells.end())
        throw std::invalid_argument("compare: cell '" + key.label() +
                                    "' missing from " + first.path);
      for (const auto& [seed, _] : seeds)
        if (!it->second.count(seed))
          throw std::invalid_argument(
              "compare: cell '" + key.label() + "' seed " +
              std::to_string(seed) + " missing from " + first.path);
    }
  }

  json report;
  report["summaries"] = summary_paths;

  for (std::size_t s = 0; s < summaries.size(); ++s)
    out << "[" << s << "] " << summaries[s].path << "\n";
  out << "\n";

  // per-cell table
  json cells_json = json::array();
  for (const auto& [key, _] : first.cells) {
    out << key.label() << ":";
    json jc;
    jc["algorithm"] = key.algorithm;
    jc["r"] = key.r;
    jc["cut"] = key.cut;
    json per = json::array();
    double first_loss_mean = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t s = 0; s < summaries.size(); ++s) {
      std::vector<double> losses, accs;
      for (const auto& [seed, la] : summaries[s].cells.at(key)) {
        losses.push_back(la.first);
        accs.push_back(la.second);
      }
      const MeanStd lm = mean_std(losses);
      const MeanStd am = mean_std(accs);
      if (s == 0) first_loss_mean = lm.mean;
      const double delta = lm.mean - first_loss_mean;
      out << "  [" << s << "] loss " << fmt_stat(lm) << " acc " << fmt_stat(am);
      if (s > 0) out << " dloss " << format_compact(delta);
      json jp;
      jp["loss_mean"] = lm.mean;
      jp["loss_std"] = lm.std_dev;
      jp["accuracy_mean"] = am.mean;
      jp["accuracy_std"] = am.std_dev;
      jp["delta_loss_vs_first"] = delta;
      per.push_back(jp);
    }
    out << "\n";
    jc["per_summary"] = per;
    cells_json.push_back(jc);
  }
  report["cells"] = cells_json;

  // pairwise win/loss per summary, matched on (r, cut, seed)
  json pairwise = json::array();
  out << "\npairwise (lower final loss wins / higher accuracy wins):\n";
  std::set<std::string> algos;
  for (const auto& [key, _] : first.cells) algos.insert(key.algorithm);
  for (std::size_t s = 0; s < summaries.size(); ++s) {
    for (auto ia = algos.begin(); ia != algos.end(); ++ia) {
      for (auto ib = std::next(ia); ib != algos.end(); ++ib) {
        long loss_a = 0, loss_b = 0, loss_tie = 0;
        long acc_a = 0, acc_b = 0, acc_tie = 0;
        for (const auto& [key, seeds] : summaries[s].cells) {
          if (key.algorithm != *ia) continue;
          CellKey other{*ib, key.r, key.cut};
          auto it = summaries[s].cells.find(other);
          if (it == summaries[s].cells.end()) continue;
          for (const auto& [seed, la] : seeds) {
            auto jt = it->second.find(seed);
            if (jt == it->second.end()) continue;
            const double fa = la.first, fb = jt->second.first;
            if (std::isfinite(fa) && std::isfinite(fb)) {
              if (fa < fb) ++loss_a;
              else if (fb < fa) ++loss_b;
              else ++loss_tie;
            }
            const double aa = la.second, ab = jt->second.second;
            if (std::isfinite(aa) && std::isfinite(ab)) {
              if (aa > ab) ++acc_a;
              else if (ab > aa) ++acc_b;
              else ++acc_tie;
            }
          }
        }
        if (loss_a + loss_b + loss_tie + acc_a + acc_b + acc_tie == 0) continue;
        out << "  [" << s << "] " << *ia << " vs " << *ib << ": loss " << loss_a
            << "-" << loss_b << " (" << loss_tie << " ties), accuracy " << acc_a
            << "-" << acc_b << " (" << acc_tie << " ties)\n";
        json jp;
        jp["summary"] = s;
        jp["a"] = *ia;
        jp["b"] = *ib;
        jp["loss_a_wins"] = loss_a;
        jp["loss_b_wins"] = loss_b;
        jp["loss_ties"] = loss_tie;
        jp["accuracy_a_wins"] = acc_a;
        jp["accuracy_b_wins"] = acc_b;
        jp["accuracy_ties"] = acc_tie;
        pairwise.push_back(jp);
      }
    }
  }
  report["pairwise"] = pairwise;

  // monotonicity of mean final accuracy along each swept axis
  json mono = json::array();
  std::set<double> r_axis;
  std::set<int> cut_axis;
  for (const auto& [key, _] : first.cells) {
    r_axis.insert(key.r);
    cut_axis.insert(key.cut);
  }
  auto mean_acc = [&](std::size_t s, const CellKey& key) {
    std::vector<double> accs;
    auto it = summaries[s].cells.find(key);
    if (it == summaries[s].cells.end())
      return std::numeric_limits<double>::quiet_NaN();
    for (const auto& [seed, la] : it->second) accs.push_back(la.second);
    return mean_std(accs).mean;
  };
  if (r_axis.size() > 1 || cut_axis.size() > 1)
    out << "\nmonotonicity of mean final accuracy:\n";
  for (std::size_t s = 0; s < summaries.size(); ++s) {
    for (const std::string& a : algos) {
      if (r_axis.size() > 1) {
        for (int cut : cut_axis) {
          std::vector<double> vals;
          bool all = true;
          for (double r : r_axis) {
            CellKey key{a, r, cut};
            if (!summaries[s].cells.count(key)) {
              all = false;
              break;
            }
            vals.push_back(mean_acc(s, key));
          }
          if (!all || vals.size() < 2) continue;
          const std::string t = trend_of(vals);
          out << "  [" << s << "] " << a << " vs r at cut=" << cut << ": " << t
              << "\n";
          json jm;
          jm["summary"] = s;
          jm["algorithm"] = a;
          jm["versus"] = "r";
          jm["cut"] = cut;
          jm["values"] = vals;
          jm["trend"] = t;
          mono.push_back(jm);
        }
      }
      if (cut_axis.size() > 1) {
        for (double r : r_axis) {
          std::vector<double> vals;
          bool all = true;
          for (int cut : cut_axis) {
            CellKey key{a, r, cut};
            if (!summaries[s].cells.count(key)) {
              all = false;
              break;
            }
            vals.push_back(mean_acc(s, key));
          }
          if (!all || vals.size() < 2) continue;
          const std::string t = trend_of(vals);
          out << "  [" << s << "] " << a << " vs cut at r=" << format_compact(r)
              << ": " << t << "\n";
          json jm;
          jm["summary"] = s;
          jm["algorithm"] = a;
          jm["versus"] = "cut";
          jm["r"] = r;
          jm["values"] = vals;
          jm["trend"] = t;
          mono.push_back(jm);
        }
      }
    }
  }
  report["monotonicity"] = mono;

  const std::string dest = json_out.empty() ? "comparison.json" : json_out;
  atomic_write(dest, report.dump(2) + "\n");
  out << "\nreport: " << dest << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// estimate-constants subcommand

int cmd_estimate_constants(const ExperimentConfig& cfg, int probes,
                           int batches_per_probe, std::ostream& out) {
  const std::unique_ptr<SplitTask> task =
      build_task(cfg, cfg.r_values.front(), cfg.cut_layers.front());
  const ConstantsEstimate est =
      estimate_constants(*task, probes, batches_per_probe, cfg.batch_size,
                         mix_seed(cfg.data_seed, kEstimateTag));
  json j;
  j["R_hat"] = est.R_hat;
  j["delta_hat"] = est.delta_hat;
  std::vector<double> sig(est.sigma_sq.data(),
                          est.sigma_sq.data() + est.sigma_sq.size());
  j["sigma_sq"] = sig;
  j["probes"] = probes;
  j["batches_per_probe"] = batches_per_probe;
  j["batch_size"] = cfg.batch_size;
  out << j.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// experiment batteries with exactly-known constants

namespace {

// Four clients on two coordinates, the second (server-side) coordinate
// carrying nearly all batch noise and two of the four clients an order of
// magnitude noisier than the others. This keeps the exact noise floor of the
// aggregated server update well inside its distance bound while leaving no
// slack once R is halved.
QuadraticTask make_bound_quadratic(std::uint64_t seed) {
  // Shards much larger than one epoch's draw (B*M = 20 of 500), so batch
  // noise stays effectively independent across steps; with B*M = shard size
  // the within-epoch draws would partition the shard and their noise would
  // cancel, hiding the stationary noise floor the battery is meant to probe.
  const int N = 4, d = 2, D = 500;
  const double noise_c = 0.02;
  const double noise_s[4] = {1.0, 1.0, 0.1, 0.1};
  const double center_scale = 0.05;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix centers(static_cast<long>(N) * D, d);
  std::vector<Shard> shards(N);
  long row = 0;
  for (int n = 0; n < N; ++n) {
    const double mc = center_scale * gauss(rng);
    const double ms = center_scale * gauss(rng);
    shards[n].client_id = n;
    for (int j = 0; j < D; ++j, ++row) {
      centers(row, 0) = mc + noise_c * gauss(rng);
      centers(row, 1) = ms + noise_s[n] * gauss(rng);
      shards[n].indices.push_back(static_cast<int>(row));
    }
  }
  QuadraticTask t = assemble_quadratic_task(
      std::move(centers), std::move(shards), Vector::Constant(N, 1.0 / N));
  // translate the optimum to the origin so the initial distances are set by
  // the (small) seeded init draws alone
  Matrix shifted = t.centers;
  shifted.rowwise() -= t.w_star.transpose();
  return assemble_quadratic_task(std::move(shifted), std::move(t.shards),
                                 std::move(t.weights));
}

// Exact inputs for a quadratic battery: mu = S = 1 by construction, sigma and
// delta in closed form, d0 as the mean over the cohort's actual starting
// points, and R as the largest per-client expected squared stochastic
// gradient norm at those starting points (the trajectory only contracts
// toward the optimum, so the start dominates).
BoundInputs exact_inputs(const QuadraticSplitTask& task, int E, int M, int B,
                         const std::vector<std::uint64_t>& seeds) {
  const QuadraticTask& qt = task.quadratic();
  const int cut = task.client_dim();
  BoundInputs in;
  in.mu = 1.0;
  in.smoothness = 1.0;
  in.delta = quadratic_delta_hat(qt);
  in.gamma_gap = quadratic_gamma_gap(qt, cut);
  in.sigma_sq = quadratic_sigma_sq(qt, B);
  in.p = qt.weights;
  in.N = task.num_clients();
  in.E = E;
  in.M = M;
  in.gamma_value = gamma(1.0, 1.0, E, M);

  const Vector wc_star = task.optimum_client();
  const Vector ws_star = task.optimum_server();
  Vector start_sq = Vector::Zero(in.N);
  double d0s = 0.0, d0c = 0.0;
  for (std::uint64_t s : seeds) {
    const Vector wc = task.init_client(mix_seed(s, detail::kInitTag));
    const Vector ws = task.init_server(mix_seed(s, detail::kInitTag));
    d0c += (wc - wc_star).squaredNorm();
    d0s += (ws - ws_star).squaredNorm();
    Vector w0(wc.size() + ws.size());
    w0 << wc, ws;
    for (int n = 0; n < in.N; ++n)
      start_sq(n) += (w0 - qt.client_means.row(n).transpose()).squaredNorm();
  }
  const double inv = 1.0 / static_cast<double>(seeds.size());
  d0s *= inv;
  d0c *= inv;
  start_sq *= inv;
  in.d0_server = d0s;
  in.d0_client = d0c;
  double r_sq = 0.0;
  for (int n = 0; n < in.N; ++n)
    r_sq = std::max(r_sq, start_sq(n) + in.sigma_sq(n));
  in.R = std::sqrt(r_sq);
  return in;
}

QuadraticBattery run_quadratic_battery(const QuadraticSplitTask& task, int T,
                                       int E, int M, int B, int n_seeds,
                                       bool variance_samples) {
  TrainConfig tc;
  tc.rounds = T;
  tc.epochs = E;
  tc.batches_per_epoch = M;
  tc.batch_size = B;
  tc.schedule.mode = ScheduleParams::Mode::kDiminishing;
  tc.schedule.mu = 1.0;
  tc.schedule.smoothness = 1.0;
  tc.log_every_step = true;
  tc.log_variance_samples = variance_samples;

  QuadraticBattery bat;
  std::vector<std::uint64_t> seeds;
  for (int s = 1; s <= n_seeds; ++s) seeds.push_back(s);
  for (std::uint64_t s : seeds) {
    tc.seed = s;
    bat.runs.push_back(run_training(tc, task));
  }
  bat.inputs = exact_inputs(task, E, M, B, seeds);
  bat.est = estimate_constants(task, 2, 8, B, 0xE57Au);
  return bat;
}

}  // namespace

QuadraticBattery run_bound_battery(double r_scale, int n_seeds) {
  const QuadraticTask qt = make_bound_quadratic(0xB0B5u);
  const QuadraticSplitTask task(qt, /*client_dims=*/1, /*init_scale=*/0.015);
  QuadraticBattery bat =
      run_quadratic_battery(task, /*T=*/20, /*E=*/5, /*M=*/5, /*B=*/4, n_seeds,
                            /*variance_samples=*/false);
  bat.inputs.R *= r_scale;
  return bat;
}

QuadraticBattery run_lemma_battery(int n_seeds) {
  const QuadraticTask qt =
      gen_quadratic_clients(4, 8, 20, 1.0, 1.0, 0x1E44Au);
  const QuadraticSplitTask task(qt, /*client_dims=*/2, /*init_scale=*/0.0);
  return run_quadratic_battery(task, /*T=*/20, /*E=*/5, /*M=*/5, /*B=*/4,
                               n_seeds, /*variance_samples=*/true);
}

ExperimentConfig observation_config() {
  ExperimentConfig cfg;
  cfg.task = "synthetic_classification";
  cfg.dim = 20;
  cfg.classes = 10;
  cfg.per_class = 100;
  cfg.eval_per_class = 20;
  cfg.spread = 1.0;
  cfg.hidden = {32, 32};
  cfg.clients = 10;
  cfg.uniform_weights = false;
  cfg.data_seed = 7;
  cfg.rounds = 20;
  cfg.epochs = 5;
  cfg.batches_per_epoch = 5;
  cfg.batch_size = 32;
  cfg.schedule.mode = ScheduleParams::Mode::kConstant;
  cfg.schedule.constant_lr = 0.01;
  cfg.log_every_step = true;
  cfg.log_client_grads = true;
  cfg.algorithms = {"minibatch_sfl", "sfl_v2", "fedavg"};
  cfg.r_values = {0.9};
  cfg.cut_layers = {1, 2, 3};
  cfg.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  return cfg;
}

// ---------------------------------------------------------------------------
// check subcommand

namespace {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;

  explicit CheckResult(std::string n) : name(std::move(n)) {}
};

double max_rel_diff(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (long k = 0; k < a.size(); ++k) {
    const double denom = std::max({1.0, std::abs(a(k)), std::abs(b(k))});
    worst = std::max(worst, std::abs(a(k) - b(k)) / denom);
  }
  return worst;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

bool bitwise_equal(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return false;
  return a.size() == 0 ||
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

CheckResult check_gradient_oracle() {
  CheckResult res{"gradient-oracle"};
  double worst = 0.0;
  for (int k = 0; k < 10; ++k) {
    std::mt19937_64 rng(mix_seed(0xACCEu, k));
    std::uniform_int_distribution<int> dim_draw(2, 6);
    std::uniform_int_distribution<int> layer_draw(1, 4);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int L = layer_draw(rng);
    const bool classify = (k % 2) == 0;
    std::vector<LayerSpec> specs;
    int in_dim = dim_draw(rng);
    const int input_dim = in_dim;
    for (int l = 0; l < L; ++l) {
      const int out_dim = dim_draw(rng);
      Activation act;
      if (l + 1 == L)
        act = classify ? Activation::kSoftmaxXentHead : Activation::kIdentity;
      else
        act = (l % 2 == 0) ? Activation::kTanh : Activation::kRelu;
      specs.push_back({in_dim, out_dim, act});
      in_dim = out_dim;
    }
    const ModelParams model = init_model(specs, mix_seed(0xACCEu, k, 1));
    const int B = 5;
    Matrix X(input_dim, B);
    for (long i = 0; i < X.rows(); ++i)
      for (long j = 0; j < X.cols(); ++j) X(i, j) = gauss(rng);
    Targets t;
    t.is_classification = classify;
    if (classify) {
      std::uniform_int_distribution<int> label_draw(0, in_dim - 1);
      t.labels.resize(B);
      for (int j = 0; j < B; ++j) t.labels(j) = label_draw(rng);
    } else {
      t.values.resize(in_dim, B);
      for (long i = 0; i < t.values.rows(); ++i)
        for (long j = 0; j < t.values.cols(); ++j) t.values(i, j) = gauss(rng);
    }
    const LossGrad lg = loss_and_grad(model, X, t);
    const ModelParams fd = finite_diff_grad(
        [&](const ModelParams& m) { return loss_and_grad(m, X, t).loss; },
        model, 1e-5);
    worst = std::max(worst, max_rel_diff(flatten(lg.grads), flatten(fd)));
  }
  res.passed = worst <= 1e-6;
  res.detail = "max relative error vs finite differences " + format_full(worst);
  return res;
}

CheckResult check_split_equivalence() {
  CheckResult res{"split-equivalence"};
  std::mt19937_64 rng(0x5B17u);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::vector<LayerSpec> specs = {{5, 6, Activation::kTanh},
                                        {6, 4, Activation::kRelu},
                                        {4, 4, Activation::kTanh},
                                        {4, 3, Activation::kSoftmaxXentHead}};
  const ModelParams model = init_model(specs, 0x5B17u);
  const int B = 6;
  Matrix X(5, B);
  for (long i = 0; i < X.rows(); ++i)
    for (long j = 0; j < X.cols(); ++j) X(i, j) = gauss(rng);
  Targets t;
  t.is_classification = true;
  t.labels.resize(B);
  std::uniform_int_distribution<int> label_draw(0, 2);
  for (int j = 0; j < B; ++j) t.labels(j) = label_draw(rng);

  const LossGrad direct = loss_and_grad(model, X, t);
  double worst = 0.0;
  for (int cut = 0; cut <= 4; ++cut) {
    const auto [client_part, server_part] = split_model(model, cut);
    const ClientForward cf = forward_client(client_part, X, t, 0);
    const ServerForward sf =
        forward_server(server_part, cf.smashed, Activation::kSoftmaxXentHead);
    const ServerBackward sb = backward_server(server_part, sf.cache);
    const ModelParams cg = backward_client(client_part, cf.cache,
                                           sb.grad_wrt_smashed);
    worst = std::max(worst, std::abs(sf.loss - direct.loss));
    const auto [dg_client, dg_server] = split_model(direct.grads, cut);
    worst = std::max(worst, max_abs_diff(flatten(cg), flatten(dg_client)));
    worst = std::max(worst, max_abs_diff(flatten(sb.grads), flatten(dg_server)));
  }
  res.passed = worst <= 1e-12;
  res.detail = "max |split pipeline - direct gradient| " + format_full(worst);
  return res;
}

std::unique_ptr<DenseSplitTask> toy_dense_task(int cut) {
  const int d = 6, K = 3, N = 4;
  const std::uint64_t data_seed = 11;
  const Matrix centers =
      make_class_centers(K, d, mix_seed(data_seed, kCentersTag));
  Dataset train =
      sample_classification(centers, 24, 1.0, mix_seed(data_seed, kTrainTag));
  Dataset eval =
      sample_classification(centers, 8, 1.0, mix_seed(data_seed, kEvalTag));
  Partition part = partition_noniid(train, N, 0.5,
                                    mix_seed(data_seed, kPartitionTag), true);
  const std::vector<LayerSpec> specs = {{d, 5, Activation::kRelu},
                                        {5, 4, Activation::kTanh},
                                        {4, K, Activation::kSoftmaxXentHead}};
  return std::make_unique<DenseSplitTask>(std::move(train),
                                          std::move(part.shards),
                                          std::move(part.weights), specs, cut,
                                          std::move(eval));
}

TrainConfig toy_train_config() {
  TrainConfig tc;
  tc.rounds = 2;
  tc.epochs = 2;
  tc.batches_per_epoch = 3;
  tc.batch_size = 8;
  tc.schedule.mode = ScheduleParams::Mode::kConstant;
  tc.schedule.constant_lr = 0.05;
  tc.seed = 3;
  tc.log_every_step = true;
  tc.trace_params = true;
  return tc;
}

CheckResult check_fedavg_equivalence(const std::string& inject) {
  CheckResult res{"fedavg-equivalence"};
  const auto task = toy_dense_task(/*cut=*/3);  // whole model client-side
  const TrainConfig tc = toy_train_config();
  TrainConfig tf = tc;
  if (inject == "lr-perturb") tf.schedule.constant_lr *= 1.0 + 1e-3;
  const RunLog a = run_training(tc, *task);
  const RunLog b = run_fedavg(tf, *task);
  double worst = 0.0;
  if (a.client_trace.size() != b.client_trace.size()) {
    res.detail = "trace lengths differ";
    return res;
  }
  for (std::size_t k = 0; k < a.client_trace.size(); ++k)
    for (std::size_t n = 0; n < a.client_trace[k].size(); ++n)
      worst = std::max(
          worst, max_abs_diff(a.client_trace[k][n], b.client_trace[k][n]));
  res.passed = worst <= 1e-12;
  res.detail =
      "max |minibatch_sfl - fedavg| over all client params " +
      format_full(worst) + " (cut = model depth)";
  return res;
}

CheckResult check_minibatch_equivalence() {
  CheckResult res{"minibatch-equivalence"};
  const auto task = toy_dense_task(/*cut=*/0);  // whole model server-side
  const TrainConfig tc = toy_train_config();
  const RunLog a = run_training(tc, *task);
  const RunLog b = run_minibatch_sgd(tc, *task);
  if (a.server_trace.size() != b.server_trace.size()) {
    res.detail = "trace lengths differ";
    return res;
  }
  bool same = true;
  for (std::size_t k = 0; k < a.server_trace.size() && same; ++k)
    same = bitwise_equal(a.server_trace[k], b.server_trace[k]);
  res.passed = same;
  res.detail = same ? "server trajectories bitwise identical"
                    : "server trajectories differ";
  return res;
}

CheckResult check_sync_equalization() {
  CheckResult res{"sync-equalization"};
  const auto task = toy_dense_task(/*cut=*/1);
  const TrainConfig tc = toy_train_config();
  const RunLog log = run_training(tc, *task);
  const long em = static_cast<long>(tc.epochs) * tc.batches_per_epoch;
  bool ok = true;
  std::string why = "all client models bitwise equal at every sync point";
  for (long i = em; i <= static_cast<long>(tc.rounds) * em && ok; i += em) {
    const auto& clients = log.client_trace.at(static_cast<std::size_t>(i));
    for (std::size_t n = 1; n < clients.size() && ok; ++n)
      if (!bitwise_equal(clients[n], clients[0])) {
        ok = false;
        why = "client models differ after sync at step " + std::to_string(i);
      }
    const StepRecord& rec = log.steps.at(static_cast<std::size_t>(i));
    if (ok && rec.client_divergence != 0.0) {
      ok = false;
      why = "nonzero divergence at sync step " + std::to_string(i);
    }
  }
  res.passed = ok;
  res.detail = why;
  return res;
}

CheckResult check_schedule_condition() {
  CheckResult res{"schedule-condition"};
  bool ok = true;
  double worst_margin = std::numeric_limits<double>::infinity();
  for (double S : {1.0, 10.0, 100.0}) {
    for (double mu : {1.0, 0.5}) {
      for (const auto& [E, M] :
           std::vector<std::pair<int, int>>{{1, 1}, {5, 10}, {20, 25}}) {
        const double g = gamma(S, mu, E, M);
        const double cap = 1.0 / (4.0 * S);
        const long limit = std::min<long>(10 * static_cast<long>(g), 5000);
        for (long i = 1; i <= limit; ++i) {
          const double eta = lr_at(i, mu, g);
          worst_margin = std::min(worst_margin, cap - eta);
          if (eta > cap) ok = false;
        }
      }
    }
  }
  res.passed = ok;
  res.detail = "min (1/(4S) - eta) over grid " + format_full(worst_margin);
  return res;
}

CheckResult check_bound_examples() {
  CheckResult res{"bound-examples"};
  BoundInputs in;
  in.R = 1.0;
  in.mu = 1.0;
  in.smoothness = 1.0;
  in.delta = 0.0;
  in.gamma_gap = 0.0;
  in.sigma_sq = Vector::Zero(1);
  in.p = Vector::Ones(1);
  in.N = 1;
  in.E = 5;
  in.M = 10;
  in.gamma_value = 50.0;
  in.d0_server = 1.0;
  in.d0_client = 0.0;
  const double p1 = prop1_bound(in, 50);
  const double h = h_constant(in);
  const double p2 = prop2_bound(in, 50);
  const BoundReport rep = theorem1_bound(in, 50);
  const bool ok = p1 == 0.59 && h == 300.0 && p2 == 12.0 &&
                  rep.server_term == 0.59 && rep.client_term == 12.0 &&
                  rep.bound == 6.295;
  res.passed = ok;
  res.detail = "prop1=" + format_full(p1) + " H=" + format_full(h) +
               " prop2=" + format_full(p2) + " bound=" + format_full(rep.bound);
  return res;
}

CheckResult check_bound_monotonicity() {
  CheckResult res{"bound-monotonicity"};
  std::mt19937_64 rng(0x60D5u);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  bool ok = true;
  std::string why = "100 random input sets: decreasing in i, increasing in "
                    "d0/delta/R, prop1 independent of delta";
  for (int k = 0; k < 100 && ok; ++k) {
    BoundInputs in;
    in.mu = 0.5 + unit(rng) * 2.0;
    in.smoothness = in.mu * (1.0 + unit(rng) * 3.0);
    in.R = 0.1 + unit(rng) * 5.0;
    in.delta = unit(rng) * 3.0;
    in.gamma_gap = unit(rng) * 4.0;
    in.N = 1 + static_cast<int>(unit(rng) * 7.0);
    in.sigma_sq = Vector::Zero(in.N);
    for (int n = 0; n < in.N; ++n) in.sigma_sq(n) = unit(rng) * 2.0;
    in.p = Vector::Constant(in.N, 1.0 / in.N);
    in.E = 1 + static_cast<int>(unit(rng) * 7.0);
    in.M = 1 + static_cast<int>(unit(rng) * 7.0);
    in.gamma_value = gamma(in.smoothness, in.mu, in.E, in.M);
    in.d0_server = unit(rng) * 5.0;
    in.d0_client = unit(rng) * 5.0;
    const long i1 = 1 + static_cast<long>(unit(rng) * 999.0);
    const long i2 = i1 + 1 + static_cast<long>(unit(rng) * 999.0);

    if (!(prop1_bound(in, i2) < prop1_bound(in, i1))) ok = false;
    if (!(prop2_bound(in, i2) < prop2_bound(in, i1))) ok = false;

    BoundInputs bigger_d0 = in;
    bigger_d0.d0_server += 1.0;
    bigger_d0.d0_client += 1.0;
    if (!(prop1_bound(bigger_d0, i1) > prop1_bound(in, i1))) ok = false;
    if (!(prop2_bound(bigger_d0, i1) > prop2_bound(in, i1))) ok = false;

    BoundInputs bigger_delta = in;
    bigger_delta.delta += 0.5;
    if (prop1_bound(bigger_delta, i1) != prop1_bound(in, i1)) ok = false;
    if (!(prop2_bound(bigger_delta, i1) > prop2_bound(in, i1))) ok = false;

    BoundInputs bigger_r = in;
    bigger_r.R += 0.5;
    if (!(theorem1_bound(bigger_r, i2).bound > theorem1_bound(in, i2).bound))
      ok = false;

    if (!(prop1_bound(in, 0) >= in.d0_server)) ok = false;
    if (!(prop2_bound(in, 0) >= in.d0_client)) ok = false;
    if (!ok) why = "violated on random input set " + std::to_string(k);
  }
  res.passed = ok;
  res.detail = why;
  return res;
}

CheckResult trajectory_check_result(const std::string& name,
                                    const std::vector<RunLog>& runs,
                                    const BoundInputs& in, BoundSide side) {
  CheckResult res{name};
  const TrajectoryCheck tc = check_trajectory_vs_bound(runs, in, side, 0.05);
  res.passed = tc.violations == 0;
  res.detail = "checked " + std::to_string(tc.checked) + " steps, " +
               std::to_string(tc.violations) + " violations, max ratio " +
               format_full(tc.max_ratio);
  return res;
}

}  // namespace

int cmd_check(const std::string& inject, const std::string& report_path,
              std::ostream& out) {
  if (inject != "none" && inject != "lr-perturb" && inject != "r-halved")
    throw std::invalid_argument(
        "check: unknown inject '" + inject +
        "' (expected none, lr-perturb, or r-halved)");

  std::vector<CheckResult> checks;
  checks.push_back(check_gradient_oracle());
  checks.push_back(check_split_equivalence());
  checks.push_back(check_fedavg_equivalence(inject));
  checks.push_back(check_minibatch_equivalence());
  checks.push_back(check_sync_equalization());
  checks.push_back(check_schedule_condition());
  checks.push_back(check_bound_examples());
  checks.push_back(check_bound_monotonicity());

  const QuadraticBattery bound_bat =
      run_bound_battery(inject == "r-halved" ? 0.5 : 1.0);
  checks.push_back(trajectory_check_result("prop1-trajectory", bound_bat.runs,
                                           bound_bat.inputs,
                                           BoundSide::kServer));
  checks.push_back(trajectory_check_result("prop2-trajectory", bound_bat.runs,
                                           bound_bat.inputs,
                                           BoundSide::kClient));
  {
    CheckResult res{"rate-fit"};
    const RateFit rf = rate_fit(bound_bat.runs, bound_bat.inputs.gamma_value);
    res.passed = rf.slope >= -1.4 && rf.slope <= -0.7;
    res.detail = "slope " + format_full(rf.slope) + " (expected in [-1.4, "
                 "-0.7]), r^2 " + format_full(rf.r_squared);
    checks.push_back(res);
  }

  const QuadraticBattery lemma_bat = run_lemma_battery();
  {
    CheckResult res{"divergence-lemma"};
    const LemmaCheck lc =
        check_divergence_lemma(lemma_bat.runs, lemma_bat.inputs.R,
                               lemma_bat.inputs.delta, 0.05);
    bool sync_zero = true;
    const long em = static_cast<long>(lemma_bat.inputs.E) * lemma_bat.inputs.M;
    for (const RunLog& log : lemma_bat.runs)
      for (const StepRecord& rec : log.steps)
        if (rec.i > 0 && rec.i % em == 0 && rec.client_divergence != 0.0)
          sync_zero = false;
    res.passed = lc.violations == 0 && sync_zero;
    res.detail = "checked " + std::to_string(lc.checked) + " steps, " +
                 std::to_string(lc.violations) + " violations, max ratio " +
                 format_full(lc.max_ratio) +
                 (sync_zero ? ", divergence 0 at every sync"
                            : ", NONZERO divergence at a sync point");
    checks.push_back(res);
  }
  {
    CheckResult res{"variance-lemma"};
    const LemmaCheck lc =
        check_variance_lemma(lemma_bat.runs, lemma_bat.inputs.sigma_sq,
                             lemma_bat.inputs.p, 0.05);
    res.passed = lc.violations == 0;
    res.detail = "checked " + std::to_string(lc.checked) + " steps, " +
                 std::to_string(lc.violations) + " violations, max ratio " +
                 format_full(lc.max_ratio);
    checks.push_back(res);
  }

  bool all = true;
  json jchecks = json::array();
  for (const CheckResult& c : checks) {
    all = all && c.passed;
    out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    json j;
    j["name"] = c.name;
    j["passed"] = c.passed;
    j["detail"] = c.detail;
    jchecks.push_back(j);
  }
  out << (all ? "all checks passed" : "CHECK FAILURES PRESENT") << "\n";

  if (!report_path.empty()) {
    json report;
    report["inject"] = inject;
    report["passed"] = all;
    report["checks"] = jchecks;
    atomic_write(report_path, report.dump(2) + "\n");
    out << "report: " << report_path << "\n";
  }
  return all ? 0 : 1;
}

}  // namespace sfl
