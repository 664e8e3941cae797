#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "sfl/algorithms.hpp"
#include "sfl/analysis.hpp"
#include "sfl/task.hpp"

namespace sfl {

// Fully resolved experiment description: task construction, training knobs,
// the sweep axes, and output destination. parse_config applies the defaults
// below to whatever the file leaves out, so this struct is also the echo of
// record for a run.
struct ExperimentConfig {
  // Task selection: "synthetic_classification", "quadratic", or "idx_files".
  std::string task = "synthetic_classification";

  // Synthetic classification task.
  int dim = 20;
  int classes = 10;
  int per_class = 100;
  int eval_per_class = 20;
  double spread = 1.0;
  std::vector<int> hidden = {32, 32};

  // Quadratic task.
  int quad_per_client = 16;
  double quad_center_scale = 1.0;
  double quad_noise = 1.0;
  double quad_init_scale = 0.0;

  // IDX file task.
  std::string idx_images, idx_labels, idx_eval_images, idx_eval_labels;

  // Clients and data split.
  int clients = 10;
  bool uniform_weights = false;
  std::uint64_t data_seed = 1;

  // Training core (TrainConfig fields).
  int rounds = 1;
  int epochs = 5;
  int batches_per_epoch = 1;
  int batch_size = 32;
  ScheduleParams schedule;  // constant 0.01 unless configured otherwise
  bool log_every_step = false;
  bool eval_every_log = false;
  bool log_client_grads = false;
  bool log_variance_samples = false;
  bool sfl_v2_shuffle = false;

  // Sweep axes.
  std::vector<std::string> algorithms = {"minibatch_sfl"};
  std::vector<double> r_values = {0.0};
  std::vector<int> cut_layers = {1};
  std::vector<std::uint64_t> seeds = {1};

  // Output.
  std::string out_dir;  // empty: $SFLSIM_OUT or "runs"
  int workers = 1;
};

// Loads a JSON config file, applies `key=value` overrides (values parsed as
// JSON when possible, else taken as strings), fills defaults, validates.
// Unknown or ill-typed keys throw with the offending key path. Warnings
// (e.g. duplicate seeds) go to `warnings` when non-null.
ExperimentConfig parse_config(const std::string& path,
                              const std::vector<std::string>& overrides = {},
                              std::vector<std::string>* warnings = nullptr);

// Canonical one-line JSON echo of a resolved config (keys sorted), and the
// FNV-1a content hash of that echo, printed as 16 hex digits.
std::string config_echo(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

// Builds the task for one sweep cell. r is ignored by the quadratic task.
std::unique_ptr<SplitTask> build_task(const ExperimentConfig& cfg, double r,
                                      int cut);

// Runs one sweep cell.
RunLog run_cell(const ExperimentConfig& cfg, const std::string& algorithm,
                double r, int cut, std::uint64_t seed);

// Deterministic file name for a cell: <algorithm>_r<r>_cut<cut>_seed<seed>.csv
std::string cell_csv_name(const std::string& algorithm, double r, int cut,
                          std::uint64_t seed);

// Writes one run as CSV: '#'-prefixed header lines carrying the config echo
// and hash, the fixed column row, one row per logged step (floats with 17
// significant digits, absent values empty), and a '#' footer with the final
// metrics. The file appears atomically.
void write_run_csv(const std::string& path, const RunLog& log,
                   const ExperimentConfig& cfg);

// Subcommand bodies; all return a process exit code.
int cmd_run(const ExperimentConfig& cfg, std::ostream& out);
int cmd_compare(const std::vector<std::string>& summary_paths,
                const std::string& json_out, std::ostream& out);
int cmd_check(const std::string& inject, const std::string& report_path,
              std::ostream& out);
int cmd_estimate_constants(const ExperimentConfig& cfg, int probes,
                           int batches_per_probe, std::ostream& out);

// Pre-configured quadratic experiment batteries shared by `check` and the
// acceptance suite. Constants are exact where the task admits it (mu, S,
// delta, Gamma, sigma); R is estimated from seeded probes and scaled by
// r_scale (so r_scale=0.5 is the negative control for the bound checks).
struct QuadraticBattery {
  std::vector<RunLog> runs;  // one per seed
  BoundInputs inputs;
  ConstantsEstimate est;
};

// Bound-trajectory battery: 4 clients in 2 dims (cut 1), diminishing
// schedule, 500 steps, every step logged.
QuadraticBattery run_bound_battery(double r_scale, int n_seeds = 10);

// Lemma battery: 4 clients in 8 dims (cut 2), variance samples logged.
QuadraticBattery run_lemma_battery(int n_seeds = 10);

// Toy classification sweep behind the directional observation checks
// (algorithm comparison at a mid cut; metric monotonicity across cuts).
ExperimentConfig observation_config();

}  // namespace sfl
