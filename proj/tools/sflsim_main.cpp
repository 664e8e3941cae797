#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sfl/experiment.hpp"

namespace {

sfl::ExperimentConfig load_config(const std::string& path,
                                  const std::vector<std::string>& sets) {
  std::vector<std::string> warnings;
  sfl::ExperimentConfig cfg = sfl::parse_config(path, sets, &warnings);
  for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic split-learning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  int workers = 0;

  CLI::App* run = app.add_subcommand("run", "run the configured sweep");
  run->add_option("--config", config_path, "JSON config file")->required();
  run->add_option("--set", sets, "override a config key (key=value)");
  run->add_option("--out", out_dir, "output directory (overrides config)");
  run->add_option("--workers", workers, "worker threads (overrides config)");

  std::vector<std::string> summary_paths;
  std::string json_out;
  CLI::App* compare =
      app.add_subcommand("compare", "compare two or more run summaries");
  compare->add_option("summaries", summary_paths, "summary.json files")
      ->expected(-2);
  compare->add_option("--json", json_out, "comparison report path");

  std::string inject = "none";
  std::string report_path;
  CLI::App* check =
      app.add_subcommand("check", "run the internal consistency checks");
  check->add_option("--inject", inject,
                    "deliberately break one invariant (lr-perturb, r-halved)");
  check->add_option("--report", report_path, "write a JSON report here");

  int probes = 3;
  int batches_per_probe = 16;
  CLI::App* estimate = app.add_subcommand(
      "estimate-constants", "estimate problem constants from probe runs");
  estimate->add_option("--config", config_path, "JSON config file")->required();
  estimate->add_option("--set", sets, "override a config key (key=value)");
  estimate->add_option("--probes", probes, "number of probe points");
  estimate->add_option("--batches", batches_per_probe, "batches per probe");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      sfl::ExperimentConfig cfg = load_config(config_path, sets);
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (workers > 0) cfg.workers = workers;
      return sfl::cmd_run(cfg, std::cout);
    }
    if (compare->parsed())
      return sfl::cmd_compare(summary_paths, json_out, std::cout);
    if (check->parsed()) return sfl::cmd_check(inject, report_path, std::cout);
    if (estimate->parsed()) {
      sfl::ExperimentConfig cfg = load_config(config_path, sets);
      return sfl::cmd_estimate_constants(cfg, probes, batches_per_probe,
                                         std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
