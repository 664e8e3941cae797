#pragma once

// Internal helpers shared by the training drivers: seed tags, config
// validation, and the RunLog assembly they all use, so every algorithm logs
// the same metrics the same way.

#include <limits>
#include <string>
#include <vector>

#include "sfl/analysis.hpp"
#include "sfl/protocol.hpp"

namespace sfl::detail {

inline constexpr std::uint64_t kInitTag = 0x1717;
inline constexpr std::uint64_t kBatchTag = 0xBA7C;
inline constexpr std::uint64_t kCentralTag = 0xCE;
inline constexpr std::uint64_t kOrderTag = 0x0D3A;

void validate_config(const TrainConfig& cfg, const SplitTask& task);

class LogBuilder {
 public:
  LogBuilder(std::string algo, const TrainConfig& cfg, const SplitTask& task,
             int cut_metric, double gamma_or_nan);

  // `clients` holds either one vector per client or a single shared model;
  // `server_view` is the vector used for server-side metrics.
  void record_initial(const std::vector<Vector>& clients, const Vector& server_view);
  void record_step(long i, int t, int e, int m, double eta_c, double eta_s,
                   const std::vector<Vector>& clients, const Vector& server_view,
                   const StepDiag& diag, bool synced, double agg_dev_sq);
  void push_trace(const std::vector<Vector>& clients, const Vector& server_view);
  void push_trace_per_client_server(const std::vector<Vector>& clients,
                                    const std::vector<Vector>& servers);
  void finalize(const std::vector<Vector>& clients, const Vector& server_view);
  void abort(long i, const std::string& why);

  RunLog take() { return std::move(log_); }
  const RunLog& log() const { return log_; }

 private:
  Vector client_mean(const std::vector<Vector>& clients) const;

  const SplitTask& task_;
  const TrainConfig& cfg_;
  RunLog log_;
  bool has_opt_ = false;
  Vector opt_c_, opt_s_;
};

}  // namespace sfl::detail
