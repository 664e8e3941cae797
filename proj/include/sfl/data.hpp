#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfl/types.hpp"

namespace sfl {

// A labeled sample collection. Features are stored one row per sample (the
// on-disk orientation); batches are assembled column-per-sample at use sites.
struct Dataset {
  Matrix features;         // D x d
  IntVector labels;        // size D when classification
  bool classification = true;

  long size() const { return features.rows(); }
  int dim() const { return static_cast<int>(features.cols()); }
};

// One client's slice of a dataset: indices into the dataset's rows.
struct Shard {
  int client_id = -1;
  std::vector<int> indices;
};

struct Partition {
  std::vector<Shard> shards;
  Vector weights;  // p_n, sums to 1
};

// Class centers: seeded unit-norm directions scaled by 2.
Matrix make_class_centers(int classes, int d, std::uint64_t seed);

// Gaussian blobs around given centers; per_class samples per class, noise
// standard deviation `spread`. Labels are the class indices.
Dataset sample_classification(const Matrix& centers, int per_class,
                              double spread, std::uint64_t seed);

// Convenience: centers + samples in one call.
Dataset gen_synthetic_classification(int d, int classes, int per_class,
                                     double spread, std::uint64_t seed);

// Label-skew partitioner. A seeded shuffle of all indices is split: the first
// floor((1-r)*D) entries are dealt round-robin (entry j to client j mod N);
// the remainder is stably sorted by (label, original index) and cut into N
// contiguous blocks, the last block absorbing the remainder, block k going to
// client k. r=0 is fully uniform, r=1 fully label-sorted.
Partition partition_noniid(const Dataset& data, int n_clients, double r,
                           std::uint64_t seed, bool uniform_weights = false);

// One epoch of batches for one client: a seeded permutation of the shard is
// chunked into M batches of B. If the shard is smaller than M*B the
// permutation repeats (re-seeded per lap) until filled, so sample counts per
// epoch differ by at most one.
struct BatchPlan {
  int client_id = -1;
  std::vector<std::vector<int>> batches;  // M x B dataset row indices
};

BatchPlan make_batch_plan(const Shard& shard, int batch_size, int batches,
                          std::uint64_t seed);

// Separable quadratic objectives: client n holds sample centers c_j and
// f_n(w; batch) = mean_j 0.5*||w - c_j||^2, so grad f_n(w) = w - mean(c).
// The global optimum and heterogeneity constants are all closed-form.
struct QuadraticTask {
  Matrix centers;        // all sample centers, D x d (row per sample)
  std::vector<Shard> shards;
  Vector weights;        // p_n
  Matrix client_means;   // N x d shard means
  Vector w_star;         // sum_n p_n * mean_n
  Vector within_value;   // v_n = (1/D_n) sum_j 0.5*||c_j - mean_n||^2
};

// One center per client (deterministic objectives, no batch noise).
QuadraticTask build_quadratic_task(const Matrix& client_centers,
                                   const Vector& weights);

// General form: explicit sample centers plus a shard layout. Validates that
// shards cover rows with the given weights and fills in the derived fields
// (client means, optimum, within-shard values).
QuadraticTask assemble_quadratic_task(Matrix centers, std::vector<Shard> shards,
                                      Vector weights);

// Stochastic variant: client means ~ center_scale * N(0, I), per-sample
// centers = mean + noise_std * N(0, I). Uniform client weights.
QuadraticTask gen_quadratic_clients(int n_clients, int d, int per_client,
                                    double center_scale, double noise_std,
                                    std::uint64_t seed);

// max_n || w* - mean_n ||: the exact gradient-divergence constant (the
// difference between per-client and global gradients is w-independent here).
double quadratic_delta_hat(const QuadraticTask& task);

// Exact per-client variance of the batch-mean gradient for batches drawn as
// chunks of a shard permutation (a uniformly distributed without-replacement
// B-subset). Valid while an epoch's chunks stay within one permutation lap,
// i.e. batch_size * batches_per_epoch <= shard size (or B a multiple of it).
Vector quadratic_sigma_sq(const QuadraticTask& task, int batch_size);

// Gamma-gap: F(w*) minus the weighted per-client minima attainable by the
// client-side coordinates when the server side is pinned at its optimum.
// Equals sum_n p_n * 0.5 * || w_c* - mean_{n,client coords} ||^2.
double quadratic_gamma_gap(const QuadraticTask& task, int client_dims);

// Mean over clients of the entropy (nats) of each shard's label histogram.
double mean_label_entropy(const Dataset& data, const std::vector<Shard>& shards);

// IDX-format loader (big-endian magics 0x00000803 for images, 0x00000801 for
// labels). Pixels scaled to [0, 1]. Throws on bad magic, truncation, or an
// image/label count mismatch.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Deterministic in-place Fisher-Yates driven by our own bounded draws, so the
// permutation depends only on the seed (not on any library's shuffle choice).
void seeded_shuffle(std::vector<int>& v, std::uint64_t seed);

}  // namespace sfl
