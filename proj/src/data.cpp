#include "sfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace sfl {

void seeded_shuffle(std::vector<int>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    const std::uint64_t span = v.size() - i;
    const std::size_t j = i + static_cast<std::size_t>(rng() % span);
    std::swap(v[i], v[j]);
  }
}

Matrix make_class_centers(int classes, int d, std::uint64_t seed) {
  if (classes <= 0 || d <= 0)
    throw std::invalid_argument("make_class_centers: positive dims required");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix centers(classes, d);
  for (int k = 0; k < classes; ++k) {
    Vector v(d);
    do {
      for (int j = 0; j < d; ++j) v(j) = gauss(rng);
    } while (v.norm() < 1e-12);
    centers.row(k) = 2.0 * v.transpose() / v.norm();
  }
  return centers;
}

Dataset sample_classification(const Matrix& centers, int per_class,
                              double spread, std::uint64_t seed) {
  if (per_class <= 0)
    throw std::invalid_argument("sample_classification: per_class must be positive");
  if (spread < 0)
    throw std::invalid_argument("sample_classification: spread must be >= 0");
  const int classes = static_cast<int>(centers.rows());
  const int d = static_cast<int>(centers.cols());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset out;
  out.classification = true;
  out.features.resize(static_cast<long>(classes) * per_class, d);
  out.labels.resize(static_cast<long>(classes) * per_class);
  long row = 0;
  for (int k = 0; k < classes; ++k) {
    for (int s = 0; s < per_class; ++s, ++row) {
      for (int j = 0; j < d; ++j)
        out.features(row, j) = centers(k, j) + spread * gauss(rng);
      out.labels(row) = k;
    }
  }
  return out;
}

Dataset gen_synthetic_classification(int d, int classes, int per_class,
                                     double spread, std::uint64_t seed) {
  const Matrix centers = make_class_centers(classes, d, mix_seed(seed, 0xCE17));
  return sample_classification(centers, per_class, spread, mix_seed(seed, 0x5A3));
}

Partition partition_noniid(const Dataset& data, int n_clients, double r,
                           std::uint64_t seed, bool uniform_weights) {
  if (n_clients <= 0)
    throw std::invalid_argument("partition_noniid: n_clients must be positive");
  if (!(r >= 0.0 && r <= 1.0))
    throw std::invalid_argument("partition_noniid: r outside [0, 1]");
  const long D = data.size();
  if (D == 0) throw std::invalid_argument("partition_noniid: empty dataset");
  if (!data.classification)
    throw std::invalid_argument("partition_noniid: labels required");

  std::vector<int> order(D);
  for (long i = 0; i < D; ++i) order[i] = static_cast<int>(i);
  seeded_shuffle(order, seed);

  const long uniform_count = static_cast<long>(std::floor((1.0 - r) * D));
  Partition out;
  out.shards.resize(n_clients);
  for (int n = 0; n < n_clients; ++n) out.shards[n].client_id = n;

  for (long j = 0; j < uniform_count; ++j)
    out.shards[j % n_clients].indices.push_back(order[j]);

  std::vector<int> rest(order.begin() + uniform_count, order.end());
  std::stable_sort(rest.begin(), rest.end(), [&](int a, int b) {
    if (data.labels(a) != data.labels(b)) return data.labels(a) < data.labels(b);
    return a < b;
  });
  const long base = static_cast<long>(rest.size()) / n_clients;
  long at = 0;
  for (int n = 0; n < n_clients; ++n) {
    const long take = (n == n_clients - 1)
                          ? static_cast<long>(rest.size()) - at
                          : base;
    for (long j = 0; j < take; ++j)
      out.shards[n].indices.push_back(rest[at + j]);
    at += take;
  }

  out.weights.resize(n_clients);
  for (int n = 0; n < n_clients; ++n) {
    out.weights(n) = uniform_weights
                         ? 1.0 / n_clients
                         : static_cast<double>(out.shards[n].indices.size()) /
                               static_cast<double>(D);
  }
  return out;
}

BatchPlan make_batch_plan(const Shard& shard, int batch_size, int batches,
                          std::uint64_t seed) {
  if (batch_size <= 0 || batches <= 0)
    throw std::invalid_argument("make_batch_plan: batch_size and batches must be positive");
  if (shard.indices.empty())
    throw std::invalid_argument("make_batch_plan: client " +
                                std::to_string(shard.client_id) +
                                " has an empty shard");
  const long need = static_cast<long>(batch_size) * batches;
  std::vector<int> stream;
  stream.reserve(need);
  std::uint64_t lap = 0;
  while (static_cast<long>(stream.size()) < need) {
    std::vector<int> perm = shard.indices;
    seeded_shuffle(perm, mix_seed(seed, lap));
    for (int idx : perm) {
      if (static_cast<long>(stream.size()) == need) break;
      stream.push_back(idx);
    }
    ++lap;
  }
  BatchPlan plan;
  plan.client_id = shard.client_id;
  plan.batches.resize(batches);
  long at = 0;
  for (int m = 0; m < batches; ++m) {
    plan.batches[m].assign(stream.begin() + at, stream.begin() + at + batch_size);
    at += batch_size;
  }
  return plan;
}

namespace {

void finish_quadratic(QuadraticTask& t) {
  const int N = static_cast<int>(t.shards.size());
  const int d = static_cast<int>(t.centers.cols());
  t.client_means.resize(N, d);
  t.within_value.resize(N);
  for (int n = 0; n < N; ++n) {
    Vector mean = Vector::Zero(d);
    for (int idx : t.shards[n].indices) mean += t.centers.row(idx).transpose();
    mean /= static_cast<double>(t.shards[n].indices.size());
    t.client_means.row(n) = mean.transpose();
    double v = 0.0;
    for (int idx : t.shards[n].indices)
      v += 0.5 * (t.centers.row(idx).transpose() - mean).squaredNorm();
    t.within_value(n) = v / static_cast<double>(t.shards[n].indices.size());
  }
  t.w_star = Vector::Zero(d);
  for (int n = 0; n < N; ++n)
    t.w_star += t.weights(n) * t.client_means.row(n).transpose();
}

}  // namespace

QuadraticTask build_quadratic_task(const Matrix& client_centers,
                                   const Vector& weights) {
  const int N = static_cast<int>(client_centers.rows());
  if (N == 0) throw std::invalid_argument("build_quadratic_task: no clients");
  if (weights.size() != N)
    throw std::invalid_argument("build_quadratic_task: weight count mismatch");
  if (std::abs(weights.sum() - 1.0) > 1e-12)
    throw std::invalid_argument("build_quadratic_task: weights sum to " +
                                format_full(weights.sum()) + ", expected 1");
  QuadraticTask t;
  t.centers = client_centers;
  t.weights = weights;
  t.shards.resize(N);
  for (int n = 0; n < N; ++n) {
    t.shards[n].client_id = n;
    t.shards[n].indices = {n};
  }
  finish_quadratic(t);
  return t;
}

QuadraticTask assemble_quadratic_task(Matrix centers, std::vector<Shard> shards,
                                      Vector weights) {
  const int N = static_cast<int>(shards.size());
  if (N == 0) throw std::invalid_argument("assemble_quadratic_task: no shards");
  if (weights.size() != N)
    throw std::invalid_argument("assemble_quadratic_task: weight count mismatch");
  if (std::abs(weights.sum() - 1.0) > 1e-12)
    throw std::invalid_argument("assemble_quadratic_task: weights sum to " +
                                format_full(weights.sum()) + ", expected 1");
  for (int n = 0; n < N; ++n) {
    if (shards[n].indices.empty())
      throw std::invalid_argument("assemble_quadratic_task: empty shard");
    for (int idx : shards[n].indices)
      if (idx < 0 || idx >= centers.rows())
        throw std::invalid_argument("assemble_quadratic_task: index out of range");
  }
  QuadraticTask t;
  t.centers = std::move(centers);
  t.shards = std::move(shards);
  t.weights = std::move(weights);
  finish_quadratic(t);
  return t;
}

QuadraticTask gen_quadratic_clients(int n_clients, int d, int per_client,
                                    double center_scale, double noise_std,
                                    std::uint64_t seed) {
  if (n_clients <= 0 || d <= 0 || per_client <= 0)
    throw std::invalid_argument("gen_quadratic_clients: positive sizes required");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  QuadraticTask t;
  t.centers.resize(static_cast<long>(n_clients) * per_client, d);
  t.shards.resize(n_clients);
  long row = 0;
  for (int n = 0; n < n_clients; ++n) {
    Vector mean(d);
    for (int j = 0; j < d; ++j) mean(j) = center_scale * gauss(rng);
    t.shards[n].client_id = n;
    for (int s = 0; s < per_client; ++s, ++row) {
      for (int j = 0; j < d; ++j)
        t.centers(row, j) = mean(j) + noise_std * gauss(rng);
      t.shards[n].indices.push_back(static_cast<int>(row));
    }
  }
  t.weights = Vector::Constant(n_clients, 1.0 / n_clients);
  finish_quadratic(t);
  return t;
}

double quadratic_delta_hat(const QuadraticTask& task) {
  double best = 0.0;
  for (int n = 0; n < task.client_means.rows(); ++n) {
    best = std::max(
        best, (task.w_star - task.client_means.row(n).transpose()).norm());
  }
  return best;
}

Vector quadratic_sigma_sq(const QuadraticTask& task, int batch_size) {
  if (batch_size <= 0)
    throw std::invalid_argument("quadratic_sigma_sq: batch_size must be positive");
  const int N = static_cast<int>(task.shards.size());
  Vector out(N);
  for (int n = 0; n < N; ++n) {
    const long D = static_cast<long>(task.shards[n].indices.size());
    const long m = batch_size % D;  // only the partial lap carries variance
    if (m == 0 || D == 1) {
      out(n) = 0.0;
      continue;
    }
    double pop_var = 0.0;  // (1/D) sum_j ||c_j - mean||^2
    const Vector mean = task.client_means.row(n).transpose();
    for (int idx : task.shards[n].indices)
      pop_var += (task.centers.row(idx).transpose() - mean).squaredNorm();
    pop_var /= static_cast<double>(D);
    // Variance of the mean of a uniform without-replacement m-subset, scaled
    // by the partial lap's share of the batch.
    const double srswor = pop_var / static_cast<double>(m) *
                          static_cast<double>(D - m) /
                          static_cast<double>(D - 1);
    const double share = static_cast<double>(m) / static_cast<double>(batch_size);
    out(n) = share * share * srswor;
  }
  return out;
}

double quadratic_gamma_gap(const QuadraticTask& task, int client_dims) {
  if (client_dims < 0 || client_dims > task.centers.cols())
    throw std::invalid_argument("quadratic_gamma_gap: client_dims out of range");
  double gap = 0.0;
  for (int n = 0; n < task.client_means.rows(); ++n) {
    const Vector diff = task.w_star.head(client_dims) -
                        task.client_means.row(n).head(client_dims).transpose();
    gap += task.weights(n) * 0.5 * diff.squaredNorm();
  }
  return gap;
}

double mean_label_entropy(const Dataset& data, const std::vector<Shard>& shards) {
  if (shards.empty()) throw std::invalid_argument("mean_label_entropy: no shards");
  const int K = data.labels.size() ? data.labels.maxCoeff() + 1 : 0;
  double total = 0.0;
  for (const auto& shard : shards) {
    std::vector<long> counts(K, 0);
    for (int idx : shard.indices) ++counts[data.labels(idx)];
    double h = 0.0;
    for (long c : counts) {
      if (c == 0) continue;
      const double p = static_cast<double>(c) / shard.indices.size();
      h -= p * std::log(p);
    }
    total += h;
  }
  return total / static_cast<double>(shards.size());
}

namespace {

std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("truncated idx file: " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("cannot open " + images_path);
  const std::uint32_t img_magic = read_u32_be(img, images_path);
  if (img_magic != 0x00000803u) {
    std::ostringstream os;
    os << images_path << ": bad image magic 0x" << std::hex << img_magic;
    throw std::invalid_argument(os.str());
  }
  const std::uint32_t count = read_u32_be(img, images_path);
  const std::uint32_t rows = read_u32_be(img, images_path);
  const std::uint32_t cols = read_u32_be(img, images_path);
  const long pixels = static_cast<long>(rows) * cols;

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("cannot open " + labels_path);
  const std::uint32_t lab_magic = read_u32_be(lab, labels_path);
  if (lab_magic != 0x00000801u) {
    std::ostringstream os;
    os << labels_path << ": bad label magic 0x" << std::hex << lab_magic;
    throw std::invalid_argument(os.str());
  }
  const std::uint32_t lab_count = read_u32_be(lab, labels_path);
  if (lab_count != count) {
    std::ostringstream os;
    os << "idx count mismatch: " << count << " images vs " << lab_count
       << " labels";
    throw std::invalid_argument(os.str());
  }

  Dataset out;
  out.classification = true;
  out.features.resize(count, pixels);
  out.labels.resize(count);
  std::vector<unsigned char> buf(pixels);
  for (std::uint32_t i = 0; i < count; ++i) {
    img.read(reinterpret_cast<char*>(buf.data()), pixels);
    if (!img) throw std::runtime_error("truncated idx file: " + images_path);
    for (long j = 0; j < pixels; ++j)
      out.features(i, j) = static_cast<double>(buf[j]) / 255.0;
    unsigned char y;
    lab.read(reinterpret_cast<char*>(&y), 1);
    if (!lab) throw std::runtime_error("truncated idx file: " + labels_path);
    out.labels(i) = y;
  }
  return out;
}

}  // namespace sfl
