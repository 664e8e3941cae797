#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sfl {

// All numerics run in 64-bit floating point; tolerances throughout assume it.
using Scalar = double;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;

// Thrown when a computation produces a non-finite value (exploding step,
// bad learning rate, ...). Carries the offending context in what().
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// splitmix64: tiny, well-mixed 64-bit hash step. Used to derive independent
// RNG seeds from (master seed, structured tags) so that every client / round /
// epoch gets its own stream regardless of scheduling or thread count.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag));
}

template <typename... Tags>
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag, Tags... rest) {
  return mix_seed(mix_seed(seed, tag), static_cast<std::uint64_t>(rest)...);
}

// Formats a double with 17 significant digits: enough to round-trip any
// IEEE-754 binary64 value, so logs are bit-faithful.
std::string format_full(double v);

}  // namespace sfl
