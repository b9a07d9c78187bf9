#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>

namespace tdsm {

// Deterministic random source. All randomness in the library flows through
// this wrapper; draws are consumed in a fixed documented order so that a
// fixed seed reproduces results bit-exactly across platforms (the standard
// mt19937_64 engine is portable, and the uniform/normal transforms below
// avoid the implementation-defined std::distribution algorithms).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Uniform in [lo, hi).
  double uniform(double lo, double hi);

  // Standard normal via the Box-Muller transform; draws are generated in
  // pairs and the second value is cached.
  double normal();

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

  // Matrix of independent standard normals, filled row-major.
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);

  // Log-uniform value in [lo, hi]; requires 0 < lo < hi.
  double log_uniform(double lo, double hi);

 private:
  std::mt19937_64 engine_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

// Stateless counter-based stream: a deterministic 64-bit hash of
// (seed, index), suitable for per-record decisions that must not depend on
// visit order. Mixing follows the splitmix64 finalizer.
std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t index);

// Uniform [0, 1) double derived from counter_hash.
double counter_uniform(std::uint64_t seed, std::uint64_t index);

}  // namespace tdsm
