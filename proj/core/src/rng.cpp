#include "tdsm/rng.hpp"

#include <cmath>
#include <numbers>

#include "tdsm/errors.hpp"

namespace tdsm {

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  // 1 - u keeps the log argument in (0, 1].
  const double r = std::sqrt(-2.0 * std::log1p(-uniform()));
  const double a = 2.0 * std::numbers::pi * uniform();
  cached_ = r * std::sin(a);
  has_cached_ = true;
  return r * std::cos(a);
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw InconsistentInputError("uniform_index: n must be positive");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = n * (UINT64_MAX / n);
  std::uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return v % n;
}

Eigen::MatrixXd Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
  return m;
}

double Rng::log_uniform(double lo, double hi) {
  if (!(0.0 < lo && lo < hi))
    throw InconsistentInputError("log_uniform: need 0 < lo < hi");
  return std::exp(uniform(std::log(lo), std::log(hi)));
}

std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + (index + 1) * 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double counter_uniform(std::uint64_t seed, std::uint64_t index) {
  return static_cast<double>(counter_hash(seed, index) >> 11) * 0x1.0p-53;
}

}  // namespace tdsm
