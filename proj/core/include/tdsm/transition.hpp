#pragma once

#include <Eigen/Core>
#include <string>
#include <utility>
#include <vector>

namespace tdsm {

// Row-stochastic label-transition matrix. A forward matrix T stores
// T(i,j) = p(noisy = j | clean = i); a reverse matrix S stores
// S(i,j) = p(clean = j | noisy = i). Class indices are 0-based throughout
// the API; serialized files use 1-based labels.
enum class Orientation { forward, reverse };

struct TransitionMatrix {
  Orientation orientation = Orientation::forward;
  int c = 0;
  Eigen::MatrixXd rows;  // c x c

  // Checks row sums (within tol), entry range, and shape.
  void validate(double tol = 1e-10) const;
};

// Uniform off-diagonal noise: diagonal 1 - rate, off-diagonal rate/(c-1).
// Rates at or above (c-1)/c are rejected: the diagonal would no longer
// dominate and invertibility is no longer guaranteed by construction.
TransitionMatrix make_symmetric(int c, double rate);

// Row `from` moves `rate` mass to `to`; all other rows are identity rows.
TransitionMatrix make_asymmetric(int c,
                                 const std::vector<std::pair<int, int>>& flips,
                                 double rate);

// Bayes conversion between orientations. Given the forward matrix and one
// prior, produces the reverse matrix and the other prior:
//   S(i,j) = T(j,i) * p(clean = j) / p(noisy = i),  p(noisy) = T^t p(clean),
// and when the noisy prior is supplied instead, the clean prior is recovered
// from the linear system diag(1/p(noisy)) T^t p(clean) = 1.
enum class PriorSide { clean, noisy };

struct OrientedPair {
  TransitionMatrix forward;
  TransitionMatrix reverse;
  Eigen::VectorXd clean_prior;
  Eigen::VectorXd noisy_prior;
};

OrientedPair reverse_from_forward(const TransitionMatrix& T,
                                  const Eigen::VectorXd& prior,
                                  PriorSide side = PriorSide::clean);

// Same conversion starting from the reverse matrix.
OrientedPair forward_from_reverse(const TransitionMatrix& S,
                                  const Eigen::VectorXd& prior,
                                  PriorSide side = PriorSide::clean);

// Convex mix with the identity: (1 - mix) M + mix I. Returns the mixed
// matrix and its determinant so callers can verify invertibility.
struct InvertibleResult {
  TransitionMatrix matrix;
  double determinant = 0.0;
};

InvertibleResult ensure_invertible(const TransitionMatrix& M, double mix);

// JSON (de)serialization: {"orientation": "forward"|"reverse", "c": n,
// "rows": [[...], ...]}. An optional header comment line carrying a config
// hash is handled by the io helpers.
std::string transition_to_json(const TransitionMatrix& m);
TransitionMatrix transition_from_json(const std::string& text);
void write_transition_json(const std::string& path, const TransitionMatrix& m,
                           const std::string& config_hash = "");
TransitionMatrix read_transition_json(const std::string& path);

}  // namespace tdsm
