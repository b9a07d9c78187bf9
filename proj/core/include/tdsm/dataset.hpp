#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "tdsm/gmm.hpp"
#include "tdsm/transition.hpp"

namespace tdsm {

// Training data: instances with clean labels (optional after loading from a
// file that omits them) and noisy labels, plus per-noisy-class counts.
struct NoisyDataset {
  Eigen::MatrixXd instances;      // n x d
  std::vector<int> clean_labels;  // 0-based; may be empty
  std::vector<int> noisy_labels;  // 0-based
  Eigen::VectorXi counts;         // noisy-label counts per class
  std::uint64_t seed = 0;
  int classes = 0;

  Eigen::Index size() const { return instances.rows(); }
  void validate() const;
};

// Draw n points from the mixture: labels by clean prior, x ~ N(mu_y, v_y I).
struct MixtureSample {
  Eigen::MatrixXd instances;
  std::vector<int> labels;
};

MixtureSample sample_mixture(const GaussianMixture& gmm, Eigen::Index n,
                             std::uint64_t seed);

// Corrupt each clean label along its row of the forward matrix T. Each
// record uses its own counter-derived uniform, so the result is bit-exact
// for a given seed no matter how the work is partitioned. The draw u selects
// the first class whose cumulative row mass exceeds u (strict less-than);
// if rounding leaves u at or beyond the final boundary, the last class wins.
NoisyDataset corrupt_labels(const Eigen::MatrixXd& instances,
                            const std::vector<int>& clean_labels,
                            const TransitionMatrix& T, std::uint64_t seed);

// CSV round trip. Header `x1,...,xd,clean_label,noisy_label`; labels are
// written 1-based; the clean_label column may be empty. A leading comment
// line `# config_hash=<hex>` is written when a hash is supplied.
void write_dataset_csv(const std::string& path, const NoisyDataset& ds,
                       const std::string& config_hash = "");
NoisyDataset read_dataset_csv(const std::string& path, int classes);

}  // namespace tdsm
