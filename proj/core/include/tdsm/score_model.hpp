#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "tdsm/nn/param_store.hpp"
#include "tdsm/nn/tape.hpp"

namespace tdsm {

// Conditional score network s(x, y, t): an MLP over (x, class embedding,
// time features). Label index `classes` selects the learned unconditional
// (null-class) embedding row.
struct ScoreModelArch {
  int dim = 2;
  int classes = 2;
  std::vector<int> hidden = {128, 128, 128};
  int class_embed = 16;
  int time_embed = 16;  // even; sin/cos pairs over log t
  // "direct": network output is the score.
  // "noise": network predicts the added noise; score = -output / sigma(t).
  std::string parameterization = "direct";
  void validate() const;
};

// Sinusoidal features of log t: columns alternate sin/cos over a geometric
// frequency ladder starting low enough to stay injective across several
// decades of t.
Eigen::MatrixXd time_embedding(const Eigen::VectorXd& t, int width);

class ScoreModel {
 public:
  ScoreModel(ScoreModelArch arch, unsigned long long seed);
  ScoreModel(ScoreModelArch arch, nn::ParamStore params);

  const ScoreModelArch& arch() const { return arch_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  int null_label() const { return arch_.classes; }

  // Builds the network on the tape with trainable parameters and returns the
  // node id of the (batch, dim) score output. Gradients flow into params().
  int forward(nn::Tape& tape, const Eigen::MatrixXd& x,
              const std::vector<int>& labels, const Eigen::VectorXd& t);

  // Same computation with parameters as constants (identical op order, so
  // values match forward() bitwise); usable on a const model.
  int forward_frozen(nn::Tape& tape, const Eigen::MatrixXd& x,
                     const std::vector<int>& labels,
                     const Eigen::VectorXd& t) const;

  // Convenience evaluation without keeping the tape.
  Eigen::MatrixXd eval(const Eigen::MatrixXd& x, const std::vector<int>& labels,
                       const Eigen::VectorXd& t) const;
  Eigen::MatrixXd eval(const Eigen::MatrixXd& x, int label, double t) const;

  // Denoiser view: D(x, y, t) = x + sigma(t)^2 * s(x, y, t).
  Eigen::MatrixXd denoise(const Eigen::MatrixXd& x,
                          const std::vector<int>& labels,
                          const Eigen::VectorXd& t) const;

  std::string to_checkpoint_json() const;
  static ScoreModel from_checkpoint_json(const std::string& text);

 private:
  int build(nn::Tape& tape, const Eigen::MatrixXd& x,
            const std::vector<int>& labels, const Eigen::VectorXd& t,
            bool trainable) const;

  ScoreModelArch arch_;
  nn::ParamStore params_;
};

void write_score_checkpoint(const std::string& path, const ScoreModel& model,
                            const std::string& config_hash = "");
ScoreModel read_score_checkpoint(const std::string& path);

}  // namespace tdsm
