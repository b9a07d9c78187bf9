#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "tdsm/dataset.hpp"
#include "tdsm/gmm.hpp"
#include "tdsm/io.hpp"
#include "tdsm/nn/param_store.hpp"
#include "tdsm/nn/tape.hpp"
#include "tdsm/transition.hpp"

namespace tdsm {

struct ClassifierArch {
  int dim = 2;
  int classes = 2;
  std::vector<int> hidden = {64, 64};
  int time_embed = 16;
  void validate() const;
};

// Time-dependent classifier over perturbed inputs: an MLP on
// (x, time features) with a softmax head. With a simplex projection set,
// the softmax estimated over clean classes is mapped through a forward
// transition matrix, so the reported probabilities are for noisy labels and
// always lie in the simplex spanned by that matrix's rows.
class NoisyClassifier {
 public:
  NoisyClassifier(ClassifierArch arch, unsigned long long seed);
  NoisyClassifier(ClassifierArch arch, nn::ParamStore params);

  const ClassifierArch& arch() const { return arch_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  void set_simplex_projection(const TransitionMatrix& forward);
  void clear_simplex_projection();
  bool has_simplex_projection() const { return has_projection_; }
  const TransitionMatrix& simplex_projection() const;

  // Probability node (batch, classes) with trainable parameters.
  int probs(nn::Tape& tape, const Eigen::MatrixXd& x, const Eigen::VectorXd& t);
  // Same with parameters held constant.
  int probs_frozen(nn::Tape& tape, const Eigen::MatrixXd& x,
                   const Eigen::VectorXd& t) const;

  // Batched probabilities, one row per input.
  Eigen::MatrixXd classify(const Eigen::MatrixXd& x,
                           const Eigen::VectorXd& t) const;
  Eigen::VectorXd classify_one(const Eigen::VectorXd& x, double t) const;

  // Rows are the gradients of log P(labels[i] | x.row(i), t(i)) with respect
  // to x.row(i) — the classifier-guidance direction.
  Eigen::MatrixXd log_prob_input_grad(const Eigen::MatrixXd& x,
                                      const std::vector<int>& labels,
                                      const Eigen::VectorXd& t) const;

  std::string to_checkpoint_json() const;
  static NoisyClassifier from_checkpoint_json(const std::string& text);

 private:
  int build_probs(nn::Tape& tape, int xnode, const Eigen::VectorXd& t,
                  bool trainable) const;

  ClassifierArch arch_;
  nn::ParamStore params_;
  bool has_projection_ = false;
  TransitionMatrix projection_;
};

void write_classifier_checkpoint(const std::string& path,
                                 const NoisyClassifier& clf,
                                 const std::string& config_hash = "");
NoisyClassifier read_classifier_checkpoint(const std::string& path);

struct ClassifierTrainConfig {
  long steps = 4000;
  int batch = 128;
  double lr = 1e-3;
  unsigned long long seed = 0;
};

// Cross-entropy training on perturbed inputs: each step draws examples with
// replacement, a per-example log-uniform t in [sched.t_min, sched.t_max],
// perturbs x to x + sigma(t) z, and fits the (possibly projected)
// probabilities to the noisy labels. Deterministic given the seed.
std::vector<TraceRow> train_classifier(NoisyClassifier& clf,
                                       const NoisyDataset& data,
                                       const VESchedule& sched,
                                       const ClassifierTrainConfig& cfg);

// Row-stochastic matrix learned as row-softmax of free logits; the +2.0
// diagonal logit offset at initialization makes the realized matrix
// diagonally dominant from the start.
struct TrainableTransition {
  explicit TrainableTransition(int classes);
  int classes = 0;
  nn::ParamStore params;  // single entry "logits" (classes x classes)
  TransitionMatrix realized() const;
};

struct VolMinConfig {
  long steps = 6000;
  int batch = 128;
  double lr = 1e-3;
  double vol_weight = 1e-2;
  double freeze_fraction = 0.25;  // matrix is fixed after this share of steps
  double det_floor = 1e-8;
  unsigned long long seed = 0;
};

struct VolMinResult {
  TransitionMatrix estimated_forward;
  std::vector<TraceRow> trace;
};

// Joint estimation of the forward transition matrix and the classifier:
// minimizes CE of (matrix-projected softmax) against noisy labels plus
// vol_weight * log|det| of the matrix, fixing the matrix after
// freeze_fraction of the steps. A determinant magnitude below det_floor
// raises IllConditionedError.
VolMinResult estimate_transition_volmin(NoisyClassifier& clf,
                                        TrainableTransition& trans,
                                        const NoisyDataset& data,
                                        const VESchedule& sched,
                                        const VolMinConfig& cfg);

}  // namespace tdsm
