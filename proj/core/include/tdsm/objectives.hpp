#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tdsm/classifier.hpp"
#include "tdsm/dataset.hpp"
#include "tdsm/gmm.hpp"
#include "tdsm/io.hpp"
#include "tdsm/nn/tape.hpp"
#include "tdsm/score_model.hpp"
#include "tdsm/transition.hpp"

namespace tdsm {

enum class ObjectiveKind { dsm, sdsm, tdsm, tdsm_rc };
ObjectiveKind objective_kind_from_string(const std::string& s);
std::string to_string(ObjectiveKind k);

// How a training objective weights, skips, and detaches per-class score
// terms. The weighted kinds need a reverse transition matrix and a weight
// source at build time.
struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::dsm;
  double skip_threshold = 0.01;            // tau; non-target terms with
                                           // weight <= tau are dropped
  std::string temporal_weight = "sigma2";  // "sigma2" | "none"
  bool detach_nontarget = true;
  std::string weight_source = "oracle";  // "oracle" | "classifier"
  void validate() const;
};

// Per-time loss weight lambda(t).
double temporal_weight_value(const std::string& selector, const VESchedule& sched,
                             double t);

// Conditional-kernel score target -(x_t - x0) / sigma(t)^2.
Eigen::VectorXd dsm_target(const Eigen::VectorXd& x0, const Eigen::VectorXd& xt,
                           const VESchedule& sched, double t);
Eigen::MatrixXd dsm_target(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& xt,
                           const VESchedule& sched, const Eigen::VectorXd& t);

// One weight vector w(x_t, ytilde, . , t) over clean classes.
struct WeightVector {
  Eigen::VectorXd values;
  int target_index = 0;
  // How far the vector is from the probability simplex: max of |sum - 1|
  // and the largest negative excursion. Reported, never clamped.
  double simplex_deviation() const;
};

// Plug-in weight estimator from classifier outputs: the reverse matrix's
// inverse is factored once at construction and reused for every call.
class WeightEstimator {
 public:
  WeightEstimator(const TransitionMatrix& S, Eigen::VectorXi counts);
  // h is the classifier's noisy-label probability vector at (x_t, t).
  WeightVector estimate(const Eigen::VectorXd& h, int ytilde) const;
  const TransitionMatrix& reverse_matrix() const { return S_; }
  const Eigen::MatrixXd& s_inverse() const { return sinv_; }
  const Eigen::VectorXi& counts() const { return counts_; }

 private:
  TransitionMatrix S_;
  Eigen::MatrixXd sinv_;
  Eigen::VectorXi counts_;
};

// One-shot convenience; training paths should hold a WeightEstimator.
WeightVector estimate_weights(const Eigen::VectorXd& h,
                              const TransitionMatrix& S,
                              const Eigen::VectorXi& counts, int ytilde);

// Batched weight lookup for a training step. Weight computation never
// differentiates through its inputs (classifier weights are plug-in).
using WeightSource = std::function<std::vector<WeightVector>(
    const Eigen::MatrixXd& xt, const std::vector<int>& ytilde,
    const Eigen::VectorXd& t)>;

WeightSource make_oracle_weight_source(const GaussianMixture& gmm,
                                       const VESchedule& sched,
                                       const TransitionMatrix& S);
// The classifier and estimator state are copied into the source, so the
// returned callable is self-contained.
WeightSource make_classifier_weight_source(const NoisyClassifier& clf,
                                           const TransitionMatrix& S,
                                           const Eigen::VectorXi& counts);

// One training minibatch: clean points, labels, per-example times, the
// noise draw, and the perturbed points. All objectives consume a draw in
// this exact form, so comparisons across objectives can share it.
struct BatchDraw {
  Eigen::MatrixXd x0;
  std::vector<int> labels;
  Eigen::VectorXd t;
  Eigen::MatrixXd z;
  Eigen::MatrixXd xt;
};

// Draw order per example is fixed (index, t, then noise coordinates), so a
// given rng state yields the same batch for every objective.
BatchDraw draw_training_batch(const NoisyDataset& data, const VESchedule& sched,
                              int batch, Rng& rng,
                              bool use_clean_labels = false);

struct BuiltLoss {
  int loss_node = -1;      // scalar tape node: lambda-weighted batch mean
  int residual_node = -1;  // (batch, dim) weighted-sum residual
  double loss = 0.0;
  Eigen::VectorXd per_example;  // residual squared norms, without lambda
  // (example, class) pairs dropped by the skip rule, for audit.
  std::vector<std::pair<int, int>> skipped;
  double max_simplex_deviation = 0.0;
};

// Builds the configured objective on the tape:
//   DSM      : ||s(xt, label) - dsm_target||^2, grouped by label
//   SDSM     : row of S as weights, score-matching residual
//   TDSM     : weight-source weights, score-matching residual
//   TDSM-RC  : weight-source weights, ||sum_y w . D(xt, y) - x0||^2 with
//              D = xt + sigma(t)^2 s
// For weighted kinds the y = label term is always kept and differentiable;
// other terms are dropped when w <= tau and recorded as constants when
// detach_nontarget is set. Dropped weights are not renormalized. Labels
// equal to the model's null index train unconditionally (unit weight).
BuiltLoss build_objective_loss(nn::Tape& tape, ScoreModel& model,
                               const BatchDraw& batch, const VESchedule& sched,
                               const ObjectiveConfig& cfg,
                               const TransitionMatrix* S,
                               const WeightSource* weights);

// Unweighted reconstruction form ||D(xt, label) - x0||^2: the reference the
// weighted reconstruction objective must collapse to when S is the identity.
BuiltLoss build_plain_reconstruction_loss(nn::Tape& tape, ScoreModel& model,
                                          const BatchDraw& batch,
                                          const VESchedule& sched,
                                          const ObjectiveConfig& cfg);

struct ScoreTrainConfig {
  long steps = 2000;
  int batch = 128;
  double lr = 1e-3;
  unsigned long long seed = 0;
  bool use_clean_labels = false;
  double uncond_prob = 0.0;  // label-dropout rate for classifier-free use
};

std::vector<TraceRow> train_score_model(ScoreModel& model,
                                        const NoisyDataset& data,
                                        const VESchedule& sched,
                                        const ObjectiveConfig& objective,
                                        const TransitionMatrix* S,
                                        const WeightSource* weights,
                                        const ScoreTrainConfig& cfg);

}  // namespace tdsm
