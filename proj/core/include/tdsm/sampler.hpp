#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>

#include "tdsm/classifier.hpp"
#include "tdsm/gmm.hpp"
#include "tdsm/objectives.hpp"
#include "tdsm/score_model.hpp"

namespace tdsm {

// Batched score evaluation: rows of x are independent chains at a shared
// time. The label is the requested condition; unconditional functions
// ignore it.
using BatchScoreFn =
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x, int label, double t)>;
// Batched gradient of log P(label | x, t) with respect to x.
using BatchGradFn =
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x, int label, double t)>;
// Pointwise weight matrix W(x, t) with entry (ytilde, y) = w(x, ytilde, y, t).
using WeightMatrixFn =
    std::function<Eigen::MatrixXd(const Eigen::VectorXd& x, double t)>;
// Pointwise weight vector w(x, ytilde, . , t).
using PointWeightFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& x,
                                                    int ytilde, double t)>;

struct GuidanceSpec {
  enum class Kind { none, cg, tcg, cfg, affine };
  Kind kind = Kind::none;
  double value = 1.0;  // cg/tcg scale, cfg alpha, or affine lambda
};
GuidanceSpec guidance_from_string(const std::string& s);
std::string to_string(const GuidanceSpec& g);

// Exact conditional prior at t_max: component k is drawn with probability
// weights(k) from N(means.row(k), (variances(k) + t_max^2) I). Empty means
// keep the default zero-centered N(0, (1 + t_max^2) I) draw.
struct PriorSpec {
  Eigen::MatrixXd means;      // components x dim; 0x0 = zero-centered
  Eigen::VectorXd weights;    // simplex over components
  Eigen::VectorXd variances;  // per-component variance at t = 0
  bool empty() const { return means.rows() == 0; }
  void validate() const;
};

// The exact prior of a clean-conditional target: the label's own component.
PriorSpec clean_component_prior(const GaussianMixture& gmm, int label);
// The exact prior of a noisy-conditional target: components mixed by the
// reverse-matrix row of the requested noisy label.
PriorSpec noisy_mixture_prior(const GaussianMixture& gmm,
                              const TransitionMatrix& S, int label);

struct SamplerConfig {
  std::string method = "reverse-sde";  // "reverse-sde" | "ode-heun"
  int steps = 128;
  double t_max = 10.0;
  double t_min = 0.05;
  GuidanceSpec guidance;
  PriorSpec prior;
  unsigned long long seed = 0;
  void validate() const;
};

// Descending geometric grid with `steps` intervals (steps + 1 points).
Eigen::VectorXd geometric_time_grid(double t_max, double t_min, int steps);

// Euler-Maruyama integration of the reverse-time SDE
// dx = -g(t)^2 score dt~ + g(t) dw~ from the cfg.prior draw (zero-centered
// N(0, (1 + t_max^2) I) unless an exact conditional prior is given) down to
// t_min. All chains advance together; a non-finite state aborts with
// DivergedError. Deterministic given cfg.seed.
Eigen::MatrixXd sample_reverse_sde(const BatchScoreFn& score,
                                   const VESchedule& sched,
                                   const SamplerConfig& cfg, int label,
                                   int n_samples, int dim);

// Heun (second-order) integration of the probability-flow ODE
// dx/dt = -t score(x, t) over the same grid and prior; deterministic map
// from the initial noise.
Eigen::MatrixXd sample_ode(const BatchScoreFn& score, const VESchedule& sched,
                           const SamplerConfig& cfg, int label, int n_samples,
                           int dim);

// --- guidance ---

// Classifier guidance: uncond + scale * grad log P(y | x, t).
Eigen::VectorXd guided_score_cg(const BatchScoreFn& uncond,
                                const BatchGradFn& class_grad, double scale,
                                const Eigen::VectorXd& x, int y, double t);

struct TcgDiagnostics {
  long fallbacks = 0;        // points where the CG fallback was taken
  double max_condition = 0;  // largest weight-matrix condition number seen
};

// Transition-aware classifier guidance: uncond + scale * sum over noisy
// labels of (W(x,t)^-1)[y, ytilde] * grad log P(Ytilde = ytilde | x, t),
// with the inverse-weight coefficients held constant. When W's condition
// number exceeds cond_limit the point falls back to plain classifier
// guidance with the noisy classifier, and the event is counted in diag.
Eigen::VectorXd guided_score_tcg(const BatchScoreFn& uncond,
                                 const BatchGradFn& noisy_class_grad,
                                 const WeightMatrixFn& weight_matrix,
                                 const Eigen::VectorXd& x, int y, double t,
                                 double scale = 1.0,
                                 TcgDiagnostics* diag = nullptr,
                                 double cond_limit = 1e12);

// Classifier-free combination (1 + alpha) s(x, y, t) - alpha s(x, null, t).
Eigen::VectorXd guided_score_cfg(const ScoreModel& model, double alpha,
                                 const Eigen::VectorXd& x, int y, double t);

// Affine extrapolation past the noisy conditional score:
// (1 + lambda) s(x, y, t) - lambda sum_j w(x, y, j, t) s(x, j, t).
// The coefficients sum to 1 whenever the weights do.
Eigen::VectorXd affine_score(const BatchScoreFn& score,
                             const PointWeightFn& weights, double lambda,
                             const Eigen::VectorXd& x, int y, double t,
                             int classes);

// --- adapters ---

BatchScoreFn make_model_score_fn(const ScoreModel& model);
// Model score at the learned null label, ignoring the requested label.
BatchScoreFn make_model_uncond_score_fn(const ScoreModel& model);
BatchScoreFn make_oracle_clean_score_fn(const GaussianMixture& gmm,
                                        const VESchedule& sched);
BatchScoreFn make_oracle_marginal_score_fn(const GaussianMixture& gmm,
                                           const VESchedule& sched);
BatchGradFn make_classifier_grad_fn(const NoisyClassifier& clf);

BatchScoreFn make_cg_score_fn(BatchScoreFn uncond, BatchGradFn class_grad,
                              double scale);
BatchScoreFn make_tcg_score_fn(BatchScoreFn uncond, BatchGradFn noisy_grad,
                               WeightMatrixFn weight_matrix, double scale,
                               int classes, TcgDiagnostics* diag = nullptr);
BatchScoreFn make_cfg_score_fn(const ScoreModel& model, double alpha);
BatchScoreFn make_affine_score_fn(BatchScoreFn score, WeightSource weights,
                                  double lambda, int classes);

}  // namespace tdsm
