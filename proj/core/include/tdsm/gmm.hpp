#pragma once

#include <Eigen/Core>

#include "tdsm/transition.hpp"

namespace tdsm {

// Class-conditional isotropic Gaussian mixture: p(x | Y = y) = N(mu_y, v_y I).
// Together with the variance-exploding schedule below, every density, score,
// posterior, and transition-aware weight has a closed form, so each theorem
// in the training objectives can be checked as a numeric identity.
struct GaussianMixture {
  int dim = 0;
  int classes = 0;
  Eigen::MatrixXd means;       // classes x dim
  Eigen::VectorXd variances;   // per-class isotropic covariance scale
  Eigen::VectorXd clean_prior; // p(Y)

  void validate() const;

  // The two-component benchmark mixture: means (3,3) and (-3,-3), unit
  // variances, equal priors.
  static GaussianMixture toy_two_class();
};

// Variance-exploding diffusion: sigma(t) = t, drift f == 0, volatility
// g(t) = sqrt(2t). The perturbed class-conditional density at time t is
// N(mu_y, (v_y + t^2) I).
struct VESchedule {
  double t_min = 0.05;
  double t_max = 10.0;

  void validate() const;
  double sigma(double t) const { return t; }
  double g(double t) const;
  // Total per-coordinate variance of class y at time t.
  double marginal_variance(double base_variance, double t) const {
    return base_variance + t * t;
  }
};

// --- densities ---------------------------------------------------------

double perturbed_class_log_density(const GaussianMixture& gmm,
                                   const VESchedule& sched,
                                   const Eigen::VectorXd& x, int y, double t);

double perturbed_class_density(const GaussianMixture& gmm,
                               const VESchedule& sched,
                               const Eigen::VectorXd& x, int y, double t);

// log p_t(x | noisy = ytilde) = log sum_y S(ytilde, y) p_t(x | y).
double noisy_log_density(const GaussianMixture& gmm, const VESchedule& sched,
                         const TransitionMatrix& S, const Eigen::VectorXd& x,
                         int ytilde, double t);

// log p_t(x), the unconditional marginal.
double marginal_log_density(const GaussianMixture& gmm, const VESchedule& sched,
                            const Eigen::VectorXd& x, double t);

// --- scores -------------------------------------------------------------

// grad_x log p_t(x | Y = y) = -(x - mu_y) / (v_y + t^2).
Eigen::VectorXd clean_score(const GaussianMixture& gmm, const VESchedule& sched,
                            const Eigen::VectorXd& x, int y, double t);

// grad_x log p_t(x | noisy = ytilde), the score of the S-mixture.
Eigen::VectorXd noisy_score(const GaussianMixture& gmm, const VESchedule& sched,
                            const TransitionMatrix& S, const Eigen::VectorXd& x,
                            int ytilde, double t);

// grad_x log p_t(x), the unconditional score.
Eigen::VectorXd marginal_score(const GaussianMixture& gmm,
                               const VESchedule& sched,
                               const Eigen::VectorXd& x, double t);

// --- posteriors and weights ---------------------------------------------

// p_t(Y | x), Bayes over perturbed class densities with the clean prior.
Eigen::VectorXd clean_posterior(const GaussianMixture& gmm,
                                const VESchedule& sched,
                                const Eigen::VectorXd& x, double t);

// p_t(noisy | x) = sum_j p(noisy | clean = j) p_t(Y = j | x).
Eigen::VectorXd oracle_noisy_classifier(const GaussianMixture& gmm,
                                        const VESchedule& sched,
                                        const TransitionMatrix& S,
                                        const Eigen::VectorXd& x, double t);

// The transition-aware weight w(x, ytilde, y, t) =
// S(ytilde, y) p_t(x | y) / p_t(x | ytilde), from its defining ratio form.
// The vector version returns the whole simplex row over y.
double exact_weight(const GaussianMixture& gmm, const VESchedule& sched,
                    const TransitionMatrix& S, const Eigen::VectorXd& x,
                    int ytilde, int y, double t);

Eigen::VectorXd exact_weight_vector(const GaussianMixture& gmm,
                                    const VESchedule& sched,
                                    const TransitionMatrix& S,
                                    const Eigen::VectorXd& x, int ytilde,
                                    double t);

// The same quantity computed along the independent route
// p(noisy = ytilde | clean = y) p_t(Y = y | x) / p_t(noisy = ytilde | x),
// using the forward matrix recovered from S by Bayes inversion. Equality
// with exact_weight is the posterior identity under test.
double posterior_weight(const GaussianMixture& gmm, const VESchedule& sched,
                        const TransitionMatrix& S, const Eigen::VectorXd& x,
                        int ytilde, int y, double t);

// W(x) with W(ytilde, y) = w(x, ytilde, y, t).
Eigen::MatrixXd weight_matrix(const GaussianMixture& gmm,
                              const VESchedule& sched,
                              const TransitionMatrix& S,
                              const Eigen::VectorXd& x, double t);

// Row y of S^-1 W(x) [clean scores stacked]: the closed-form optimum the
// constant-weight objective converges to instead of the clean score.
Eigen::VectorXd sdsm_fixed_point(const GaussianMixture& gmm,
                                 const VESchedule& sched,
                                 const TransitionMatrix& S,
                                 const Eigen::VectorXd& x, int y, double t);

// --- guidance oracles -----------------------------------------------------

// grad_x log p_t(Y = y | x) = clean_score - marginal_score.
Eigen::VectorXd clean_classifier_log_grad(const GaussianMixture& gmm,
                                          const VESchedule& sched,
                                          const Eigen::VectorXd& x, int y,
                                          double t);

// grad_x log p_t(noisy = ytilde | x) = noisy_score - marginal_score.
Eigen::VectorXd noisy_classifier_log_grad(const GaussianMixture& gmm,
                                          const VESchedule& sched,
                                          const TransitionMatrix& S,
                                          const Eigen::VectorXd& x, int ytilde,
                                          double t);

}  // namespace tdsm
