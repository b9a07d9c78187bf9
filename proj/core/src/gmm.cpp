#include "tdsm/gmm.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>

#include "tdsm/errors.hpp"

namespace tdsm {

namespace {

void check_point(const GaussianMixture& gmm, const Eigen::VectorXd& x, int y,
                 double t) {
  if (x.size() != gmm.dim)
    throw InconsistentInputError("x has wrong dimension");
  if (!x.allFinite()) throw InconsistentInputError("x must be finite");
  if (y < 0 || y >= gmm.classes)
    throw InconsistentInputError("class index out of range");
  if (!(t >= 0.0) || !std::isfinite(t))
    throw InconsistentInputError("t must be finite and nonnegative");
}

// Per-class log densities at (x, t).
Eigen::VectorXd class_log_densities(const GaussianMixture& gmm,
                                    const VESchedule& sched,
                                    const Eigen::VectorXd& x, double t) {
  Eigen::VectorXd lp(gmm.classes);
  for (int y = 0; y < gmm.classes; ++y)
    lp(y) = perturbed_class_log_density(gmm, sched, x, y, t);
  return lp;
}

// Density ratios exp(lp - max lp): the largest entry is exactly 1, so mixing
// coefficients computed from these ratios stay exact in the regimes where a
// single class dominates (in particular the identity-matrix reduction).
Eigen::VectorXd shifted_ratios(const Eigen::VectorXd& lp) {
  const double m = lp.maxCoeff();
  return (lp.array() - m).exp();
}

double logsumexp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

void check_reverse(const TransitionMatrix& S, int classes) {
  if (S.orientation != Orientation::reverse)
    throw InconsistentInputError("expected a reverse-oriented matrix");
  if (S.c != classes)
    throw InconsistentInputError("matrix class count mismatch");
}

}  // namespace

void GaussianMixture::validate() const {
  if (dim <= 0 || classes <= 0)
    throw InconsistentInputError("mixture needs positive dim and classes");
  if (means.rows() != classes || means.cols() != dim)
    throw InconsistentInputError("means must be classes x dim");
  if (!means.allFinite()) throw InconsistentInputError("means must be finite");
  if (variances.size() != classes || (variances.array() <= 0.0).any())
    throw InconsistentInputError("variances must be positive, one per class");
  if (clean_prior.size() != classes || (clean_prior.array() < 0.0).any() ||
      std::abs(clean_prior.sum() - 1.0) > 1e-12)
    throw InconsistentInputError("clean prior must be a probability vector");
}

GaussianMixture GaussianMixture::toy_two_class() {
  GaussianMixture g;
  g.dim = 2;
  g.classes = 2;
  g.means.resize(2, 2);
  g.means << 3.0, 3.0, -3.0, -3.0;
  g.variances = Eigen::Vector2d::Ones();
  g.clean_prior = Eigen::Vector2d::Constant(0.5);
  return g;
}

void VESchedule::validate() const {
  if (!(t_min >= 0.0) || !(t_min < t_max))
    throw InconsistentInputError("schedule needs 0 <= t_min < t_max");
}

double VESchedule::g(double t) const { return std::sqrt(2.0 * t); }

double perturbed_class_log_density(const GaussianMixture& gmm,
                                   const VESchedule& sched,
                                   const Eigen::VectorXd& x, int y, double t) {
  check_point(gmm, x, y, t);
  const double v = sched.marginal_variance(gmm.variances(y), t);
  const double sq = (x - gmm.means.row(y).transpose()).squaredNorm();
  return -0.5 * sq / v -
         0.5 * gmm.dim * std::log(2.0 * std::numbers::pi * v);
}

double perturbed_class_density(const GaussianMixture& gmm,
                               const VESchedule& sched,
                               const Eigen::VectorXd& x, int y, double t) {
  return std::exp(perturbed_class_log_density(gmm, sched, x, y, t));
}

double noisy_log_density(const GaussianMixture& gmm, const VESchedule& sched,
                         const TransitionMatrix& S, const Eigen::VectorXd& x,
                         int ytilde, double t) {
  check_reverse(S, gmm.classes);
  check_point(gmm, x, ytilde, t);
  const Eigen::VectorXd lp = class_log_densities(gmm, sched, x, t);
  Eigen::VectorXd terms(gmm.classes);
  for (int y = 0; y < gmm.classes; ++y) {
    const double s = S.rows(ytilde, y);
    terms(y) = s > 0.0 ? std::log(s) + lp(y)
                       : -std::numeric_limits<double>::infinity();
  }
  const double r = logsumexp(terms);
  if (!std::isfinite(r))
    throw NumericUnderflowError("noisy_log_density: mixture row has no mass");
  return r;
}

double marginal_log_density(const GaussianMixture& gmm, const VESchedule& sched,
                            const Eigen::VectorXd& x, double t) {
  const Eigen::VectorXd lp = class_log_densities(gmm, sched, x, t);
  Eigen::VectorXd terms(gmm.classes);
  for (int y = 0; y < gmm.classes; ++y) {
    const double p = gmm.clean_prior(y);
    terms(y) = p > 0.0 ? std::log(p) + lp(y)
                       : -std::numeric_limits<double>::infinity();
  }
  const double r = logsumexp(terms);
  if (!std::isfinite(r))
    throw NumericUnderflowError("marginal_log_density: no mass at x");
  return r;
}

Eigen::VectorXd clean_score(const GaussianMixture& gmm, const VESchedule& sched,
                            const Eigen::VectorXd& x, int y, double t) {
  check_point(gmm, x, y, t);
  const double v = sched.marginal_variance(gmm.variances(y), t);
  return -(x - gmm.means.row(y).transpose()) / v;
}

Eigen::VectorXd noisy_score(const GaussianMixture& gmm, const VESchedule& sched,
                            const TransitionMatrix& S, const Eigen::VectorXd& x,
                            int ytilde, double t) {
  check_reverse(S, gmm.classes);
  check_point(gmm, x, ytilde, t);
  // Score of a mixture: responsibility-weighted component scores, with the
  // responsibilities computed from max-shifted density ratios.
  const Eigen::VectorXd r = shifted_ratios(class_log_densities(gmm, sched, x, t));
  double denom = 0.0;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(gmm.dim);
  for (int y = 0; y < gmm.classes; ++y) {
    const double a = S.rows(ytilde, y) * r(y);
    if (a == 0.0) continue;
    denom += a;
    acc += a * clean_score(gmm, sched, x, y, t);
  }
  if (denom <= 0.0)
    throw NumericUnderflowError("noisy_score: mixture row has no mass");
  return acc / denom;
}

Eigen::VectorXd marginal_score(const GaussianMixture& gmm,
                               const VESchedule& sched,
                               const Eigen::VectorXd& x, double t) {
  const Eigen::VectorXd r = shifted_ratios(class_log_densities(gmm, sched, x, t));
  double denom = 0.0;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(gmm.dim);
  for (int y = 0; y < gmm.classes; ++y) {
    const double a = gmm.clean_prior(y) * r(y);
    if (a == 0.0) continue;
    denom += a;
    acc += a * clean_score(gmm, sched, x, y, t);
  }
  if (denom <= 0.0)
    throw NumericUnderflowError("marginal_score: no mass at x");
  return acc / denom;
}

Eigen::VectorXd clean_posterior(const GaussianMixture& gmm,
                                const VESchedule& sched,
                                const Eigen::VectorXd& x, double t) {
  const Eigen::VectorXd r = shifted_ratios(class_log_densities(gmm, sched, x, t));
  Eigen::VectorXd num = gmm.clean_prior.cwiseProduct(r);
  const double denom = num.sum();
  if (denom <= 0.0)
    throw NumericUnderflowError("clean_posterior: no mass at x");
  return num / denom;
}

Eigen::VectorXd oracle_noisy_classifier(const GaussianMixture& gmm,
                                        const VESchedule& sched,
                                        const TransitionMatrix& S,
                                        const Eigen::VectorXd& x, double t) {
  check_reverse(S, gmm.classes);
  // p_t(noisy = i | x) = sum_j p(noisy = i | clean = j) p_t(Y = j | x),
  // with the forward conditionals recovered from S by Bayes inversion.
  const OrientedPair pair =
      forward_from_reverse(S, gmm.clean_prior, PriorSide::clean);
  const Eigen::VectorXd cp = clean_posterior(gmm, sched, x, t);
  return pair.forward.rows.transpose() * cp;
}

Eigen::VectorXd exact_weight_vector(const GaussianMixture& gmm,
                                    const VESchedule& sched,
                                    const TransitionMatrix& S,
                                    const Eigen::VectorXd& x, int ytilde,
                                    double t) {
  check_reverse(S, gmm.classes);
  check_point(gmm, x, ytilde, t);
  const Eigen::VectorXd r = shifted_ratios(class_log_densities(gmm, sched, x, t));
  Eigen::VectorXd num = S.rows.row(ytilde).transpose().cwiseProduct(r);
  const double denom = num.sum();
  if (denom <= 0.0)
    throw NumericUnderflowError("exact_weight: mixture row has no mass");
  return num / denom;
}

double exact_weight(const GaussianMixture& gmm, const VESchedule& sched,
                    const TransitionMatrix& S, const Eigen::VectorXd& x,
                    int ytilde, int y, double t) {
  if (y < 0 || y >= gmm.classes)
    throw InconsistentInputError("class index out of range");
  return exact_weight_vector(gmm, sched, S, x, ytilde, t)(y);
}

double posterior_weight(const GaussianMixture& gmm, const VESchedule& sched,
                        const TransitionMatrix& S, const Eigen::VectorXd& x,
                        int ytilde, int y, double t) {
  check_reverse(S, gmm.classes);
  check_point(gmm, x, y, t);
  if (ytilde < 0 || ytilde >= gmm.classes)
    throw InconsistentInputError("class index out of range");
  const OrientedPair pair =
      forward_from_reverse(S, gmm.clean_prior, PriorSide::clean);
  const Eigen::VectorXd cp = clean_posterior(gmm, sched, x, t);
  // p(noisy = ytilde | clean = j) over j, times the clean posterior.
  const Eigen::VectorXd joint =
      pair.forward.rows.col(ytilde).cwiseProduct(cp);
  const double denom = joint.sum();
  if (denom <= 0.0)
    throw NumericUnderflowError("posterior_weight: noisy class has no mass");
  return joint(y) / denom;
}

Eigen::MatrixXd weight_matrix(const GaussianMixture& gmm,
                              const VESchedule& sched,
                              const TransitionMatrix& S,
                              const Eigen::VectorXd& x, double t) {
  Eigen::MatrixXd W(gmm.classes, gmm.classes);
  for (int i = 0; i < gmm.classes; ++i)
    W.row(i) = exact_weight_vector(gmm, sched, S, x, i, t).transpose();
  return W;
}

Eigen::VectorXd sdsm_fixed_point(const GaussianMixture& gmm,
                                 const VESchedule& sched,
                                 const TransitionMatrix& S,
                                 const Eigen::VectorXd& x, int y, double t) {
  check_reverse(S, gmm.classes);
  check_point(gmm, x, y, t);
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(S.rows);
  if (std::abs(lu.determinant()) < 1e-12)
    throw SingularMatrixError("sdsm_fixed_point: S is singular");
  const Eigen::MatrixXd W = weight_matrix(gmm, sched, S, x, t);
  Eigen::MatrixXd scores(gmm.classes, gmm.dim);
  for (int j = 0; j < gmm.classes; ++j)
    scores.row(j) = clean_score(gmm, sched, x, j, t).transpose();
  const Eigen::MatrixXd fixed = lu.solve(W * scores);
  return fixed.row(y).transpose();
}

Eigen::VectorXd clean_classifier_log_grad(const GaussianMixture& gmm,
                                          const VESchedule& sched,
                                          const Eigen::VectorXd& x, int y,
                                          double t) {
  return clean_score(gmm, sched, x, y, t) - marginal_score(gmm, sched, x, t);
}

Eigen::VectorXd noisy_classifier_log_grad(const GaussianMixture& gmm,
                                          const VESchedule& sched,
                                          const TransitionMatrix& S,
                                          const Eigen::VectorXd& x, int ytilde,
                                          double t) {
  return noisy_score(gmm, sched, S, x, ytilde, t) -
         marginal_score(gmm, sched, x, t);
}

}  // namespace tdsm
