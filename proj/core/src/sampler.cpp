#include "tdsm/sampler.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "tdsm/errors.hpp"
#include "tdsm/io.hpp"
#include "tdsm/rng.hpp"

namespace tdsm {

GuidanceSpec guidance_from_string(const std::string& s) {
  GuidanceSpec g;
  if (s == "none") {
    g.kind = GuidanceSpec::Kind::none;
    return g;
  }
  std::string name = s;
  const auto open = s.find('(');
  if (open != std::string::npos) {
    if (s.back() != ')')
      throw ConfigError("malformed guidance spec: " + s);
    name = s.substr(0, open);
    g.value = parse_double_string(s.substr(open + 1, s.size() - open - 2));
  }
  if (name == "cg")
    g.kind = GuidanceSpec::Kind::cg;
  else if (name == "tcg")
    g.kind = GuidanceSpec::Kind::tcg;
  else if (name == "cfg")
    g.kind = GuidanceSpec::Kind::cfg;
  else if (name == "affine")
    g.kind = GuidanceSpec::Kind::affine;
  else
    throw ConfigError("unknown guidance kind: " + s);
  return g;
}

std::string to_string(const GuidanceSpec& g) {
  switch (g.kind) {
    case GuidanceSpec::Kind::none:
      return "none";
    case GuidanceSpec::Kind::cg:
      return "cg(" + format_double(g.value) + ")";
    case GuidanceSpec::Kind::tcg:
      return "tcg(" + format_double(g.value) + ")";
    case GuidanceSpec::Kind::cfg:
      return "cfg(" + format_double(g.value) + ")";
    case GuidanceSpec::Kind::affine:
      return "affine(" + format_double(g.value) + ")";
  }
  throw Error("unreachable guidance kind");
}

void PriorSpec::validate() const {
  if (empty()) return;
  if (weights.size() != means.rows() || variances.size() != means.rows())
    throw InconsistentInputError("prior needs one weight/variance per row");
  if (std::abs(weights.sum() - 1.0) > 1e-12 || weights.minCoeff() < 0.0)
    throw InconsistentInputError("prior weights must lie on the simplex");
  if (variances.minCoeff() <= 0.0)
    throw InconsistentInputError("prior variances must be positive");
}

PriorSpec clean_component_prior(const GaussianMixture& gmm, int label) {
  gmm.validate();
  if (label < 0 || label >= gmm.classes)
    throw ConfigError("prior label out of range");
  PriorSpec p;
  p.means = gmm.means.row(label);
  p.weights = Eigen::VectorXd::Ones(1);
  p.variances = gmm.variances.segment(label, 1);
  return p;
}

PriorSpec noisy_mixture_prior(const GaussianMixture& gmm,
                              const TransitionMatrix& S, int label) {
  gmm.validate();
  S.validate();
  if (S.orientation != Orientation::reverse)
    throw InconsistentInputError("noisy prior needs the reverse matrix");
  if (S.c != gmm.classes)
    throw InconsistentInputError("matrix size does not match classes");
  if (label < 0 || label >= gmm.classes)
    throw ConfigError("prior label out of range");
  PriorSpec p;
  p.means = gmm.means;
  p.weights = S.rows.row(label).transpose();
  p.variances = gmm.variances;
  return p;
}

void SamplerConfig::validate() const {
  if (method != "reverse-sde" && method != "ode-heun")
    throw ConfigError("sampler method must be reverse-sde or ode-heun");
  if (steps < 2) throw ConfigError("sampler needs at least 2 steps");
  if (!(t_min > 0.0) || !(t_max > t_min))
    throw ConfigError("sampler needs t_max > t_min > 0");
  if (!std::isfinite(guidance.value))
    throw ConfigError("guidance value must be finite");
  prior.validate();
}

Eigen::VectorXd geometric_time_grid(double t_max, double t_min, int steps) {
  if (!(t_min > 0.0) || !(t_max > t_min))
    throw ConfigError("time grid needs t_max > t_min > 0");
  if (steps < 1) throw ConfigError("time grid needs at least 1 interval");
  Eigen::VectorXd grid(steps + 1);
  const double ratio = t_min / t_max;
  for (int k = 0; k <= steps; ++k)
    grid(k) = t_max * std::pow(ratio, static_cast<double>(k) / steps);
  grid(0) = t_max;
  grid(steps) = t_min;  // pin endpoints against pow rounding
  return grid;
}

namespace {

void check_state(const Eigen::MatrixXd& x, const char* what) {
  if (!x.allFinite())
    throw DivergedError(std::string(what) + " became non-finite");
}

Eigen::MatrixXd prior_draw(const SamplerConfig& cfg, int n, int dim, Rng& rng) {
  if (n <= 0 || dim <= 0)
    throw ConfigError("sampler needs positive sample count and dimension");
  if (cfg.prior.empty()) {
    const double sd = std::sqrt(1.0 + cfg.t_max * cfg.t_max);
    return sd * rng.normal_matrix(n, dim);
  }
  if (cfg.prior.means.cols() != dim)
    throw InconsistentInputError("prior dimension does not match sampler");
  Eigen::MatrixXd x(n, dim);
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    Eigen::Index k = 0;
    double acc = 0.0;
    for (; k < cfg.prior.weights.size() - 1; ++k) {
      acc += cfg.prior.weights(k);
      if (u < acc) break;
    }
    const double sd =
        std::sqrt(cfg.prior.variances(k) + cfg.t_max * cfg.t_max);
    for (Eigen::Index j = 0; j < dim; ++j)
      x(i, j) = cfg.prior.means(k, j) + sd * rng.normal();
  }
  return x;
}

}  // namespace

Eigen::MatrixXd sample_reverse_sde(const BatchScoreFn& score,
                                   const VESchedule& sched,
                                   const SamplerConfig& cfg, int label,
                                   int n_samples, int dim) {
  cfg.validate();
  sched.validate();
  Rng rng(cfg.seed);
  Eigen::MatrixXd x = prior_draw(cfg, n_samples, dim, rng);
  const Eigen::VectorXd grid = geometric_time_grid(cfg.t_max, cfg.t_min,
                                                   cfg.steps);
  for (int k = 0; k < cfg.steps; ++k) {
    const double t = grid(k);
    const double dt = t - grid(k + 1);
    const Eigen::MatrixXd s = score(x, label, t);
    check_state(s, "score");
    const double g = sched.g(t);
    const Eigen::MatrixXd z = rng.normal_matrix(n_samples, dim);
    x += (g * g * dt) * s + (g * std::sqrt(dt)) * z;
    check_state(x, "sampler state");
  }
  return x;
}

Eigen::MatrixXd sample_ode(const BatchScoreFn& score, const VESchedule& sched,
                           const SamplerConfig& cfg, int label, int n_samples,
                           int dim) {
  cfg.validate();
  sched.validate();
  Rng rng(cfg.seed);
  Eigen::MatrixXd x = prior_draw(cfg, n_samples, dim, rng);
  const Eigen::VectorXd grid = geometric_time_grid(cfg.t_max, cfg.t_min,
                                                   cfg.steps);
  for (int k = 0; k < cfg.steps; ++k) {
    const double t = grid(k);
    const double tn = grid(k + 1);
    const double h = tn - t;  // negative: integrating toward small t
    const Eigen::MatrixXd d1 = -t * score(x, label, t);
    check_state(d1, "ode drift");
    const Eigen::MatrixXd xe = x + h * d1;
    const Eigen::MatrixXd d2 = -tn * score(xe, label, tn);
    check_state(d2, "ode drift");
    x += (0.5 * h) * (d1 + d2);
    check_state(x, "sampler state");
  }
  return x;
}

Eigen::VectorXd guided_score_cg(const BatchScoreFn& uncond,
                                const BatchGradFn& class_grad, double scale,
                                const Eigen::VectorXd& x, int y, double t) {
  const Eigen::MatrixXd row = x.transpose();
  return (uncond(row, y, t) + scale * class_grad(row, y, t))
      .row(0)
      .transpose();
}

namespace {

// Row y of W^-1, i.e. the coefficients w*(x, ., y, t); throws on singular W.
Eigen::VectorXd inverse_weight_row(const Eigen::MatrixXd& w, int y) {
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(w.transpose());
  if (std::abs(lu.determinant()) < 1e-300)
    throw SingularMatrixError("weight matrix is singular");
  return lu.solve(Eigen::VectorXd::Unit(w.rows(), y));
}

double condition_number(const Eigen::MatrixXd& w) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
  const double smin = svd.singularValues().minCoeff();
  const double smax = svd.singularValues().maxCoeff();
  if (!(smin > 0.0)) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

}  // namespace

Eigen::VectorXd guided_score_tcg(const BatchScoreFn& uncond,
                                 const BatchGradFn& noisy_class_grad,
                                 const WeightMatrixFn& weight_matrix,
                                 const Eigen::VectorXd& x, int y, double t,
                                 double scale, TcgDiagnostics* diag,
                                 double cond_limit) {
  const Eigen::MatrixXd row = x.transpose();
  const Eigen::MatrixXd w = weight_matrix(x, t);
  if (w.rows() != w.cols() || y < 0 || y >= w.rows())
    throw InconsistentInputError("guided_score_tcg: bad weight matrix or label");
  const double cond = condition_number(w);
  if (diag != nullptr) diag->max_condition = std::max(diag->max_condition, cond);
  Eigen::VectorXd out = uncond(row, y, t).row(0).transpose();
  if (!std::isfinite(cond) || cond > cond_limit) {
    if (diag != nullptr) ++diag->fallbacks;
    out += scale * noisy_class_grad(row, y, t).row(0).transpose();
    return out;
  }
  const Eigen::VectorXd coef = inverse_weight_row(w, y);
  for (int yt = 0; yt < w.rows(); ++yt)
    out += (scale * coef(yt)) * noisy_class_grad(row, yt, t).row(0).transpose();
  return out;
}

Eigen::VectorXd guided_score_cfg(const ScoreModel& model, double alpha,
                                 const Eigen::VectorXd& x, int y, double t) {
  const Eigen::MatrixXd row = x.transpose();
  return ((1.0 + alpha) * model.eval(row, y, t) -
          alpha * model.eval(row, model.null_label(), t))
      .row(0)
      .transpose();
}

Eigen::VectorXd affine_score(const BatchScoreFn& score,
                             const PointWeightFn& weights, double lambda,
                             const Eigen::VectorXd& x, int y, double t,
                             int classes) {
  const Eigen::MatrixXd row = x.transpose();
  const Eigen::VectorXd w = weights(x, y, t);
  if (w.size() != classes)
    throw InconsistentInputError("affine_score: weight length mismatch");
  Eigen::VectorXd recon = Eigen::VectorXd::Zero(x.size());
  for (int j = 0; j < classes; ++j)
    recon += w(j) * score(row, j, t).row(0).transpose();
  return (1.0 + lambda) * score(row, y, t).row(0).transpose() - lambda * recon;
}

BatchScoreFn make_model_score_fn(const ScoreModel& model) {
  return [model](const Eigen::MatrixXd& x, int label, double t) {
    return model.eval(x, label, t);
  };
}

BatchScoreFn make_model_uncond_score_fn(const ScoreModel& model) {
  return [model](const Eigen::MatrixXd& x, int label, double t) {
    (void)label;
    return model.eval(x, model.null_label(), t);
  };
}

BatchScoreFn make_oracle_clean_score_fn(const GaussianMixture& gmm,
                                        const VESchedule& sched) {
  return [gmm, sched](const Eigen::MatrixXd& x, int label, double t) {
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out.row(i) =
          clean_score(gmm, sched, x.row(i).transpose(), label, t).transpose();
    return out;
  };
}

BatchScoreFn make_oracle_marginal_score_fn(const GaussianMixture& gmm,
                                           const VESchedule& sched) {
  return [gmm, sched](const Eigen::MatrixXd& x, int label, double t) {
    (void)label;
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out.row(i) =
          marginal_score(gmm, sched, x.row(i).transpose(), t).transpose();
    return out;
  };
}

BatchGradFn make_classifier_grad_fn(const NoisyClassifier& clf) {
  return [clf](const Eigen::MatrixXd& x, int label, double t) {
    const std::vector<int> labels(static_cast<std::size_t>(x.rows()), label);
    return clf.log_prob_input_grad(x, labels,
                                   Eigen::VectorXd::Constant(x.rows(), t));
  };
}

BatchScoreFn make_cg_score_fn(BatchScoreFn uncond, BatchGradFn class_grad,
                              double scale) {
  return [uncond = std::move(uncond), class_grad = std::move(class_grad),
          scale](const Eigen::MatrixXd& x, int label, double t) {
    return Eigen::MatrixXd(uncond(x, label, t) +
                           scale * class_grad(x, label, t));
  };
}

BatchScoreFn make_tcg_score_fn(BatchScoreFn uncond, BatchGradFn noisy_grad,
                               WeightMatrixFn weight_matrix, double scale,
                               int classes, TcgDiagnostics* diag) {
  if (classes < 1) throw ConfigError("tcg needs a positive class count");
  return [uncond = std::move(uncond), noisy_grad = std::move(noisy_grad),
          weight_matrix = std::move(weight_matrix), scale, classes,
          diag](const Eigen::MatrixXd& x, int y, double t) {
    Eigen::MatrixXd out = uncond(x, y, t);
    std::vector<Eigen::MatrixXd> grads;
    grads.reserve(static_cast<std::size_t>(classes));
    for (int yt = 0; yt < classes; ++yt)
      grads.push_back(noisy_grad(x, yt, t));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Eigen::MatrixXd w = weight_matrix(x.row(i).transpose(), t);
      if (w.rows() != classes || w.cols() != classes)
        throw InconsistentInputError("tcg: weight matrix shape mismatch");
      const double cond = condition_number(w);
      if (diag != nullptr)
        diag->max_condition = std::max(diag->max_condition, cond);
      if (!std::isfinite(cond) || cond > 1e12) {
        if (diag != nullptr) ++diag->fallbacks;
        out.row(i) += scale * grads[static_cast<std::size_t>(y)].row(i);
        continue;
      }
      const Eigen::VectorXd coef = inverse_weight_row(w, y);
      for (int yt = 0; yt < classes; ++yt)
        out.row(i) +=
            (scale * coef(yt)) * grads[static_cast<std::size_t>(yt)].row(i);
    }
    return out;
  };
}

BatchScoreFn make_cfg_score_fn(const ScoreModel& model, double alpha) {
  return [model, alpha](const Eigen::MatrixXd& x, int y, double t) {
    return Eigen::MatrixXd((1.0 + alpha) * model.eval(x, y, t) -
                           alpha * model.eval(x, model.null_label(), t));
  };
}

BatchScoreFn make_affine_score_fn(BatchScoreFn score, WeightSource weights,
                                  double lambda, int classes) {
  if (classes < 1) throw ConfigError("affine needs a positive class count");
  return [score = std::move(score), weights = std::move(weights), lambda,
          classes](const Eigen::MatrixXd& x, int y, double t) {
    const std::vector<int> labels(static_cast<std::size_t>(x.rows()), y);
    const Eigen::VectorXd tvec = Eigen::VectorXd::Constant(x.rows(), t);
    const std::vector<WeightVector> wv = weights(x, labels, tvec);
    Eigen::MatrixXd recon = Eigen::MatrixXd::Zero(x.rows(), x.cols());
    for (int j = 0; j < classes; ++j) {
      const Eigen::MatrixXd sj = score(x, j, t);
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        recon.row(i) += wv[static_cast<std::size_t>(i)].values(j) * sj.row(i);
    }
    return Eigen::MatrixXd((1.0 + lambda) * score(x, y, t) - lambda * recon);
  };
}

}  // namespace tdsm
