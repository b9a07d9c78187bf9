#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "tdsm/errors.hpp"
#include "tdsm/gmm.hpp"
#include "tdsm/metrics.hpp"
#include "tdsm/rng.hpp"
#include "tdsm/sampler.hpp"
#include "tdsm/score_model.hpp"
#include "tdsm/transition.hpp"

using namespace tdsm;

namespace {

GaussianMixture toy() { return GaussianMixture::toy_two_class(); }

TransitionMatrix toy_reverse() {
  TransitionMatrix s;
  s.orientation = Orientation::reverse;
  s.c = 2;
  s.rows.resize(2, 2);
  s.rows << 0.8, 0.2, 0.2, 0.8;
  return s;
}

ScoreModel random_model(unsigned long long seed) {
  ScoreModelArch arch;
  arch.hidden = {8};
  arch.class_embed = 4;
  arch.time_embed = 4;
  ScoreModel model(arch, seed);
  Rng rng(seed + 50);
  for (const auto& name : model.params().names())
    model.params().value(name) = 0.3 * rng.normal_matrix(
        model.params().value(name).rows(), model.params().value(name).cols());
  return model;
}

}  // namespace

TEST_CASE("geometric time grid is a descending log-spaced ladder") {
  auto grid = geometric_time_grid(10.0, 0.05, 64);
  REQUIRE(grid.size() == 65);
  CHECK(grid(0) == 10.0);
  CHECK(grid(64) == doctest::Approx(0.05).epsilon(1e-14));
  const double ratio = grid(1) / grid(0);
  for (int i = 0; i + 1 < 65; ++i) {
    CHECK(grid(i + 1) < grid(i));
    CHECK(grid(i + 1) / grid(i) == doctest::Approx(ratio).epsilon(1e-12));
  }
  CHECK_THROWS_AS(geometric_time_grid(1.0, 2.0, 8), Error);
  CHECK_THROWS_AS(geometric_time_grid(1.0, 0.1, 0), Error);
  CHECK_THROWS_AS(geometric_time_grid(1.0, 0.0, 8), Error);
}

TEST_CASE("sampler configuration is validated") {
  SamplerConfig cfg;
  cfg.validate();
  cfg.method = "leapfrog";
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.method = "reverse-sde";
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.steps = 16;
  cfg.t_min = 11.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("prior specs carry the mixture components") {
  auto g = toy();
  auto S = toy_reverse();

  auto clean = clean_component_prior(g, 1);
  REQUIRE(clean.means.rows() == 1);
  CHECK((clean.means.row(0) - g.means.row(1)).norm() == 0.0);
  CHECK(clean.weights(0) == 1.0);
  CHECK(clean.variances(0) == g.variances(1));
  clean.validate();
  CHECK_THROWS_AS(clean_component_prior(g, 5), Error);

  auto noisy = noisy_mixture_prior(g, S, 0);
  REQUIRE(noisy.means.rows() == 2);
  CHECK((noisy.weights - S.rows.row(0).transpose()).norm() == 0.0);
  CHECK((noisy.means - g.means).norm() == 0.0);
  noisy.validate();
  CHECK_THROWS_AS(noisy_mixture_prior(g, make_symmetric(2, 0.2), 0), Error);

  PriorSpec bad = noisy;
  bad.weights(0) = 0.7;  // breaks the simplex
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = noisy;
  bad.variances(0) = -1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = noisy;
  bad.weights.resize(3);
  CHECK_THROWS_AS(bad.validate(), Error);

  PriorSpec empty;
  CHECK(empty.empty());
  empty.validate();
}

TEST_CASE("prior draws feed the integrator with the right moments") {
  auto g = toy();
  auto S = toy_reverse();
  VESchedule sched;
  BatchScoreFn zero_score = [](const Eigen::MatrixXd& x, int, double) {
    return Eigen::MatrixXd::Zero(x.rows(), x.cols());
  };
  SamplerConfig cfg;
  cfg.steps = 1;
  cfg.t_max = 10.0;
  cfg.t_min = 9.0;  // one almost-trivial step: the prior dominates
  cfg.seed = 77;
  const int n = 4000;

  // zero-centered default: mean 0, per-coordinate variance 101 + 20
  auto x = sample_reverse_sde(zero_score, sched, cfg, 0, n, 2);
  auto mean = sample_mean(x);
  auto cov = sample_covariance(x);
  CHECK(mean.cwiseAbs().maxCoeff() < 0.9);
  CHECK(std::abs(cov(0, 0) - 121.0) < 15.0);
  CHECK(std::abs(cov(1, 1) - 121.0) < 15.0);

  // exact component prior: mean at the class mean
  cfg.prior = clean_component_prior(g, 1);
  auto xc = sample_reverse_sde(zero_score, sched, cfg, 1, n, 2);
  CHECK((sample_mean(xc) - g.means.row(1).transpose()).cwiseAbs().maxCoeff() <
        0.9);

  // reverse-row mixture prior: mean at 0.8 mu0 + 0.2 mu1 = (1.8, 1.8)
  cfg.prior = noisy_mixture_prior(g, S, 0);
  auto xm = sample_reverse_sde(zero_score, sched, cfg, 0, n, 2);
  CHECK((sample_mean(xm) - Eigen::Vector2d(1.8, 1.8)).cwiseAbs().maxCoeff() <
        0.9);
}

TEST_CASE("sampling is bitwise deterministic in the seed") {
  auto g = toy();
  VESchedule sched;
  auto score = make_oracle_clean_score_fn(g, sched);
  SamplerConfig cfg;
  cfg.steps = 12;
  cfg.seed = 5;
  auto a = sample_reverse_sde(score, sched, cfg, 0, 8, 2);
  auto b = sample_reverse_sde(score, sched, cfg, 0, 8, 2);
  CHECK((a.array() == b.array()).all());
  cfg.seed = 6;
  auto c = sample_reverse_sde(score, sched, cfg, 0, 8, 2);
  CHECK((a - c).cwiseAbs().maxCoeff() > 0.0);

  auto o1 = sample_ode(score, sched, cfg, 0, 8, 2);
  auto o2 = sample_ode(score, sched, cfg, 0, 8, 2);
  CHECK((o1.array() == o2.array()).all());
}

TEST_CASE("oracle reverse diffusion reproduces each component") {
  auto g = toy();
  VESchedule sched;
  auto score = make_oracle_clean_score_fn(g, sched);
  const int n = 1500;
  for (int label : {0, 1}) {
    SamplerConfig cfg;
    cfg.steps = 96;
    cfg.seed = 900 + static_cast<unsigned long long>(label);
    cfg.prior = clean_component_prior(g, label);
    for (bool use_ode : {false, true}) {
      Eigen::MatrixXd x =
          use_ode ? sample_ode(score, sched, cfg, label, n, 2)
                  : sample_reverse_sde(score, sched, cfg, label, n, 2);
      auto mean = sample_mean(x);
      CHECK((mean - g.means.row(label).transpose()).norm() < 0.15);
      auto cov = sample_covariance(x);
      CHECK(cov(0, 0) > 0.7);
      CHECK(cov(0, 0) < 1.5);
      CHECK(std::abs(cov(0, 1)) < 0.15);
      CHECK(condition_accuracy(g, x, std::vector<int>(n, label)) > 0.995);
    }
  }
}

TEST_CASE("diverging score fields abort the integration") {
  VESchedule sched;
  BatchScoreFn nan_score = [](const Eigen::MatrixXd& x, int, double) {
    return Eigen::MatrixXd::Constant(x.rows(), x.cols(),
                                     std::numeric_limits<double>::quiet_NaN());
  };
  SamplerConfig cfg;
  cfg.steps = 4;
  CHECK_THROWS_AS(sample_reverse_sde(nan_score, sched, cfg, 0, 4, 2),
                  DivergedError);
  CHECK_THROWS_AS(sample_ode(nan_score, sched, cfg, 0, 4, 2), DivergedError);
}

TEST_CASE("classifier guidance follows its formula and Bayes identity") {
  auto g = toy();
  VESchedule sched;
  auto uncond = make_oracle_marginal_score_fn(g, sched);
  BatchGradFn clean_grad = [&](const Eigen::MatrixXd& x, int y, double t) {
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out.row(i) =
          clean_classifier_log_grad(g, sched, x.row(i).transpose(), y, t)
              .transpose();
    return out;
  };

  Eigen::Vector2d x(0.4, -1.1);
  for (double t : {0.1, 1.0, 3.0})
    for (int y : {0, 1}) {
      // scale 1 recovers the clean conditional score exactly
      auto guided = guided_score_cg(uncond, clean_grad, 1.0, x, y, t);
      CHECK((guided - clean_score(g, sched, x, y, t)).cwiseAbs().maxCoeff() <
            1e-10);
      // scale 0 is the unconditional field
      auto off = guided_score_cg(uncond, clean_grad, 0.0, x, y, t);
      CHECK((off - marginal_score(g, sched, x, t)).norm() == 0.0);
      // arbitrary scale: the literal affine formula
      auto s2 = guided_score_cg(uncond, clean_grad, 2.5, x, y, t);
      Eigen::VectorXd expect =
          marginal_score(g, sched, x, t) +
          2.5 * clean_classifier_log_grad(g, sched, x, y, t);
      CHECK((s2 - expect).cwiseAbs().maxCoeff() < 1e-14);
    }
}

TEST_CASE("transition-aware guidance reduces to plain guidance at identity") {
  auto g = toy();
  VESchedule sched;
  auto uncond = make_oracle_marginal_score_fn(g, sched);
  BatchGradFn noisy_grad = [&](const Eigen::MatrixXd& x, int yt, double t) {
    Eigen::MatrixXd out(x.rows(), x.cols());
    auto S = toy_reverse();
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out.row(i) =
          noisy_classifier_log_grad(g, sched, S, x.row(i).transpose(), yt, t)
              .transpose();
    return out;
  };
  WeightMatrixFn identity_w = [](const Eigen::VectorXd&, double) {
    return Eigen::MatrixXd::Identity(2, 2);
  };
  Eigen::Vector2d x(0.3, 0.9);
  for (int y : {0, 1}) {
    auto tcg = guided_score_tcg(uncond, noisy_grad, identity_w, x, y, 1.0, 1.5);
    auto cg = guided_score_cg(uncond, noisy_grad, 1.5, x, y, 1.0);
    CHECK((tcg - cg).norm() == 0.0);
  }
}

TEST_CASE("all-oracle transition guidance recovers the clean score") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  auto uncond = make_oracle_marginal_score_fn(g, sched);
  BatchGradFn noisy_grad = [&](const Eigen::MatrixXd& x, int yt, double t) {
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out.row(i) =
          noisy_classifier_log_grad(g, sched, S, x.row(i).transpose(), yt, t)
              .transpose();
    return out;
  };
  WeightMatrixFn wmat = [&](const Eigen::VectorXd& x, double t) {
    return weight_matrix(g, sched, S, x, t);
  };

  // well-mixed points: the identity holds far below the fallback threshold
  for (double x1 : {-1.0, 0.0, 1.5})
    for (double t : {0.3, 1.0, 3.0})
      for (int y : {0, 1}) {
        Eigen::Vector2d x(x1, 0.25);
        TcgDiagnostics diag;
        auto guided =
            guided_score_tcg(uncond, noisy_grad, wmat, x, y, t, 1.0, &diag);
        CHECK(diag.fallbacks == 0);
        CHECK((guided - clean_score(g, sched, x, y, t)).cwiseAbs().maxCoeff() <
              1e-6);
      }

  // a saturated point trips the conditioning guard and falls back
  Eigen::Vector2d deep = g.means.row(0).transpose();
  TcgDiagnostics diag;
  auto fb = guided_score_tcg(uncond, noisy_grad, wmat, deep, 0, 0.1, 1.0,
                             &diag);
  CHECK(diag.fallbacks == 1);
  CHECK(diag.max_condition > 1e12);
  auto cg = guided_score_cg(uncond, noisy_grad, 1.0, deep, 0, 0.1);
  CHECK((fb - cg).norm() == 0.0);
}

TEST_CASE("classifier-free mixing is the stated affine combination") {
  auto model = random_model(31);
  Rng rng(32);
  Eigen::MatrixXd xs = rng.normal_matrix(3, 2);
  for (double alpha : {0.0, 0.7, 2.0})
    for (int y : {0, 1})
      for (int i = 0; i < 3; ++i) {
        Eigen::VectorXd x = xs.row(i).transpose();
        auto mixed = guided_score_cfg(model, alpha, x, y, 0.6);
        Eigen::VectorXd cond = model.eval(x.transpose(), y, 0.6).row(0);
        Eigen::VectorXd null =
            model.eval(x.transpose(), model.null_label(), 0.6).row(0);
        Eigen::VectorXd expect = (1.0 + alpha) * cond - alpha * null;
        CHECK((mixed - expect).cwiseAbs().maxCoeff() < 1e-14);
        if (alpha == 0.0) CHECK((mixed - cond).norm() == 0.0);
      }
}

TEST_CASE("affine extrapolation matches its coefficient formula") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  auto score = make_oracle_clean_score_fn(g, sched);
  PointWeightFn weights = [&](const Eigen::VectorXd& x, int ytilde, double t) {
    return exact_weight_vector(g, sched, S, x, ytilde, t);
  };

  Eigen::Vector2d x(0.8, -0.3);
  for (double lambda : {0.0, 0.5, 1.0})
    for (int y : {0, 1}) {
      auto out = affine_score(score, weights, lambda, x, y, 1.0, 2);
      auto w = weights(x, y, 1.0);
      Eigen::VectorXd expect =
          (1.0 + lambda) * clean_score(g, sched, x, y, 1.0);
      for (int j = 0; j < 2; ++j)
        expect -= lambda * w(j) * clean_score(g, sched, x, j, 1.0);
      CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-13);
      if (lambda == 0.0)
        CHECK((out - clean_score(g, sched, x, y, 1.0)).norm() == 0.0);
    }

  // constant fields are fixed points because the coefficients sum to one
  BatchScoreFn constant = [](const Eigen::MatrixXd& xin, int, double) {
    return Eigen::MatrixXd(
        Eigen::RowVector2d(0.7, -0.2).replicate(xin.rows(), 1));
  };
  auto fixed = affine_score(constant, weights, 3.0, x, 0, 1.0, 2);
  CHECK((fixed - Eigen::Vector2d(0.7, -0.2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("adapters agree with the functions they wrap") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  auto model = random_model(41);
  Rng rng(42);
  Eigen::MatrixXd x = rng.normal_matrix(4, 2);

  auto model_fn = make_model_score_fn(model);
  CHECK((model_fn(x, 1, 0.9) - model.eval(x, 1, 0.9)).norm() == 0.0);
  auto uncond_fn = make_model_uncond_score_fn(model);
  CHECK((uncond_fn(x, 0, 0.9) - uncond_fn(x, 1, 0.9)).norm() == 0.0);
  CHECK((uncond_fn(x, 0, 0.9) - model.eval(x, model.null_label(), 0.9))
            .norm() == 0.0);

  auto clean_fn = make_oracle_clean_score_fn(g, sched);
  auto marg_fn = make_oracle_marginal_score_fn(g, sched);
  for (int i = 0; i < 4; ++i) {
    CHECK((clean_fn(x, 1, 0.7).row(i).transpose() -
           clean_score(g, sched, x.row(i).transpose(), 1, 0.7))
              .norm() < 1e-14);
    CHECK((marg_fn(x, 0, 0.7).row(i).transpose() -
           marginal_score(g, sched, x.row(i).transpose(), 0.7))
              .norm() < 1e-14);
  }

  ClassifierArch carch;
  carch.hidden = {8};
  NoisyClassifier clf(carch, 4);
  Rng crng(43);
  for (const auto& name : clf.params().names())
    clf.params().value(name) = 0.5 * crng.normal_matrix(
        clf.params().value(name).rows(), clf.params().value(name).cols());
  auto grad_fn = make_classifier_grad_fn(clf);
  Eigen::VectorXd tvec = Eigen::VectorXd::Constant(4, 0.7);
  CHECK((grad_fn(x, 1, 0.7) -
         clf.log_prob_input_grad(x, std::vector<int>(4, 1), tvec))
            .norm() == 0.0);

  // combinator adapters match their pointwise definitions row by row
  auto uncond = make_oracle_marginal_score_fn(g, sched);
  BatchGradFn noisy_grad = [&](const Eigen::MatrixXd& xin, int yt, double t) {
    Eigen::MatrixXd out(xin.rows(), xin.cols());
    for (Eigen::Index i = 0; i < xin.rows(); ++i)
      out.row(i) = noisy_classifier_log_grad(g, sched, S,
                                             xin.row(i).transpose(), yt, t)
                       .transpose();
    return out;
  };
  auto cg_fn = make_cg_score_fn(uncond, noisy_grad, 1.5);
  auto batch = cg_fn(x, 1, 0.7);
  for (int i = 0; i < 4; ++i)
    CHECK((batch.row(i).transpose() -
           guided_score_cg(uncond, noisy_grad, 1.5, x.row(i).transpose(), 1,
                           0.7))
              .norm() < 1e-14);

  WeightMatrixFn wmat = [&](const Eigen::VectorXd& p, double t) {
    return weight_matrix(g, sched, S, p, t);
  };
  TcgDiagnostics diag;
  auto tcg_fn = make_tcg_score_fn(uncond, noisy_grad, wmat, 1.0, 2, &diag);
  auto tbatch = tcg_fn(x, 0, 0.7);
  for (int i = 0; i < 4; ++i)
    CHECK((tbatch.row(i).transpose() -
           guided_score_tcg(uncond, noisy_grad, wmat, x.row(i).transpose(), 0,
                            0.7))
              .norm() < 1e-14);

  auto cfg_fn = make_cfg_score_fn(model, 0.8);
  auto cbatch = cfg_fn(x, 1, 0.7);
  for (int i = 0; i < 4; ++i)
    CHECK((cbatch.row(i).transpose() -
           guided_score_cfg(model, 0.8, x.row(i).transpose(), 1, 0.7))
              .norm() < 1e-13);

  auto wsrc = make_oracle_weight_source(g, sched, S);
  auto aff_fn = make_affine_score_fn(clean_fn, wsrc, 1.0, 2);
  PointWeightFn pw = [&](const Eigen::VectorXd& p, int ytilde, double t) {
    return exact_weight_vector(g, sched, S, p, ytilde, t);
  };
  auto abatch = aff_fn(x, 1, 0.7);
  for (int i = 0; i < 4; ++i)
    CHECK((abatch.row(i).transpose() -
           affine_score(clean_fn, pw, 1.0, x.row(i).transpose(), 1, 0.7, 2))
              .norm() < 1e-13);
}
