#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "doctest.h"
#include "tdsm/errors.hpp"
#include "tdsm/gmm.hpp"
#include "tdsm/rng.hpp"
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

// Straight-line isotropic Gaussian log density, independent of the library.
double ref_gauss_log(const Eigen::VectorXd& x, const Eigen::VectorXd& mu,
                     double var) {
  const double d = static_cast<double>(x.size());
  return -0.5 * d * std::log(2.0 * M_PI * var) -
         (x - mu).squaredNorm() / (2.0 * var);
}

double ref_class_log(const GaussianMixture& g, const Eigen::VectorXd& x, int y,
                     double t) {
  return ref_gauss_log(x, g.means.row(y).transpose(),
                       g.variances(y) + t * t);
}

Eigen::VectorXd ref_posterior(const GaussianMixture& g,
                              const Eigen::VectorXd& x, double t) {
  Eigen::VectorXd logs(g.classes);
  for (int y = 0; y < g.classes; ++y)
    logs(y) = std::log(g.clean_prior(y)) + ref_class_log(g, x, y, t);
  Eigen::VectorXd p = (logs.array() - logs.maxCoeff()).exp();
  return p / p.sum();
}

// Central-difference gradient of a scalar function of a 2-vector.
Eigen::VectorXd fd_grad(const std::function<double(const Eigen::VectorXd&)>& f,
                        const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (int i = 0; i < x.size(); ++i) {
    Eigen::VectorXd hi = x, lo = x;
    hi(i) += h;
    lo(i) -= h;
    g(i) = (f(hi) - f(lo)) / (2.0 * h);
  }
  return g;
}

std::vector<Eigen::Vector2d> probe_points() {
  return {{0.7, -1.3}, {2.5, 3.1}, {-4.0, 1.0}, {0.0, 0.0}, {-2.2, -2.9}};
}

}  // namespace

TEST_CASE("perturbed class density matches the closed-form Gaussian") {
  auto g = toy();
  VESchedule sched;
  for (const auto& x : probe_points())
    for (double t : {0.05, 0.7, 3.0})
      for (int y : {0, 1}) {
        double lib = perturbed_class_log_density(g, sched, x, y, t);
        CHECK(lib == doctest::Approx(ref_class_log(g, x, y, t)).epsilon(1e-13));
        CHECK(perturbed_class_density(g, sched, x, y, t) ==
              doctest::Approx(std::exp(lib)).epsilon(1e-13));
      }
}

TEST_CASE("marginal density at the symmetric point has its known value") {
  auto g = toy();
  VESchedule sched;
  Eigen::Vector2d origin(0.0, 0.0);
  // both components contribute (1/(4 pi)) exp(-18/4) at t = 1
  const double expected = std::exp(-4.5) / (4.0 * M_PI);
  CHECK(std::exp(marginal_log_density(g, sched, origin, 1.0)) ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(8.8396419e-4).epsilon(1e-7));
}

TEST_CASE("scores are gradients of their log densities") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  for (const auto& x : probe_points())
    for (double t : {0.1, 1.0, 3.0}) {
      for (int y : {0, 1}) {
        // closed form -(x - mu) / (v + t^2)
        Eigen::VectorXd expect =
            -(x - g.means.row(y).transpose()) / (g.variances(y) + t * t);
        CHECK((clean_score(g, sched, x, y, t) - expect).norm() < 1e-12);
        auto fd = fd_grad(
            [&](const Eigen::VectorXd& p) {
              return perturbed_class_log_density(g, sched, p, y, t);
            },
            x);
        CHECK((clean_score(g, sched, x, y, t) - fd).norm() < 1e-6);

        auto fd_noisy = fd_grad(
            [&](const Eigen::VectorXd& p) {
              return noisy_log_density(g, sched, S, p, y, t);
            },
            x);
        CHECK((noisy_score(g, sched, S, x, y, t) - fd_noisy).norm() < 1e-6);
      }
      auto fd_marg = fd_grad(
          [&](const Eigen::VectorXd& p) {
            return marginal_log_density(g, sched, p, t);
          },
          x);
      CHECK((marginal_score(g, sched, x, t) - fd_marg).norm() < 1e-6);
    }
}

TEST_CASE("noisy score is the weight-mixture of clean scores") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  for (const auto& x : probe_points())
    for (double t : {0.1, 1.0, 3.0, 10.0})
      for (int ytilde : {0, 1}) {
        auto w = exact_weight_vector(g, sched, S, x, ytilde, t);
        Eigen::VectorXd mix = Eigen::VectorXd::Zero(2);
        for (int y = 0; y < 2; ++y) mix += w(y) * clean_score(g, sched, x, y, t);
        CHECK((noisy_score(g, sched, S, x, ytilde, t) - mix)
                  .cwiseAbs()
                  .maxCoeff() < 1e-11);
      }
}

TEST_CASE("density-ratio and posterior weight routes agree") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  for (const auto& x : probe_points())
    for (double t : {0.1, 1.0, 3.0, 10.0})
      for (int ytilde : {0, 1})
        for (int y : {0, 1})
          CHECK(std::abs(exact_weight(g, sched, S, x, ytilde, y, t) -
                         posterior_weight(g, sched, S, x, ytilde, y, t)) <
                1e-12);
}

TEST_CASE("weight vectors are simplex points matching the scalar route") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  for (const auto& x : probe_points())
    for (double t : {0.1, 1.0, 10.0})
      for (int ytilde : {0, 1}) {
        auto w = exact_weight_vector(g, sched, S, x, ytilde, t);
        CHECK(std::abs(w.sum() - 1.0) < 1e-12);
        CHECK(w.minCoeff() >= 0.0);
        for (int y = 0; y < 2; ++y)
          CHECK(std::abs(w(y) - exact_weight(g, sched, S, x, ytilde, y, t)) <
                1e-12);
      }
}

TEST_CASE("weights survive far-field density underflow") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  Eigen::Vector2d far(1e3, 1e3);  // raw densities underflow to zero here
  auto w = exact_weight_vector(g, sched, S, far, 0, 0.5);
  CHECK(w.allFinite());
  CHECK(std::abs(w.sum() - 1.0) < 1e-12);
  CHECK(w(0) == doctest::Approx(1.0));  // overwhelmingly the nearest class
}

TEST_CASE("equidistant points return the transition entries exactly") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  Eigen::Vector2d mid(0.0, 0.0);
  for (double t : {0.05, 0.5, 1.0, 10.0})
    for (int ytilde : {0, 1})
      for (int y : {0, 1})
        CHECK(exact_weight(g, sched, S, mid, ytilde, y, t) ==
              S.rows(ytilde, y));
  // anti-diagonal equidistant points share the property
  Eigen::Vector2d anti(1.5, -1.5);
  CHECK(exact_weight(g, sched, S, anti, 0, 0, 1.0) == S.rows(0, 0));
}

TEST_CASE("large-t weights flatten onto the transition entries") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  for (double x1 : {-2.0, 0.0, 2.0})
    for (double x2 : {-2.0, 0.0, 2.0}) {
      Eigen::Vector2d x(x1, x2);
      CHECK(std::abs(exact_weight(g, sched, S, x, 0, 0, 10.0) - 0.8) < 0.05);
    }
}

TEST_CASE("small-t weights sharpen to the sampled class") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  Rng rng(31);
  const double t = 0.05;
  for (int k = 0; k < 32; ++k) {
    Eigen::Vector2d x = g.means.row(0).transpose() +
                        std::sqrt(1.0 + t * t) *
                            Eigen::Vector2d(rng.normal(), rng.normal());
    CHECK(exact_weight(g, sched, S, x, 0, 0, t) > 0.99);
  }
}

TEST_CASE("clean posterior matches a straight-line Bayes computation") {
  auto g = toy();
  VESchedule sched;
  for (const auto& x : probe_points())
    for (double t : {0.1, 1.0, 10.0}) {
      auto p = clean_posterior(g, sched, x, t);
      CHECK(std::abs(p.sum() - 1.0) < 1e-12);
      CHECK((p - ref_posterior(g, x, t)).cwiseAbs().maxCoeff() < 1e-12);
    }
  // near a mean at small t the posterior is nearly hard
  CHECK(clean_posterior(g, sched, g.means.row(0).transpose(), 0.05)(0) > 0.999);
  // at very large t it relaxes to the prior
  auto relaxed = clean_posterior(g, sched, Eigen::Vector2d(1.0, 0.0), 1e4);
  CHECK(std::abs(relaxed(0) - 0.5) < 1e-4);
}

TEST_CASE("oracle noisy classifier agrees with two independent routes") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  // route 1: forward-matrix mixing of the clean posterior
  auto pair = forward_from_reverse(S, g.clean_prior, PriorSide::clean);
  for (const auto& x : probe_points())
    for (double t : {0.1, 1.0, 3.0}) {
      auto h = oracle_noisy_classifier(g, sched, S, x, t);
      CHECK(std::abs(h.sum() - 1.0) < 1e-12);
      Eigen::VectorXd mixed =
          pair.forward.rows.transpose() * ref_posterior(g, x, t);
      CHECK((h - mixed).cwiseAbs().maxCoeff() < 1e-12);
      // route 2: Bayes over noisy densities with the noisy prior
      Eigen::VectorXd logs(2);
      for (int yt = 0; yt < 2; ++yt)
        logs(yt) = std::log(pair.noisy_prior(yt)) +
                   noisy_log_density(g, sched, S, x, yt, t);
      Eigen::VectorXd p = (logs.array() - logs.maxCoeff()).exp();
      p /= p.sum();
      CHECK((h - p).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("weight matrix rows are the per-noisy-label weight vectors") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  for (const auto& x : probe_points())
    for (double t : {0.1, 1.0, 3.0}) {
      auto W = weight_matrix(g, sched, S, x, t);
      for (int ytilde = 0; ytilde < 2; ++ytilde)
        CHECK((W.row(ytilde).transpose() -
               exact_weight_vector(g, sched, S, x, ytilde, t))
                  .cwiseAbs()
                  .maxCoeff() < 1e-14);
    }
}

TEST_CASE("stationary mixed field matches an explicit matrix solve") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  for (const auto& x : probe_points())
    for (double t : {0.1, 1.0, 3.0}) {
      Eigen::MatrixXd C(2, 2), W = weight_matrix(g, sched, S, x, t);
      for (int y = 0; y < 2; ++y)
        C.row(y) = clean_score(g, sched, x, y, t).transpose();
      Eigen::MatrixXd F = S.rows.inverse() * W * C;
      for (int y = 0; y < 2; ++y)
        CHECK((sdsm_fixed_point(g, sched, S, x, y, t).transpose() - F.row(y))
                  .cwiseAbs()
                  .maxCoeff() < 1e-10);
    }
}

TEST_CASE("classifier log-gradients match finite differences") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  auto pair = forward_from_reverse(S, g.clean_prior, PriorSide::clean);
  for (const auto& x : probe_points())
    for (double t : {0.3, 1.0}) {
      for (int y : {0, 1}) {
        auto fd = fd_grad(
            [&](const Eigen::VectorXd& p) {
              return std::log(ref_posterior(g, p, t)(y));
            },
            x);
        CHECK((clean_classifier_log_grad(g, sched, x, y, t) - fd).norm() <
              1e-6);
      }
      for (int yt : {0, 1}) {
        auto fd = fd_grad(
            [&](const Eigen::VectorXd& p) {
              Eigen::VectorXd mixed =
                  pair.forward.rows.transpose() * ref_posterior(g, p, t);
              return std::log(mixed(yt));
            },
            x);
        CHECK((noisy_classifier_log_grad(g, sched, S, x, yt, t) - fd).norm() <
              1e-6);
      }
    }
}

TEST_CASE("oracle calls reject malformed arguments") {
  auto g = toy();
  VESchedule sched;
  auto S = toy_reverse();
  Eigen::Vector2d x(0.0, 0.0);
  Eigen::Vector3d wrong_dim(0.0, 0.0, 0.0);
  CHECK_THROWS_AS(clean_score(g, sched, wrong_dim, 0, 1.0), Error);
  CHECK_THROWS_AS(clean_score(g, sched, x, 5, 1.0), Error);
  CHECK_THROWS_AS(clean_score(g, sched, x, 0, -1.0), Error);

  TransitionMatrix forward = make_symmetric(2, 0.2);  // wrong orientation
  CHECK_THROWS_AS(noisy_score(g, sched, forward, x, 0, 1.0), Error);
  CHECK_THROWS_AS(exact_weight(g, sched, forward, x, 0, 0, 1.0), Error);

  GaussianMixture bad = g;
  bad.variances(0) = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}
