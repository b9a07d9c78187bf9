#include "tdsm/verify.hpp"

#include <Eigen/SVD>
#include <cmath>
#include <sstream>

#include "tdsm/errors.hpp"
#include "tdsm/io.hpp"
#include "tdsm/metrics.hpp"
#include "tdsm/objectives.hpp"
#include "tdsm/rng.hpp"
#include "tdsm/sampler.hpp"
#include "tdsm/score_model.hpp"

namespace tdsm {

namespace {

// Central finite difference of a scalar function of x.
template <typename F>
Eigen::VectorXd fd_grad(const F& f, const Eigen::VectorXd& x, double step) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd p = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = p(i);
    p(i) = keep + step;
    const double hi = f(p);
    p(i) = keep - step;
    const double lo = f(p);
    p(i) = keep;
    g(i) = (hi - lo) / (2.0 * step);
  }
  return g;
}

double rel_err(double got, double want) {
  return std::abs(got - want) /
         std::max({1.0, std::abs(got), std::abs(want)});
}

// Mixture-typical probe points: every class mean plus seeded draws from the
// perturbed class laws at a mid-range time.
std::vector<Eigen::VectorXd> probe_points(const GaussianMixture& gmm,
                                          unsigned long long seed) {
  Rng rng(seed);
  std::vector<Eigen::VectorXd> pts;
  for (int y = 0; y < gmm.classes; ++y)
    pts.push_back(gmm.means.row(y).transpose());
  for (int k = 0; k < 12; ++k) {
    const int y = k % gmm.classes;
    const double sd = std::sqrt(gmm.variances(y) + 1.0);
    Eigen::VectorXd z(gmm.dim);
    for (Eigen::Index i = 0; i < gmm.dim; ++i) z(i) = rng.normal();
    pts.push_back(gmm.means.row(y).transpose() + sd * z);
  }
  return pts;
}

bool symmetric_pair_regime(const GaussianMixture& gmm) {
  return gmm.classes == 2 && gmm.variances(0) == gmm.variances(1);
}

struct Registry {
  std::vector<CheckResult> results;

  void add(const std::string& name, double worst, double tol,
           const std::string& note) {
    results.push_back({name, worst, tol, worst <= tol, note});
  }
  void skip(const std::string& name, const std::string& why) {
    results.push_back({name, 0.0, 0.0, true, "skipped: " + why});
  }
};

}  // namespace

const std::vector<std::string>& verification_manifest() {
  static const std::vector<std::string> names = {
      "mixture_score_identity",      // noisy score = weighted clean scores
      "posterior_weight_identity",   // ratio form = posterior form
      "weight_simplex",              // weights nonnegative, sum to one
      "score_finite_difference",     // scores match FD of log densities
      "estimator_oracle_match",      // plug-in estimator = exact weights
      "estimator_prior_rows",        // prior-valued classifier gives S rows
      "weight_center_value",         // symmetric point gives the S entry
      "weight_plateau_large_t",      // weights flatten to the S row
      "weight_hard_labels_small_t",  // weights sharpen to hard labels
      "classifier_gradient_mixture", // noisy grad = weighted clean grads
      "classifier_guidance_identity",// marginal + posterior grad = clean
      "transition_guidance_identity",// weighted noisy guidance = clean
      "tcg_identity_reduction",      // identity matrix: tcg collapses to cg
      "noisy_score_matrix_form",     // stacked scores: N = W C
      "fixed_point_matrix_identity", // stacked fixed point: S F = W C
      "affine_constant_field",       // affine coefficients sum to one
      "cfg_endpoints",               // alpha in {0, -1} returns the inputs
      "sampler_determinism",         // same seed, bit-identical chains
  };
  return names;
}

std::vector<CheckResult> run_verification(const GaussianMixture& gmm,
                                          const VESchedule& sched,
                                          const TransitionMatrix& S,
                                          const VerifyOptions& opts) {
  gmm.validate();
  sched.validate();
  S.validate();
  if (S.rows.rows() != gmm.classes)
    throw InconsistentInputError("verify: S size does not match classes");

  Registry reg;
  const Eigen::MatrixXd grid =
      gmm.dim == 2 ? make_grid(opts.grid_lo, opts.grid_hi, opts.grid_n)
                   : Eigen::MatrixXd();
  const std::vector<Eigen::VectorXd> probes = probe_points(gmm, opts.seed);
  const int c = gmm.classes;

  auto grid_or_probes = [&](auto&& fn) {
    if (grid.rows() > 0)
      for (Eigen::Index i = 0; i < grid.rows(); ++i)
        fn(Eigen::VectorXd(grid.row(i).transpose()));
    else
      for (const Eigen::VectorXd& p : probes) fn(p);
  };

  {  // noisy score vs weighted sum of clean scores
    double worst = 0.0;
    grid_or_probes([&](const Eigen::VectorXd& x) {
      for (double t : opts.times)
        for (int yt = 0; yt < c; ++yt) {
          const Eigen::VectorXd w = exact_weight_vector(gmm, sched, S, x, yt, t);
          Eigen::VectorXd mix = Eigen::VectorXd::Zero(gmm.dim);
          for (int y = 0; y < c; ++y)
            mix += w(y) * clean_score(gmm, sched, x, y, t);
          worst = std::max(
              worst, (noisy_score(gmm, sched, S, x, yt, t) - mix)
                         .lpNorm<Eigen::Infinity>());
        }
    });
    reg.add("mixture_score_identity", worst, 1e-10, "grid x times x labels");
  }

  {  // ratio-form weight vs posterior-form weight
    double worst = 0.0;
    grid_or_probes([&](const Eigen::VectorXd& x) {
      for (double t : opts.times)
        for (int yt = 0; yt < c; ++yt)
          for (int y = 0; y < c; ++y)
            worst = std::max(
                worst, std::abs(exact_weight(gmm, sched, S, x, yt, y, t) -
                                posterior_weight(gmm, sched, S, x, yt, y, t)));
    });
    reg.add("posterior_weight_identity", worst, 1e-10,
            "grid x times x label pairs");
  }

  {  // weights form a probability vector
    double worst = 0.0;
    grid_or_probes([&](const Eigen::VectorXd& x) {
      for (double t : opts.times)
        for (int yt = 0; yt < c; ++yt) {
          const Eigen::VectorXd w = exact_weight_vector(gmm, sched, S, x, yt, t);
          worst = std::max(worst, std::abs(w.sum() - 1.0));
          worst = std::max(worst, std::max(-w.minCoeff(), 0.0));
        }
    });
    reg.add("weight_simplex", worst, 1e-12, "sum and nonnegativity");
  }

  {  // every score against finite differences of its log density
    double worst = 0.0;
    const double step = 1e-5;
    for (const Eigen::VectorXd& x : probes)
      for (double t : opts.guidance_times) {
        for (int y = 0; y < c; ++y) {
          const Eigen::VectorXd fd = fd_grad(
              [&](const Eigen::VectorXd& p) {
                return perturbed_class_log_density(gmm, sched, p, y, t);
              },
              x, step);
          const Eigen::VectorXd s = clean_score(gmm, sched, x, y, t);
          for (Eigen::Index i = 0; i < fd.size(); ++i)
            worst = std::max(worst, rel_err(s(i), fd(i)));
          const Eigen::VectorXd fdn = fd_grad(
              [&](const Eigen::VectorXd& p) {
                return noisy_log_density(gmm, sched, S, p, y, t);
              },
              x, step);
          const Eigen::VectorXd sn = noisy_score(gmm, sched, S, x, y, t);
          for (Eigen::Index i = 0; i < fdn.size(); ++i)
            worst = std::max(worst, rel_err(sn(i), fdn(i)));
        }
        const Eigen::VectorXd fdm = fd_grad(
            [&](const Eigen::VectorXd& p) {
              return marginal_log_density(gmm, sched, p, t);
            },
            x, step);
        const Eigen::VectorXd sm = marginal_score(gmm, sched, x, t);
        for (Eigen::Index i = 0; i < fdm.size(); ++i)
          worst = std::max(worst, rel_err(sm(i), fdm(i)));
      }
    reg.add("score_finite_difference", worst, 1e-5,
            "clean/noisy/marginal scores, central differences");
  }

  // Counts proportional to the exact noisy prior make the plug-in estimator
  // an identity rather than an approximation.
  const OrientedPair pair =
      forward_from_reverse(S, gmm.clean_prior, PriorSide::clean);
  Eigen::VectorXi counts(c);
  for (int i = 0; i < c; ++i)
    counts(i) = static_cast<int>(std::lround(pair.noisy_prior(i) * 1e7));

  {  // estimator fed the oracle classifier reproduces the exact weights
    const WeightEstimator est(S, counts);
    double worst = 0.0;
    grid_or_probes([&](const Eigen::VectorXd& x) {
      for (double t : opts.times) {
        const Eigen::VectorXd h = oracle_noisy_classifier(gmm, sched, S, x, t);
        for (int yt = 0; yt < c; ++yt) {
          const WeightVector w = est.estimate(h, yt);
          const Eigen::VectorXd ew = exact_weight_vector(gmm, sched, S, x, yt, t);
          worst = std::max(worst,
                           (w.values - ew).lpNorm<Eigen::Infinity>());
        }
      }
    });
    reg.add("estimator_oracle_match", worst, 1e-9,
            "oracle classifier, exact prior counts");
  }

  {  // prior-valued classifier output collapses the estimate to the S row
    const WeightEstimator est(S, counts);
    Eigen::VectorXd prior(c);
    for (int i = 0; i < c; ++i)
      prior(i) = static_cast<double>(counts(i)) / counts.sum();
    double worst = 0.0;
    for (int yt = 0; yt < c; ++yt) {
      const WeightVector w = est.estimate(prior, yt);
      worst = std::max(
          worst,
          (w.values - S.rows.row(yt).transpose()).lpNorm<Eigen::Infinity>());
    }
    reg.add("estimator_prior_rows", worst, 1e-12,
            "classifier pinned to the noisy prior");
  }

  if (symmetric_pair_regime(gmm)) {
    // at the equidistant point the density ratio is exactly one
    const Eigen::VectorXd mid =
        0.5 * (gmm.means.row(0) + gmm.means.row(1)).transpose();
    double worst = 0.0;
    for (double t : opts.times)
      worst = std::max(
          worst, std::abs(exact_weight(gmm, sched, S, mid, 0, 0, t) - S.rows(0, 0)));
    reg.add("weight_center_value", worst, 0.0,
            "midpoint of the two class means, exact equality");
  } else {
    reg.skip("weight_center_value", "needs an equal-variance 2-class mixture");
  }

  if (symmetric_pair_regime(gmm) && gmm.dim == 2) {
    const Eigen::MatrixXd pgrid =
        make_grid(opts.plateau_lo, opts.plateau_hi, opts.plateau_n);
    const double t = opts.times.empty() ? sched.t_max : opts.times.back();
    double worst = 0.0;
    for (Eigen::Index i = 0; i < pgrid.rows(); ++i) {
      const Eigen::VectorXd w =
          exact_weight_vector(gmm, sched, S, pgrid.row(i).transpose(), 0, t);
      worst = std::max(
          worst, (w - S.rows.row(0).transpose()).lpNorm<Eigen::Infinity>());
    }
    reg.add("weight_plateau_large_t", worst, 0.05,
            "t = " + format_double(t));
  } else {
    reg.skip("weight_plateau_large_t", "needs the 2-d two-class regime");
  }

  if (symmetric_pair_regime(gmm)) {
    Rng rng(opts.seed + 1);
    const double t = sched.t_min > 0.0 ? sched.t_min : 0.05;
    const double sd = std::sqrt(gmm.variances(0) + t * t);
    double worst = 0.0;
    for (int k = 0; k < opts.hard_label_samples; ++k) {
      Eigen::VectorXd x(gmm.dim);
      for (Eigen::Index i = 0; i < gmm.dim; ++i) x(i) = rng.normal();
      x = gmm.means.row(0).transpose() + sd * x;
      worst = std::max(worst, 1.0 - exact_weight(gmm, sched, S, x, 0, 0, t));
    }
    reg.add("weight_hard_labels_small_t", worst, 0.01,
            "class-1 draws at t = " + format_double(t));
  } else {
    reg.skip("weight_hard_labels_small_t",
             "needs an equal-variance 2-class mixture");
  }

  {  // noisy classifier gradient as a weight-mixture of clean gradients
    double worst = 0.0;
    for (const Eigen::VectorXd& x : probes)
      for (double t : opts.guidance_times)
        for (int yt = 0; yt < c; ++yt) {
          const Eigen::VectorXd w = exact_weight_vector(gmm, sched, S, x, yt, t);
          Eigen::VectorXd mix = Eigen::VectorXd::Zero(gmm.dim);
          for (int y = 0; y < c; ++y)
            mix += w(y) * clean_classifier_log_grad(gmm, sched, x, y, t);
          worst = std::max(
              worst, (noisy_classifier_log_grad(gmm, sched, S, x, yt, t) - mix)
                         .lpNorm<Eigen::Infinity>());
        }
    reg.add("classifier_gradient_mixture", worst, 1e-8,
            "probes x guidance times");
  }

  const BatchScoreFn marg = make_oracle_marginal_score_fn(gmm, sched);

  {  // marginal score plus posterior gradient recovers the clean score
    const BatchGradFn cgrad = [&](const Eigen::MatrixXd& x, int y, double t) {
      Eigen::MatrixXd g(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        g.row(i) =
            clean_classifier_log_grad(gmm, sched, x.row(i).transpose(), y, t)
                .transpose();
      return g;
    };
    double worst = 0.0;
    for (const Eigen::VectorXd& x : probes)
      for (double t : opts.guidance_times)
        for (int y = 0; y < c; ++y)
          worst = std::max(
              worst, (guided_score_cg(marg, cgrad, 1.0, x, y, t) -
                      clean_score(gmm, sched, x, y, t))
                         .lpNorm<Eigen::Infinity>());
    reg.add("classifier_guidance_identity", worst, 1e-6,
            "unit-scale guidance vs clean score");
  }

  const BatchGradFn ngrad = [&](const Eigen::MatrixXd& x, int yt, double t) {
    Eigen::MatrixXd g(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      g.row(i) =
          noisy_classifier_log_grad(gmm, sched, S, x.row(i).transpose(), yt, t)
              .transpose();
    return g;
  };
  const WeightMatrixFn wmat = [&](const Eigen::VectorXd& x, double t) {
    return weight_matrix(gmm, sched, S, x, t);
  };

  {  // All-oracle transition-aware guidance equals the clean score wherever
     // the weight-matrix solve is numerically well posed. The solve's forward
     // error is about cond(W) * eps * |gradients|, so the 1e-6 identity is
     // asserted where cond(W) <= 1e8; above the 1e12 operation limit the
     // documented fallback must fire instead, which is asserted here too.
    TcgDiagnostics diag;
    double worst = 0.0;
    long identity_pts = 0, limited_pts = 0, fallback_pts = 0, contract = 0;
    grid_or_probes([&](const Eigen::VectorXd& x) {
      for (double t : opts.guidance_times) {
        const Eigen::MatrixXd W = wmat(x, t);
        const Eigen::JacobiSVD<Eigen::MatrixXd> svd(W);
        const double cond = svd.singularValues()(0) /
                            svd.singularValues()(svd.singularValues().size() - 1);
        for (int y = 0; y < c; ++y) {
          const long before = diag.fallbacks;
          const Eigen::VectorXd g =
              guided_score_tcg(marg, ngrad, wmat, x, y, t, 1.0, &diag);
          const bool fell_back = diag.fallbacks > before;
          if (cond > 1e12) {
            ++fallback_pts;
            if (!fell_back) ++contract;
          } else if (cond <= 1e8) {
            ++identity_pts;
            if (fell_back) ++contract;
            worst = std::max(worst, (g - clean_score(gmm, sched, x, y, t))
                                        .lpNorm<Eigen::Infinity>());
          } else {
            ++limited_pts;
          }
        }
      }
    });
    if (contract > 0) worst = std::max(worst, 1.0);
    reg.add("transition_guidance_identity", worst, 1e-6,
            "identity on " + std::to_string(identity_pts) +
                " well-posed evals, fallback fired on " +
                std::to_string(fallback_pts) + ", borderline " +
                std::to_string(limited_pts) + ", contract violations " +
                std::to_string(contract));
  }

  {  // under the identity matrix, tcg must collapse onto cg
    TransitionMatrix ident;
    ident.orientation = Orientation::reverse;
    ident.c = c;
    ident.rows = Eigen::MatrixXd::Identity(c, c);
    const BatchGradFn id_grad = [&](const Eigen::MatrixXd& x, int yt,
                                    double t) {
      Eigen::MatrixXd g(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        g.row(i) = noisy_classifier_log_grad(gmm, sched, ident,
                                             x.row(i).transpose(), yt, t)
                       .transpose();
      return g;
    };
    const WeightMatrixFn id_wmat = [&](const Eigen::VectorXd& x, double t) {
      return weight_matrix(gmm, sched, ident, x, t);
    };
    double worst = 0.0;
    for (const Eigen::VectorXd& x : probes)
      for (double t : opts.guidance_times)
        for (int y = 0; y < c; ++y)
          worst = std::max(
              worst,
              (guided_score_tcg(marg, id_grad, id_wmat, x, y, t) -
               guided_score_cg(marg, id_grad, 1.0, x, y, t))
                  .lpNorm<Eigen::Infinity>());
    reg.add("tcg_identity_reduction", worst, 1e-12,
            "identity transition matrix");
  }

  {  // stacked mixture identity N = W C
    double worst = 0.0;
    for (const Eigen::VectorXd& x : probes)
      for (double t : opts.times) {
        const Eigen::MatrixXd W = weight_matrix(gmm, sched, S, x, t);
        Eigen::MatrixXd C(c, gmm.dim), N(c, gmm.dim);
        for (int y = 0; y < c; ++y) {
          C.row(y) = clean_score(gmm, sched, x, y, t).transpose();
          N.row(y) = noisy_score(gmm, sched, S, x, y, t).transpose();
        }
        worst = std::max(worst, (N - W * C).lpNorm<Eigen::Infinity>());
      }
    reg.add("noisy_score_matrix_form", worst, 1e-10, "stacked over labels");
  }

  {  // stacked fixed-point identity S F = W C
    double worst = 0.0;
    for (const Eigen::VectorXd& x : probes)
      for (double t : opts.times) {
        const Eigen::MatrixXd W = weight_matrix(gmm, sched, S, x, t);
        Eigen::MatrixXd C(c, gmm.dim), F(c, gmm.dim);
        for (int y = 0; y < c; ++y) {
          C.row(y) = clean_score(gmm, sched, x, y, t).transpose();
          F.row(y) = sdsm_fixed_point(gmm, sched, S, x, y, t).transpose();
        }
        worst = std::max(worst,
                         (S.rows * F - W * C).lpNorm<Eigen::Infinity>());
      }
    reg.add("fixed_point_matrix_identity", worst, 1e-10,
            "stacked over labels");
  }

  {  // a constant field is a fixed point of the affine combination
    Eigen::RowVectorXd crow(gmm.dim);
    for (Eigen::Index i = 0; i < gmm.dim; ++i)
      crow(i) = 0.7 - 1.3 * static_cast<double>(i);
    const BatchScoreFn const_field = [&](const Eigen::MatrixXd& x, int,
                                         double) {
      return Eigen::MatrixXd(crow.replicate(x.rows(), 1));
    };
    const PointWeightFn pw = [&](const Eigen::VectorXd& x, int yt, double t) {
      return exact_weight_vector(gmm, sched, S, x, yt, t);
    };
    double worst = 0.0;
    for (const Eigen::VectorXd& x : probes)
      for (double t : opts.guidance_times)
        for (double lambda : {0.0, 0.5, 1.0, 2.0})
          for (int y = 0; y < c; ++y)
            worst = std::max(
                worst, (affine_score(const_field, pw, lambda, x, y, t, c) -
                        crow.transpose())
                           .lpNorm<Eigen::Infinity>());
    reg.add("affine_constant_field", worst, 1e-12,
            "lambda in {0, 0.5, 1, 2}");
  }

  {  // classifier-free endpoints return the conditional / unconditional score
    ScoreModelArch arch;
    arch.dim = static_cast<int>(gmm.dim);
    arch.classes = c;
    arch.hidden = {16, 16};
    arch.class_embed = 8;
    arch.time_embed = 8;
    ScoreModel model(arch, 7);
    Rng rng(opts.seed + 2);
    nn::Mat& hw = model.params().value("out.weight");
    for (Eigen::Index i = 0; i < hw.rows(); ++i)
      for (Eigen::Index j = 0; j < hw.cols(); ++j) hw(i, j) = 0.5 * rng.normal();
    double worst = 0.0;
    for (const Eigen::VectorXd& x : probes)
      for (double t : opts.guidance_times)
        for (int y = 0; y < c; ++y) {
          const Eigen::MatrixXd row = x.transpose();
          worst = std::max(
              worst, (guided_score_cfg(model, 0.0, x, y, t) -
                      model.eval(row, y, t).row(0).transpose())
                         .lpNorm<Eigen::Infinity>());
          worst = std::max(
              worst,
              (guided_score_cfg(model, -1.0, x, y, t) -
               model.eval(row, model.null_label(), t).row(0).transpose())
                  .lpNorm<Eigen::Infinity>());
        }
    reg.add("cfg_endpoints", worst, 0.0, "alpha = 0 and alpha = -1");
  }

  {  // fixed seeds reproduce both samplers bit for bit
    const BatchScoreFn oracle = make_oracle_clean_score_fn(gmm, sched);
    SamplerConfig scfg;
    scfg.steps = 12;
    scfg.t_max = sched.t_max;
    scfg.t_min = sched.t_min > 0.0 ? sched.t_min : 0.05;
    scfg.seed = opts.seed + 3;
    const int dim = static_cast<int>(gmm.dim);
    const Eigen::MatrixXd a =
        sample_reverse_sde(oracle, sched, scfg, 0, 8, dim);
    const Eigen::MatrixXd b =
        sample_reverse_sde(oracle, sched, scfg, 0, 8, dim);
    const Eigen::MatrixXd oa = sample_ode(oracle, sched, scfg, 0, 8, dim);
    const Eigen::MatrixXd ob = sample_ode(oracle, sched, scfg, 0, 8, dim);
    const double worst = std::max((a - b).lpNorm<Eigen::Infinity>(),
                                  (oa - ob).lpNorm<Eigen::Infinity>());
    reg.add("sampler_determinism", worst, 0.0, "sde and ode, repeated runs");
  }

  {  // the registry itself must match the canonical manifest
    const std::vector<std::string>& manifest = verification_manifest();
    bool complete = reg.results.size() == manifest.size();
    if (complete)
      for (std::size_t i = 0; i < manifest.size(); ++i)
        if (reg.results[i].name != manifest[i]) complete = false;
    reg.results.push_back({"registry_complete",
                           complete ? 0.0 : 1.0, 0.0, complete,
                           std::to_string(reg.results.size()) + " of " +
                               std::to_string(manifest.size()) +
                               " registered checks ran"});
  }

  return reg.results;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const CheckResult& r : results)
    if (!r.pass) return false;
  return true;
}

std::string verification_report(const std::vector<CheckResult>& results) {
  std::ostringstream out;
  for (const CheckResult& r : results) {
    out << (r.pass ? "PASS" : "FAIL") << "  " << r.name;
    for (std::size_t pad = r.name.size(); pad < 32; ++pad) out << ' ';
    out << " worst=" << r.worst << " tol=" << r.tolerance;
    if (!r.note.empty()) out << "  (" << r.note << ")";
    out << "\n";
  }
  return out.str();
}

}  // namespace tdsm
