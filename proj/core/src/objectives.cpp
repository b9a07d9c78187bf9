#include "tdsm/objectives.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <memory>

#include "tdsm/errors.hpp"
#include "tdsm/nn/optimizer.hpp"
#include "tdsm/rng.hpp"

namespace tdsm {

ObjectiveKind objective_kind_from_string(const std::string& s) {
  if (s == "DSM" || s == "dsm") return ObjectiveKind::dsm;
  if (s == "SDSM" || s == "sdsm") return ObjectiveKind::sdsm;
  if (s == "TDSM" || s == "tdsm") return ObjectiveKind::tdsm;
  if (s == "TDSM-RC" || s == "tdsm-rc" || s == "tdsm_rc")
    return ObjectiveKind::tdsm_rc;
  throw ConfigError("unknown objective kind: " + s);
}

std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::dsm:
      return "DSM";
    case ObjectiveKind::sdsm:
      return "SDSM";
    case ObjectiveKind::tdsm:
      return "TDSM";
    case ObjectiveKind::tdsm_rc:
      return "TDSM-RC";
  }
  throw Error("unreachable objective kind");
}

void ObjectiveConfig::validate() const {
  if (!(skip_threshold >= 0.0 && skip_threshold < 1.0))
    throw ConfigError("skip threshold must lie in [0, 1)");
  if (temporal_weight != "sigma2" && temporal_weight != "none")
    throw ConfigError("temporal_weight must be sigma2 or none");
  if (weight_source != "oracle" && weight_source != "classifier")
    throw ConfigError("weight_source must be oracle or classifier");
}

double temporal_weight_value(const std::string& selector,
                             const VESchedule& sched, double t) {
  if (selector == "sigma2") {
    const double s = sched.sigma(t);
    return s * s;
  }
  if (selector == "none") return 1.0;
  throw ConfigError("unknown temporal weight selector: " + selector);
}

Eigen::VectorXd dsm_target(const Eigen::VectorXd& x0, const Eigen::VectorXd& xt,
                           const VESchedule& sched, double t) {
  if (x0.size() != xt.size())
    throw InconsistentInputError("dsm_target: dimension mismatch");
  const double s = sched.sigma(t);
  if (!(s > 0.0)) throw InconsistentInputError("dsm_target: sigma(t) must be positive");
  return -(xt - x0) / (s * s);
}

Eigen::MatrixXd dsm_target(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& xt,
                           const VESchedule& sched, const Eigen::VectorXd& t) {
  if (x0.rows() != xt.rows() || x0.cols() != xt.cols() || t.size() != x0.rows())
    throw InconsistentInputError("dsm_target: shape mismatch");
  Eigen::MatrixXd out(x0.rows(), x0.cols());
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    const double s = sched.sigma(t(i));
    if (!(s > 0.0))
      throw InconsistentInputError("dsm_target: sigma(t) must be positive");
    out.row(i) = -(xt.row(i) - x0.row(i)) / (s * s);
  }
  return out;
}

double WeightVector::simplex_deviation() const {
  if (values.size() == 0) return 0.0;
  const double sum_dev = std::abs(values.sum() - 1.0);
  const double neg = std::max(0.0, -values.minCoeff());
  return std::max(sum_dev, neg);
}

WeightEstimator::WeightEstimator(const TransitionMatrix& S,
                                 Eigen::VectorXi counts)
    : S_(S), counts_(std::move(counts)) {
  S_.validate();
  if (S_.orientation != Orientation::reverse)
    throw InconsistentInputError(
        "weight estimator needs the reverse-oriented transition matrix");
  if (counts_.size() != S_.c)
    throw InconsistentInputError("weight estimator: counts length mismatch");
  for (int i = 0; i < S_.c; ++i)
    if (counts_(i) <= 0)
      throw InconsistentInputError(
          "weight estimator: every noisy class needs at least one example");
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(S_.rows);
  if (std::abs(lu.determinant()) < 1e-12)
    throw SingularMatrixError("reverse transition matrix is not invertible");
  sinv_ = lu.inverse();
}

WeightVector WeightEstimator::estimate(const Eigen::VectorXd& h,
                                       int ytilde) const {
  const int c = S_.c;
  if (h.size() != c)
    throw InconsistentInputError("weight estimator: probability length mismatch");
  if (ytilde < 0 || ytilde >= c)
    throw InconsistentInputError("weight estimator: label out of range");
  if (!h.allFinite() || (h.array() < 0.0).any())
    throw InconsistentInputError(
        "weight estimator: probabilities must be finite and nonnegative");
  if (h(ytilde) < 1e-12)
    throw DegenerateClassifierError(
        "classifier mass on the observed noisy label vanished");
  const Eigen::VectorXd ratios =
      h.array() / counts_.cast<double>().array();
  const Eigen::VectorXd inner = sinv_ * ratios;
  const double scale = static_cast<double>(counts_(ytilde)) / h(ytilde);
  WeightVector w;
  w.target_index = ytilde;
  w.values =
      (S_.rows.row(ytilde).transpose().array() * inner.array() * scale)
          .matrix();
  return w;
}

WeightVector estimate_weights(const Eigen::VectorXd& h,
                              const TransitionMatrix& S,
                              const Eigen::VectorXi& counts, int ytilde) {
  return WeightEstimator(S, counts).estimate(h, ytilde);
}

WeightSource make_oracle_weight_source(const GaussianMixture& gmm,
                                       const VESchedule& sched,
                                       const TransitionMatrix& S) {
  gmm.validate();
  sched.validate();
  S.validate();
  return [gmm, sched, S](const Eigen::MatrixXd& xt,
                         const std::vector<int>& ytilde,
                         const Eigen::VectorXd& t) {
    std::vector<WeightVector> out(ytilde.size());
    for (Eigen::Index i = 0; i < xt.rows(); ++i) {
      WeightVector w;
      w.target_index = ytilde[static_cast<std::size_t>(i)];
      w.values = exact_weight_vector(gmm, sched, S, xt.row(i).transpose(),
                                     w.target_index, t(i));
      out[static_cast<std::size_t>(i)] = std::move(w);
    }
    return out;
  };
}

WeightSource make_classifier_weight_source(const NoisyClassifier& clf,
                                           const TransitionMatrix& S,
                                           const Eigen::VectorXi& counts) {
  auto estimator = std::make_shared<WeightEstimator>(S, counts);
  auto model = std::make_shared<NoisyClassifier>(clf);
  return [estimator, model](const Eigen::MatrixXd& xt,
                            const std::vector<int>& ytilde,
                            const Eigen::VectorXd& t) {
    const Eigen::MatrixXd probs = model->classify(xt, t);
    std::vector<WeightVector> out(ytilde.size());
    for (Eigen::Index i = 0; i < xt.rows(); ++i)
      out[static_cast<std::size_t>(i)] = estimator->estimate(
          probs.row(i).transpose(), ytilde[static_cast<std::size_t>(i)]);
    return out;
  };
}

BatchDraw draw_training_batch(const NoisyDataset& data, const VESchedule& sched,
                              int batch, Rng& rng, bool use_clean_labels) {
  data.validate();
  sched.validate();
  if (data.size() == 0) throw InconsistentInputError("dataset is empty");
  if (batch <= 0) throw ConfigError("batch size must be positive");
  if (use_clean_labels && data.clean_labels.empty())
    throw InconsistentInputError("dataset has no clean labels to train on");
  const std::vector<int>& col =
      use_clean_labels ? data.clean_labels : data.noisy_labels;
  const Eigen::Index d = data.instances.cols();
  BatchDraw b;
  b.x0.resize(batch, d);
  b.z.resize(batch, d);
  b.xt.resize(batch, d);
  b.labels.resize(static_cast<std::size_t>(batch));
  b.t.resize(batch);
  for (int k = 0; k < batch; ++k) {
    const auto i = static_cast<Eigen::Index>(
        rng.uniform_index(static_cast<std::size_t>(data.size())));
    const double t = rng.log_uniform(sched.t_min, sched.t_max);
    b.t(k) = t;
    b.labels[static_cast<std::size_t>(k)] = col[static_cast<std::size_t>(i)];
    const double s = sched.sigma(t);
    for (Eigen::Index cix = 0; cix < d; ++cix) {
      const double z = rng.normal();
      b.z(k, cix) = z;
      b.x0(k, cix) = data.instances(i, cix);
      b.xt(k, cix) = data.instances(i, cix) + s * z;
    }
  }
  return b;
}

namespace {

// Shared grouped-by-class graph builder. `weighted` switches between the
// literal-unit-weight form (the DSM / plain-reconstruction reference) and
// the transition-aware weighted form; `reconstruction` switches the residual
// from score matching to denoiser reconstruction. Keeping one code path for
// both forms is what makes the identity-matrix reduction exact down to the
// last bit: identical active sets, identical op order, and weight values
// that are exactly 1 and 0.
BuiltLoss build_graph(nn::Tape& tape, ScoreModel& model, const BatchDraw& batch,
                      const VESchedule& sched, const ObjectiveConfig& cfg,
                      const TransitionMatrix* S, const WeightSource* weights,
                      bool weighted, bool reconstruction) {
  cfg.validate();
  sched.validate();
  const Eigen::Index B = batch.xt.rows();
  const int c = model.arch().classes;
  const int null_label = model.null_label();
  if (B == 0) throw InconsistentInputError("objective: empty batch");
  if (batch.x0.rows() != B || batch.x0.cols() != batch.xt.cols() ||
      batch.t.size() != B ||
      static_cast<Eigen::Index>(batch.labels.size()) != B)
    throw InconsistentInputError("objective: batch shape mismatch");
  for (int y : batch.labels)
    if (y < 0 || y > null_label)
      throw InconsistentInputError("objective: label out of range");

  BuiltLoss built;

  // Per-example weight vectors over clean classes, target terms only for
  // null-labeled (unconditional) rows.
  std::vector<Eigen::VectorXd> w(static_cast<std::size_t>(B));
  if (weighted) {
    if (S == nullptr)
      throw ConfigError("weighted objectives need the reverse matrix S");
    if (cfg.kind == ObjectiveKind::sdsm) {
      S->validate();
      if (S->c != c)
        throw InconsistentInputError("objective: S class count mismatch");
      for (Eigen::Index i = 0; i < B; ++i) {
        const int lab = batch.labels[static_cast<std::size_t>(i)];
        if (lab != null_label)
          w[static_cast<std::size_t>(i)] = S->rows.row(lab).transpose();
      }
    } else {
      if (weights == nullptr)
        throw ConfigError("this objective needs a weight source");
      std::vector<Eigen::Index> live;
      for (Eigen::Index i = 0; i < B; ++i)
        if (batch.labels[static_cast<std::size_t>(i)] != null_label)
          live.push_back(i);
      if (!live.empty()) {
        Eigen::MatrixXd xt_live(static_cast<Eigen::Index>(live.size()),
                                batch.xt.cols());
        std::vector<int> lab_live(live.size());
        Eigen::VectorXd t_live(static_cast<Eigen::Index>(live.size()));
        for (std::size_t k = 0; k < live.size(); ++k) {
          xt_live.row(static_cast<Eigen::Index>(k)) = batch.xt.row(live[k]);
          lab_live[k] = batch.labels[static_cast<std::size_t>(live[k])];
          t_live(static_cast<Eigen::Index>(k)) = batch.t(live[k]);
        }
        const std::vector<WeightVector> wv =
            (*weights)(xt_live, lab_live, t_live);
        if (wv.size() != live.size())
          throw InconsistentInputError("weight source returned wrong count");
        for (std::size_t k = 0; k < live.size(); ++k) {
          if (wv[k].values.size() != c)
            throw InconsistentInputError("weight vector has wrong length");
          built.max_simplex_deviation = std::max(
              built.max_simplex_deviation, wv[k].simplex_deviation());
          w[static_cast<std::size_t>(live[k])] = wv[k].values;
        }
      }
    }
  }

  // Residual target: the kernel score for score matching, the clean point
  // for reconstruction.
  const int target_node =
      reconstruction
          ? tape.input(batch.x0)
          : tape.input(dsm_target(batch.x0, batch.xt, sched, batch.t));

  int acc = -1;
  for (int y = 0; y <= c; ++y) {
    // Active rows for class y, with their scatter weights and a flag for
    // target (differentiable) versus non-target terms.
    std::vector<int> rows;
    std::vector<double> roww;
    std::vector<bool> is_target;
    for (Eigen::Index i = 0; i < B; ++i) {
      const int lab = batch.labels[static_cast<std::size_t>(i)];
      if (lab == y) {
        rows.push_back(static_cast<int>(i));
        roww.push_back(weighted && lab != null_label
                           ? w[static_cast<std::size_t>(i)](y)
                           : 1.0);
        is_target.push_back(true);
      } else if (weighted && y < c && lab != null_label) {
        const double wy = w[static_cast<std::size_t>(i)](y);
        if (wy > cfg.skip_threshold) {
          rows.push_back(static_cast<int>(i));
          roww.push_back(wy);
          is_target.push_back(false);
        } else {
          built.skipped.emplace_back(static_cast<int>(i), y);
        }
      }
    }
    if (rows.empty()) continue;

    const auto m = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd xsub(m, batch.xt.cols());
    Eigen::VectorXd tsub(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      xsub.row(k) = batch.xt.row(rows[static_cast<std::size_t>(k)]);
      tsub(k) = batch.t(rows[static_cast<std::size_t>(k)]);
    }
    const std::vector<int> ylab(static_cast<std::size_t>(m), y);
    const int s = model.forward(tape, xsub, ylab, tsub);

    // Split positions into the always-differentiable target part and the
    // non-target part, which is recorded as a constant when detaching.
    std::vector<int> tpos, npos;
    for (Eigen::Index k = 0; k < m; ++k)
      (is_target[static_cast<std::size_t>(k)] ? tpos : npos)
          .push_back(static_cast<int>(k));
    int s_nontarget = s;
    if (!npos.empty() && cfg.detach_nontarget) s_nontarget = tape.detach(s);

    for (int part = 0; part < 2; ++part) {
      const std::vector<int>& pos = part == 0 ? tpos : npos;
      if (pos.empty()) continue;
      int node = tape.gather_rows(part == 0 ? s : s_nontarget, pos);
      std::vector<int> brows(pos.size());
      Eigen::VectorXd pw(static_cast<Eigen::Index>(pos.size()));
      for (std::size_t k = 0; k < pos.size(); ++k) {
        brows[k] = rows[static_cast<std::size_t>(pos[k])];
        pw(static_cast<Eigen::Index>(k)) =
            roww[static_cast<std::size_t>(pos[k])];
      }
      if (reconstruction) {
        Eigen::MatrixXd xt_part(static_cast<Eigen::Index>(pos.size()),
                                batch.xt.cols());
        Eigen::VectorXd tsq(static_cast<Eigen::Index>(pos.size()));
        for (std::size_t k = 0; k < pos.size(); ++k) {
          xt_part.row(static_cast<Eigen::Index>(k)) = batch.xt.row(brows[k]);
          const double sg = sched.sigma(batch.t(brows[k]));
          tsq(static_cast<Eigen::Index>(k)) = sg * sg;
        }
        node = tape.add(tape.input(xt_part), tape.row_scale(node, tsq));
      }
      const int sc = tape.scatter_rows(node, brows, pw, B);
      acc = acc < 0 ? sc : tape.add(acc, sc);
    }
  }

  const int resid = tape.sub(acc, target_node);
  const int per_ex = tape.row_sqnorm(resid);
  Eigen::VectorXd lam(B);
  for (Eigen::Index i = 0; i < B; ++i)
    lam(i) = temporal_weight_value(cfg.temporal_weight, sched, batch.t(i)) /
             static_cast<double>(B);
  const int loss = tape.weighted_sum(per_ex, lam);

  built.loss_node = loss;
  built.residual_node = resid;
  built.loss = tape.value(loss)(0, 0);
  built.per_example = tape.value(per_ex).col(0);
  return built;
}

}  // namespace

BuiltLoss build_objective_loss(nn::Tape& tape, ScoreModel& model,
                               const BatchDraw& batch, const VESchedule& sched,
                               const ObjectiveConfig& cfg,
                               const TransitionMatrix* S,
                               const WeightSource* weights) {
  switch (cfg.kind) {
    case ObjectiveKind::dsm:
      return build_graph(tape, model, batch, sched, cfg, nullptr, nullptr,
                         false, false);
    case ObjectiveKind::sdsm:
      return build_graph(tape, model, batch, sched, cfg, S, nullptr, true,
                         false);
    case ObjectiveKind::tdsm:
      return build_graph(tape, model, batch, sched, cfg, S, weights, true,
                         false);
    case ObjectiveKind::tdsm_rc:
      return build_graph(tape, model, batch, sched, cfg, S, weights, true,
                         true);
  }
  throw Error("unreachable objective kind");
}

BuiltLoss build_plain_reconstruction_loss(nn::Tape& tape, ScoreModel& model,
                                          const BatchDraw& batch,
                                          const VESchedule& sched,
                                          const ObjectiveConfig& cfg) {
  return build_graph(tape, model, batch, sched, cfg, nullptr, nullptr, false,
                     true);
}

std::vector<TraceRow> train_score_model(ScoreModel& model,
                                        const NoisyDataset& data,
                                        const VESchedule& sched,
                                        const ObjectiveConfig& objective,
                                        const TransitionMatrix* S,
                                        const WeightSource* weights,
                                        const ScoreTrainConfig& cfg) {
  objective.validate();
  if (cfg.steps <= 0 || cfg.batch <= 0)
    throw ConfigError("steps and batch must be positive");
  if (!(cfg.uncond_prob >= 0.0 && cfg.uncond_prob < 1.0))
    throw ConfigError("uncond_prob must lie in [0, 1)");
  Rng rng(cfg.seed);
  nn::Adam opt(cfg.lr);
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(cfg.steps));
  for (long step = 0; step < cfg.steps; ++step) {
    BatchDraw b =
        draw_training_batch(data, sched, cfg.batch, rng, cfg.use_clean_labels);
    if (cfg.uncond_prob > 0.0)
      for (int& lab : b.labels)
        if (rng.uniform() < cfg.uncond_prob) lab = model.null_label();
    nn::Tape tape;
    model.params().zero_grad();
    const BuiltLoss built =
        build_objective_loss(tape, model, b, sched, objective, S, weights);
    tape.backward(built.loss_node);
    opt.step(model.params());
    trace.push_back(
        TraceRow{step, built.loss, to_string(objective.kind), cfg.seed});
  }
  return trace;
}

}  // namespace tdsm
