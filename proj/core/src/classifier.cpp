#include "tdsm/classifier.hpp"

#include <Eigen/LU>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "tdsm/errors.hpp"
#include "tdsm/nn/optimizer.hpp"
#include "tdsm/rng.hpp"
#include "tdsm/score_model.hpp"

namespace tdsm {

namespace {

std::string layer_weight(int i) { return "layer" + std::to_string(i) + ".weight"; }
std::string layer_bias(int i) { return "layer" + std::to_string(i) + ".bias"; }

struct Batch {
  Eigen::MatrixXd x;
  std::vector<int> noisy;
  Eigen::VectorXd t;
};

// One perturbed minibatch drawn with replacement; draw order is fixed
// (index, t, noise per coordinate) so runs are reproducible bit for bit.
Batch draw_batch(const NoisyDataset& data, const VESchedule& sched, int batch,
                 Rng& rng) {
  Batch b;
  b.x.resize(batch, data.instances.cols());
  b.noisy.resize(static_cast<std::size_t>(batch));
  b.t.resize(batch);
  for (int k = 0; k < batch; ++k) {
    const auto i = static_cast<Eigen::Index>(
        rng.uniform_index(static_cast<std::size_t>(data.size())));
    const double t = rng.log_uniform(sched.t_min, sched.t_max);
    b.t(k) = t;
    b.noisy[static_cast<std::size_t>(k)] =
        data.noisy_labels[static_cast<std::size_t>(i)];
    for (Eigen::Index c = 0; c < data.instances.cols(); ++c)
      b.x(k, c) = data.instances(i, c) + sched.sigma(t) * rng.normal();
  }
  return b;
}

void check_trainable(const NoisyDataset& data, int classes, long steps,
                     int batch) {
  data.validate();
  if (data.size() == 0) throw InconsistentInputError("dataset is empty");
  if (data.classes != classes)
    throw InconsistentInputError("dataset class count does not match model");
  if (steps <= 0 || batch <= 0)
    throw ConfigError("steps and batch must be positive");
}

}  // namespace

void ClassifierArch::validate() const {
  if (dim <= 0 || classes <= 0)
    throw ConfigError("classifier arch: dim and classes must be positive");
  if (hidden.empty())
    throw ConfigError("classifier arch: need at least one hidden layer");
  for (int h : hidden)
    if (h <= 0)
      throw ConfigError("classifier arch: hidden widths must be positive");
  if (time_embed <= 0 || time_embed % 2 != 0)
    throw ConfigError("classifier arch: time_embed must be positive and even");
}

NoisyClassifier::NoisyClassifier(ClassifierArch arch, unsigned long long seed)
    : arch_(std::move(arch)) {
  arch_.validate();
  Rng rng(seed);
  int in = arch_.dim + arch_.time_embed;
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i) {
    const int out = arch_.hidden[i];
    params_.add(layer_weight(static_cast<int>(i)),
                nn::ParamStore::fan_in_uniform(in, out, rng));
    params_.add(layer_bias(static_cast<int>(i)), nn::Mat::Zero(1, out));
    in = out;
  }
  // Zero head: the untrained classifier is exactly uniform.
  params_.add("out.weight", nn::Mat::Zero(in, arch_.classes));
  params_.add("out.bias", nn::Mat::Zero(1, arch_.classes));
}

NoisyClassifier::NoisyClassifier(ClassifierArch arch, nn::ParamStore params)
    : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
  auto expect = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    if (!params_.has(name))
      throw ConfigError("classifier checkpoint missing parameter " + name);
    const nn::Mat& v = params_.value(name);
    if (v.rows() != r || v.cols() != c)
      throw ConfigError("classifier checkpoint shape mismatch for " + name);
  };
  int in = arch_.dim + arch_.time_embed;
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i) {
    expect(layer_weight(static_cast<int>(i)), in, arch_.hidden[i]);
    expect(layer_bias(static_cast<int>(i)), 1, arch_.hidden[i]);
    in = arch_.hidden[i];
  }
  expect("out.weight", in, arch_.classes);
  expect("out.bias", 1, arch_.classes);
}

void NoisyClassifier::set_simplex_projection(const TransitionMatrix& forward) {
  forward.validate();
  if (forward.orientation != Orientation::forward)
    throw InconsistentInputError(
        "simplex projection must be a forward transition matrix");
  if (forward.c != arch_.classes)
    throw InconsistentInputError("simplex projection class count mismatch");
  projection_ = forward;
  has_projection_ = true;
}

void NoisyClassifier::clear_simplex_projection() { has_projection_ = false; }

const TransitionMatrix& NoisyClassifier::simplex_projection() const {
  if (!has_projection_)
    throw InconsistentInputError("no simplex projection is set");
  return projection_;
}

int NoisyClassifier::build_probs(nn::Tape& tape, int xnode,
                                 const Eigen::VectorXd& t,
                                 bool trainable) const {
  const Eigen::MatrixXd& x = tape.value(xnode);
  if (x.cols() != arch_.dim)
    throw InconsistentInputError("classifier: input dimension mismatch");
  if (t.size() != x.rows())
    throw InconsistentInputError("classifier: batch length mismatch");
  auto pnode = [&](const std::string& name) {
    if (trainable)
      return tape.param(const_cast<nn::ParamStore&>(params_), name);
    return tape.input(params_.value(name), false);
  };
  const int temb = tape.input(time_embedding(t, arch_.time_embed));
  int h = tape.concat_cols({xnode, temb});
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i) {
    const int z = tape.add_rowvec(
        tape.matmul(h, pnode(layer_weight(static_cast<int>(i)))),
        pnode(layer_bias(static_cast<int>(i))));
    h = tape.silu(z);
  }
  const int logits = tape.add_rowvec(tape.matmul(h, pnode("out.weight")),
                                     pnode("out.bias"));
  int p = tape.row_softmax(logits);
  // Row form of mapping a clean-class column vector through T transposed.
  if (has_projection_) p = tape.matmul_const(p, projection_.rows);
  return p;
}

int NoisyClassifier::probs(nn::Tape& tape, const Eigen::MatrixXd& x,
                           const Eigen::VectorXd& t) {
  return build_probs(tape, tape.input(x), t, true);
}

int NoisyClassifier::probs_frozen(nn::Tape& tape, const Eigen::MatrixXd& x,
                                  const Eigen::VectorXd& t) const {
  return build_probs(tape, tape.input(x), t, false);
}

Eigen::MatrixXd NoisyClassifier::classify(const Eigen::MatrixXd& x,
                                          const Eigen::VectorXd& t) const {
  nn::Tape tape;
  return tape.value(probs_frozen(tape, x, t));
}

Eigen::VectorXd NoisyClassifier::classify_one(const Eigen::VectorXd& x,
                                              double t) const {
  const Eigen::MatrixXd row = x.transpose();
  return classify(row, Eigen::VectorXd::Constant(1, t)).row(0).transpose();
}

Eigen::MatrixXd NoisyClassifier::log_prob_input_grad(
    const Eigen::MatrixXd& x, const std::vector<int>& labels,
    const Eigen::VectorXd& t) const {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows())
    throw InconsistentInputError("classifier: label count mismatch");
  nn::Tape tape;
  const int xnode = tape.input(x, true);
  const int p = build_probs(tape, xnode, t, false);
  const int nll = tape.neg_log_pick(p, labels);
  // Rows are independent, so the gradient of the summed loss splits into
  // one guidance direction per row.
  const int total = tape.weighted_sum(nll, Eigen::VectorXd::Ones(x.rows()));
  tape.backward(total);
  return -tape.grad_of(xnode);
}

std::string NoisyClassifier::to_checkpoint_json() const {
  nlohmann::json j = nlohmann::json::parse(params_.to_json());
  nlohmann::json a;
  a["dim"] = arch_.dim;
  a["classes"] = arch_.classes;
  a["hidden"] = arch_.hidden;
  a["time_embed"] = arch_.time_embed;
  j["arch"] = std::move(a);
  return j.dump(2);
}

NoisyClassifier NoisyClassifier::from_checkpoint_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("classifier checkpoint parse error: ") +
                      e.what());
  }
  ClassifierArch arch;
  try {
    const auto& a = j.at("arch");
    arch.dim = a.at("dim").get<int>();
    arch.classes = a.at("classes").get<int>();
    arch.hidden = a.at("hidden").get<std::vector<int>>();
    arch.time_embed = a.at("time_embed").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("classifier checkpoint arch error: ") +
                      e.what());
  }
  return NoisyClassifier(arch, nn::ParamStore::from_json(text));
}

void write_classifier_checkpoint(const std::string& path,
                                 const NoisyClassifier& clf,
                                 const std::string& config_hash) {
  nlohmann::json j = nlohmann::json::parse(clf.to_checkpoint_json());
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
}

NoisyClassifier read_classifier_checkpoint(const std::string& path) {
  return NoisyClassifier::from_checkpoint_json(read_text_file(path));
}

std::vector<TraceRow> train_classifier(NoisyClassifier& clf,
                                       const NoisyDataset& data,
                                       const VESchedule& sched,
                                       const ClassifierTrainConfig& cfg) {
  check_trainable(data, clf.arch().classes, cfg.steps, cfg.batch);
  sched.validate();
  Rng rng(cfg.seed);
  nn::Adam opt(cfg.lr);
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(cfg.steps));
  const Eigen::VectorXd mean_w =
      Eigen::VectorXd::Constant(cfg.batch, 1.0 / cfg.batch);
  for (long step = 0; step < cfg.steps; ++step) {
    const Batch b = draw_batch(data, sched, cfg.batch, rng);
    nn::Tape tape;
    clf.params().zero_grad();
    const int p = clf.probs(tape, b.x, b.t);
    const int loss = tape.weighted_sum(tape.neg_log_pick(p, b.noisy), mean_w);
    tape.backward(loss);
    opt.step(clf.params());
    trace.push_back(
        TraceRow{step, tape.value(loss)(0, 0), "classifier_ce", cfg.seed});
  }
  return trace;
}

TrainableTransition::TrainableTransition(int c) : classes(c) {
  if (c < 2) throw ConfigError("trainable transition needs at least 2 classes");
  params.add("logits",
             2.0 * nn::Mat::Identity(c, c));  // diagonally dominant start
}

TransitionMatrix TrainableTransition::realized() const {
  const nn::Mat& logits = params.value("logits");
  TransitionMatrix m;
  m.orientation = Orientation::forward;
  m.c = classes;
  m.rows.resize(classes, classes);
  for (int i = 0; i < classes; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e =
        (logits.row(i).array() - mx).exp().matrix();
    m.rows.row(i) = e / e.sum();
  }
  m.validate(1e-9);
  return m;
}

VolMinResult estimate_transition_volmin(NoisyClassifier& clf,
                                        TrainableTransition& trans,
                                        const NoisyDataset& data,
                                        const VESchedule& sched,
                                        const VolMinConfig& cfg) {
  check_trainable(data, clf.arch().classes, cfg.steps, cfg.batch);
  sched.validate();
  if (trans.classes != clf.arch().classes)
    throw InconsistentInputError("transition class count mismatch");
  if (clf.has_simplex_projection())
    throw InconsistentInputError(
        "volmin estimation trains its own projection; clear the classifier's "
        "simplex projection first");
  if (!(cfg.freeze_fraction >= 0.0 && cfg.freeze_fraction <= 1.0))
    throw ConfigError("freeze_fraction must lie in [0, 1]");
  Rng rng(cfg.seed);
  nn::Adam clf_opt(cfg.lr);
  nn::Adam trans_opt(cfg.lr);
  const long freeze_at =
      static_cast<long>(cfg.freeze_fraction * static_cast<double>(cfg.steps));
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(cfg.steps));
  const Eigen::VectorXd mean_w =
      Eigen::VectorXd::Constant(cfg.batch, 1.0 / cfg.batch);
  TransitionMatrix frozen;  // realized matrix, fixed after freeze_at
  for (long step = 0; step < cfg.steps; ++step) {
    const bool matrix_live = step < freeze_at;
    const Batch b = draw_batch(data, sched, cfg.batch, rng);
    nn::Tape tape;
    clf.params().zero_grad();
    const int soft = clf.probs(tape, b.x, b.t);  // no projection: plain softmax
    int loss;
    if (matrix_live) {
      trans.params.zero_grad();
      const int tlogits = tape.param(trans.params, "logits");
      const int tmat = tape.row_softmax(tlogits);
      const double det = tape.value(tmat).determinant();
      if (!std::isfinite(det) || std::abs(det) < cfg.det_floor)
        throw IllConditionedError(
            "transition determinant collapsed during volume minimization");
      const int projected = tape.matmul(soft, tmat);
      const int ce = tape.weighted_sum(tape.neg_log_pick(projected, b.noisy),
                                       mean_w);
      loss = tape.add(ce, tape.scale(tape.logabsdet(tmat), cfg.vol_weight));
    } else {
      if (step == freeze_at) frozen = trans.realized();
      const int projected = tape.matmul_const(soft, frozen.rows);
      loss = tape.weighted_sum(tape.neg_log_pick(projected, b.noisy), mean_w);
    }
    tape.backward(loss);
    clf_opt.step(clf.params());
    if (matrix_live) trans_opt.step(trans.params);
    trace.push_back(
        TraceRow{step, tape.value(loss)(0, 0), "volmin", cfg.seed});
  }
  VolMinResult res;
  res.estimated_forward = trans.realized();
  res.trace = std::move(trace);
  return res;
}

}  // namespace tdsm
