#include "tdsm/score_model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tdsm/errors.hpp"
#include "tdsm/io.hpp"
#include "tdsm/rng.hpp"

namespace tdsm {

namespace {

std::string layer_weight(int i) { return "layer" + std::to_string(i) + ".weight"; }
std::string layer_bias(int i) { return "layer" + std::to_string(i) + ".bias"; }

void check_batch(const ScoreModelArch& arch, const Eigen::MatrixXd& x,
                 const std::vector<int>& labels, const Eigen::VectorXd& t) {
  if (x.cols() != arch.dim)
    throw InconsistentInputError("score model: input dimension mismatch");
  if (static_cast<Eigen::Index>(labels.size()) != x.rows() ||
      t.size() != x.rows())
    throw InconsistentInputError("score model: batch length mismatch");
  for (int y : labels)
    if (y < 0 || y > arch.classes)
      throw InconsistentInputError("score model: label out of range");
  for (Eigen::Index i = 0; i < t.size(); ++i)
    if (!(t(i) > 0.0) || !std::isfinite(t(i)))
      throw InconsistentInputError("score model: t must be positive finite");
}

}  // namespace

void ScoreModelArch::validate() const {
  if (dim <= 0 || classes <= 0) throw ConfigError("score arch: dim and classes must be positive");
  if (hidden.empty()) throw ConfigError("score arch: need at least one hidden layer");
  for (int h : hidden)
    if (h <= 0) throw ConfigError("score arch: hidden widths must be positive");
  if (class_embed <= 0) throw ConfigError("score arch: class_embed must be positive");
  if (time_embed <= 0 || time_embed % 2 != 0)
    throw ConfigError("score arch: time_embed must be positive and even");
  if (parameterization != "direct" && parameterization != "noise")
    throw ConfigError("score arch: parameterization must be direct or noise");
}

Eigen::MatrixXd time_embedding(const Eigen::VectorXd& t, int width) {
  if (width <= 0 || width % 2 != 0)
    throw ConfigError("time_embedding width must be positive and even");
  const int pairs = width / 2;
  Eigen::MatrixXd e(t.size(), width);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (!(t(i) > 0.0))
      throw InconsistentInputError("time_embedding: t must be positive");
    const double u = std::log(t(i));
    double w = 0.25;  // lowest frequency: injective over ~25 log units
    for (int k = 0; k < pairs; ++k) {
      e(i, 2 * k) = std::sin(w * u);
      e(i, 2 * k + 1) = std::cos(w * u);
      w *= 2.0;
    }
  }
  return e;
}

ScoreModel::ScoreModel(ScoreModelArch arch, unsigned long long seed)
    : arch_(std::move(arch)) {
  arch_.validate();
  Rng rng(seed);
  params_.add("class_embed",
              nn::ParamStore::fan_in_uniform(arch_.classes + 1,
                                             arch_.class_embed, rng));
  int in = arch_.dim + arch_.class_embed + arch_.time_embed;
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i) {
    const int out = arch_.hidden[i];
    params_.add(layer_weight(static_cast<int>(i)),
                nn::ParamStore::fan_in_uniform(in, out, rng));
    params_.add(layer_bias(static_cast<int>(i)), nn::Mat::Zero(1, out));
    in = out;
  }
  // Zero-initialized head: the model starts as the zero score field.
  params_.add("out.weight", nn::Mat::Zero(in, arch_.dim));
  params_.add("out.bias", nn::Mat::Zero(1, arch_.dim));
}

ScoreModel::ScoreModel(ScoreModelArch arch, nn::ParamStore params)
    : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
  auto expect = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    if (!params_.has(name))
      throw ConfigError("score checkpoint missing parameter " + name);
    const nn::Mat& v = params_.value(name);
    if (v.rows() != r || v.cols() != c)
      throw ConfigError("score checkpoint shape mismatch for " + name);
  };
  expect("class_embed", arch_.classes + 1, arch_.class_embed);
  int in = arch_.dim + arch_.class_embed + arch_.time_embed;
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i) {
    expect(layer_weight(static_cast<int>(i)), in, arch_.hidden[i]);
    expect(layer_bias(static_cast<int>(i)), 1, arch_.hidden[i]);
    in = arch_.hidden[i];
  }
  expect("out.weight", in, arch_.dim);
  expect("out.bias", 1, arch_.dim);
}

int ScoreModel::build(nn::Tape& tape, const Eigen::MatrixXd& x,
                      const std::vector<int>& labels, const Eigen::VectorXd& t,
                      bool trainable) const {
  check_batch(arch_, x, labels, t);
  // Safe: the trainable path is only reachable through the non-const
  // forward(), so the underlying store is mutable there.
  auto pnode = [&](const std::string& name) {
    if (trainable)
      return tape.param(const_cast<nn::ParamStore&>(params_), name);
    return tape.input(params_.value(name), false);
  };
  const int xin = tape.input(x);
  const int emb = tape.embed_rows(pnode("class_embed"), labels);
  const int temb = tape.input(time_embedding(t, arch_.time_embed));
  int h = tape.concat_cols({xin, emb, temb});
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i) {
    const int z = tape.add_rowvec(
        tape.matmul(h, pnode(layer_weight(static_cast<int>(i)))),
        pnode(layer_bias(static_cast<int>(i))));
    h = tape.silu(z);
  }
  int out = tape.add_rowvec(tape.matmul(h, pnode("out.weight")),
                            pnode("out.bias"));
  if (arch_.parameterization == "noise")
    out = tape.row_scale(out, (-t.array().inverse()).matrix());
  return out;
}

int ScoreModel::forward(nn::Tape& tape, const Eigen::MatrixXd& x,
                        const std::vector<int>& labels,
                        const Eigen::VectorXd& t) {
  return build(tape, x, labels, t, true);
}

int ScoreModel::forward_frozen(nn::Tape& tape, const Eigen::MatrixXd& x,
                               const std::vector<int>& labels,
                               const Eigen::VectorXd& t) const {
  return build(tape, x, labels, t, false);
}

Eigen::MatrixXd ScoreModel::eval(const Eigen::MatrixXd& x,
                                 const std::vector<int>& labels,
                                 const Eigen::VectorXd& t) const {
  nn::Tape tape;
  return tape.value(forward_frozen(tape, x, labels, t));
}

Eigen::MatrixXd ScoreModel::eval(const Eigen::MatrixXd& x, int label,
                                 double t) const {
  const std::vector<int> labels(static_cast<std::size_t>(x.rows()), label);
  return eval(x, labels, Eigen::VectorXd::Constant(x.rows(), t));
}

Eigen::MatrixXd ScoreModel::denoise(const Eigen::MatrixXd& x,
                                    const std::vector<int>& labels,
                                    const Eigen::VectorXd& t) const {
  const Eigen::MatrixXd s = eval(x, labels, t);
  return x + (t.array().square().matrix()).asDiagonal() * s;
}

std::string ScoreModel::to_checkpoint_json() const {
  nlohmann::json j = nlohmann::json::parse(params_.to_json());
  nlohmann::json a;
  a["dim"] = arch_.dim;
  a["classes"] = arch_.classes;
  a["hidden"] = arch_.hidden;
  a["class_embed"] = arch_.class_embed;
  a["time_embed"] = arch_.time_embed;
  a["parameterization"] = arch_.parameterization;
  j["arch"] = std::move(a);
  return j.dump(2);
}

ScoreModel ScoreModel::from_checkpoint_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("score checkpoint parse error: ") + e.what());
  }
  ScoreModelArch arch;
  try {
    const auto& a = j.at("arch");
    arch.dim = a.at("dim").get<int>();
    arch.classes = a.at("classes").get<int>();
    arch.hidden = a.at("hidden").get<std::vector<int>>();
    arch.class_embed = a.at("class_embed").get<int>();
    arch.time_embed = a.at("time_embed").get<int>();
    arch.parameterization = a.at("parameterization").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("score checkpoint arch error: ") + e.what());
  }
  return ScoreModel(arch, nn::ParamStore::from_json(text));
}

void write_score_checkpoint(const std::string& path, const ScoreModel& model,
                            const std::string& config_hash) {
  nlohmann::json j = nlohmann::json::parse(model.to_checkpoint_json());
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
}

ScoreModel read_score_checkpoint(const std::string& path) {
  return ScoreModel::from_checkpoint_json(read_text_file(path));
}

}  // namespace tdsm
