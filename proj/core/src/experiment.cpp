#include "tdsm/experiment.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <initializer_list>
#include "json.hpp"
#include <sstream>

#include "tdsm/errors.hpp"
#include "tdsm/io.hpp"
#include "tdsm/metrics.hpp"
#include "tdsm/verify.hpp"

namespace tdsm {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void require_keys(const json& obj, const std::string& where,
                  std::initializer_list<const char*> allowed) {
  if (!obj.is_object())
    throw ConfigError("config section " + where + " must be an object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) known = true;
    if (!known)
      throw ConfigError("unknown config key " + where + "." + item.key());
  }
}

template <typename T>
T get_or(const json& obj, const std::string& where, const std::string& key,
         T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field " + where + "." + key +
                      " has the wrong type");
  }
}

json section(const json& root, const std::string& name) {
  if (!root.contains(name)) return json::object();
  if (!root.at(name).is_object())
    throw ConfigError("config section " + name + " must be an object");
  return root.at(name);
}

GaussianMixture parse_mixture(const json& j) {
  require_keys(j, "mixture", {"kind", "means", "variances", "prior"});
  const std::string kind = get_or<std::string>(j, "mixture", "kind",
                                               "toy-two-class");
  if (kind == "toy-two-class") {
    if (j.contains("means") || j.contains("variances") || j.contains("prior"))
      throw ConfigError("toy-two-class mixture takes no further fields");
    return GaussianMixture::toy_two_class();
  }
  if (kind != "custom")
    throw ConfigError("unknown mixture kind: " + kind);
  if (!j.contains("means"))
    throw ConfigError("custom mixture needs means");
  const auto means =
      get_or<std::vector<std::vector<double>>>(j, "mixture", "means", {});
  if (means.empty() || means.front().empty())
    throw ConfigError("mixture means must be nonempty");
  GaussianMixture gmm;
  gmm.classes = static_cast<int>(means.size());
  gmm.dim = static_cast<int>(means.front().size());
  gmm.means.resize(gmm.classes, gmm.dim);
  for (int y = 0; y < gmm.classes; ++y) {
    if (static_cast<int>(means[y].size()) != gmm.dim)
      throw ConfigError("mixture means must share one dimension");
    for (int i = 0; i < gmm.dim; ++i) gmm.means(y, i) = means[y][i];
  }
  const auto vars = get_or<std::vector<double>>(
      j, "mixture", "variances", std::vector<double>(gmm.classes, 1.0));
  const auto prior = get_or<std::vector<double>>(
      j, "mixture", "prior",
      std::vector<double>(gmm.classes, 1.0 / gmm.classes));
  if (static_cast<int>(vars.size()) != gmm.classes ||
      static_cast<int>(prior.size()) != gmm.classes)
    throw ConfigError("mixture variances/prior must have one entry per class");
  gmm.variances = Eigen::Map<const Eigen::VectorXd>(vars.data(), gmm.classes);
  gmm.clean_prior =
      Eigen::Map<const Eigen::VectorXd>(prior.data(), gmm.classes);
  gmm.validate();
  return gmm;
}

TransitionMatrix matrix_from_rows(const std::vector<std::vector<double>>& rows,
                                  Orientation orientation) {
  TransitionMatrix m;
  m.orientation = orientation;
  m.c = static_cast<int>(rows.size());
  m.rows.resize(m.c, m.c);
  for (int i = 0; i < m.c; ++i) {
    if (static_cast<int>(rows[i].size()) != m.c)
      throw ConfigError("noise matrix must be square");
    for (int k = 0; k < m.c; ++k) m.rows(i, k) = rows[i][k];
  }
  m.validate();
  return m;
}

void parse_noise(const json& root, ExperimentConfig& cfg) {
  const int c = cfg.mixture.classes;
  json j = section(root, "noise");
  require_keys(j, "noise", {"kind", "rate", "flips", "orientation", "rows"});
  std::string kind = get_or<std::string>(j, "noise", "kind", "");
  if (kind.empty()) {
    if (c != 2)
      throw ConfigError("a noise section is required for non-2-class mixtures");
    kind = "matrix";
    j["orientation"] = "reverse";
    j["rows"] = std::vector<std::vector<double>>{{0.8, 0.2}, {0.2, 0.8}};
  }
  TransitionMatrix given;
  try {
    if (kind == "symmetric") {
      given = make_symmetric(c, get_or<double>(j, "noise", "rate", 0.2));
    } else if (kind == "asymmetric") {
      const auto raw =
          get_or<std::vector<std::vector<int>>>(j, "noise", "flips", {});
      std::vector<std::pair<int, int>> flips;
      for (const auto& f : raw) {
        if (f.size() != 2) throw ConfigError("each flip needs [from, to]");
        flips.emplace_back(f[0] - 1, f[1] - 1);  // labels are 1-based outside
      }
      given =
          make_asymmetric(c, flips, get_or<double>(j, "noise", "rate", 0.2));
    } else if (kind == "matrix") {
      const std::string orient =
          get_or<std::string>(j, "noise", "orientation", "reverse");
      if (orient != "forward" && orient != "reverse")
        throw ConfigError("noise orientation must be forward or reverse");
      const auto rows =
          get_or<std::vector<std::vector<double>>>(j, "noise", "rows", {});
      if (static_cast<int>(rows.size()) != c)
        throw ConfigError("noise matrix must have one row per class");
      given = matrix_from_rows(
          rows, orient == "forward" ? Orientation::forward
                                    : Orientation::reverse);
    } else {
      throw ConfigError("unknown noise kind: " + kind);
    }
    if (given.c != c)
      throw ConfigError("noise matrix size does not match class count");
    if (given.orientation == Orientation::forward) {
      const OrientedPair pair = reverse_from_forward(
          given, cfg.mixture.clean_prior, PriorSide::clean);
      cfg.forward = pair.forward;
      cfg.reverse = pair.reverse;
      cfg.noisy_prior = pair.noisy_prior;
    } else {
      const OrientedPair pair = forward_from_reverse(
          given, cfg.mixture.clean_prior, PriorSide::clean);
      cfg.forward = pair.forward;
      cfg.reverse = pair.reverse;
      cfg.noisy_prior = pair.noisy_prior;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {  // malformed matrices are config problems here
    throw ConfigError(std::string("noise: ") + e.what());
  }
}

GridSpec parse_grid(const json& root, const std::string& name,
                    const GridSpec& defaults) {
  json j = section(root, name);
  require_keys(j, name, {"lo", "hi", "n", "times"});
  GridSpec g;
  g.lo = get_or<double>(j, name, "lo", defaults.lo);
  g.hi = get_or<double>(j, name, "hi", defaults.hi);
  g.n = get_or<int>(j, name, "n", defaults.n);
  g.times = get_or<std::vector<double>>(j, name, "times", defaults.times);
  if (g.n < 2) throw ConfigError(name + ".n must be at least 2");
  if (!(g.lo < g.hi)) throw ConfigError(name + " range must satisfy lo < hi");
  if (g.times.empty()) throw ConfigError(name + ".times must be nonempty");
  for (double t : g.times)
    if (!(t > 0.0)) throw ConfigError(name + ".times must be positive");
  return g;
}

std::vector<std::vector<double>> rows_of(const Eigen::MatrixXd& m) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.cols(); ++k)
      out[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = m(i, k);
  }
  return out;
}

std::vector<double> vec_of(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

std::string joinp(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void ensure_out_dir(const ExperimentConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec)
    throw ConfigError("cannot create output directory " + cfg.out_dir + ": " +
                      ec.message());
}

BatchScoreFn oracle_noisy_score_fn(const GaussianMixture& gmm,
                                   const VESchedule& sched,
                                   const TransitionMatrix& S) {
  return [gmm, sched, S](const Eigen::MatrixXd& x, int label, double t) {
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out.row(i) =
          noisy_score(gmm, sched, S, x.row(i).transpose(), label, t)
              .transpose();
    return out;
  };
}

BatchScoreFn fixed_point_score_fn(const GaussianMixture& gmm,
                                  const VESchedule& sched,
                                  const TransitionMatrix& S) {
  return [gmm, sched, S](const Eigen::MatrixXd& x, int label, double t) {
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out.row(i) =
          sdsm_fixed_point(gmm, sched, S, x.row(i).transpose(), label, t)
              .transpose();
    return out;
  };
}

void write_field_csv(const std::string& path, const ExperimentConfig& cfg,
                     const Eigen::MatrixXd& grid, const BatchScoreFn& fn,
                     const std::vector<double>& times) {
  std::ostringstream out;
  out << "# config_hash=" << cfg.config_hash << "\n";
  const int d = static_cast<int>(grid.cols());
  for (int j = 0; j < d; ++j) out << "x" << (j + 1) << ",";
  out << "label,t";
  for (int j = 0; j < d; ++j) out << ",s" << (j + 1);
  out << "\n";
  for (int y = 0; y < cfg.mixture.classes; ++y)
    for (double t : times) {
      const Eigen::MatrixXd f = fn(grid, y, t);
      for (Eigen::Index i = 0; i < grid.rows(); ++i) {
        for (int j = 0; j < d; ++j) out << format_double(grid(i, j)) << ",";
        out << (y + 1) << "," << format_double(t);
        for (int j = 0; j < d; ++j) out << "," << format_double(f(i, j));
        out << "\n";
      }
    }
  write_text_file(path, out.str());
}

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

// Reads the reverse matrix the training stage actually used: the estimated
// one when transition estimation is enabled and has run, else the configured
// truth.
TransitionMatrix sampling_reverse_matrix(const ExperimentConfig& cfg) {
  const std::string est = joinp(cfg.out_dir, "transition_estimate_reverse.json");
  if (cfg.estimate_transition && fs::exists(est))
    return read_transition_json(est);
  return cfg.reverse;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text,
                                         const ConfigOverrides& ov) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config JSON parse failure: ") + e.what());
  }
  require_keys(root, "config",
               {"mixture", "schedule", "noise", "data", "objective",
                "score_model", "score_training", "classifier",
                "classifier_training", "transition_estimation", "sampler",
                "grid", "contour", "fields", "out_dir"});

  ExperimentConfig cfg;
  cfg.mixture = parse_mixture(section(root, "mixture"));

  {
    json j = section(root, "schedule");
    require_keys(j, "schedule", {"t_min", "t_max"});
    cfg.schedule.t_min = get_or<double>(j, "schedule", "t_min", 0.05);
    cfg.schedule.t_max = get_or<double>(j, "schedule", "t_max", 10.0);
    cfg.schedule.validate();
  }

  parse_noise(root, cfg);

  {
    json j = section(root, "data");
    require_keys(j, "data", {"n", "seed"});
    cfg.n_data = get_or<long>(j, "data", "n", 10000);
    cfg.data_seed = get_or<unsigned long long>(j, "data", "seed", 11);
    if (cfg.n_data < 1) throw ConfigError("data.n must be positive");
  }

  {
    json j = section(root, "objective");
    require_keys(j, "objective",
                 {"kind", "skip_threshold", "temporal_weight",
                  "detach_nontarget", "weight_source"});
    cfg.objective.kind = objective_kind_from_string(
        get_or<std::string>(j, "objective", "kind", "TDSM"));
    cfg.objective.skip_threshold =
        get_or<double>(j, "objective", "skip_threshold", 0.01);
    cfg.objective.temporal_weight =
        get_or<std::string>(j, "objective", "temporal_weight", "sigma2");
    cfg.objective.detach_nontarget =
        get_or<bool>(j, "objective", "detach_nontarget", true);
    cfg.objective.weight_source =
        get_or<std::string>(j, "objective", "weight_source", "oracle");
    cfg.objective.validate();
  }

  {
    json j = section(root, "score_model");
    require_keys(j, "score_model",
                 {"hidden", "class_embed", "time_embed", "parameterization"});
    cfg.score_arch.dim = cfg.mixture.dim;
    cfg.score_arch.classes = cfg.mixture.classes;
    cfg.score_arch.hidden = get_or<std::vector<int>>(
        j, "score_model", "hidden", {128, 128, 128});
    cfg.score_arch.class_embed =
        get_or<int>(j, "score_model", "class_embed", 16);
    cfg.score_arch.time_embed =
        get_or<int>(j, "score_model", "time_embed", 32);
    cfg.score_arch.parameterization =
        get_or<std::string>(j, "score_model", "parameterization", "direct");
    cfg.score_arch.validate();
  }

  {
    json j = section(root, "score_training");
    require_keys(j, "score_training",
                 {"steps", "batch", "lr", "seed", "use_clean_labels",
                  "uncond_prob"});
    cfg.score_training.steps =
        get_or<long>(j, "score_training", "steps", 20000);
    cfg.score_training.batch = get_or<int>(j, "score_training", "batch", 256);
    cfg.score_training.lr = get_or<double>(j, "score_training", "lr", 1e-3);
    cfg.score_training.seed =
        get_or<unsigned long long>(j, "score_training", "seed", 3);
    cfg.score_training.use_clean_labels =
        get_or<bool>(j, "score_training", "use_clean_labels", false);
    cfg.score_training.uncond_prob =
        get_or<double>(j, "score_training", "uncond_prob", 0.0);
    if (cfg.score_training.steps < 1 || cfg.score_training.batch < 1)
      throw ConfigError("score_training steps/batch must be positive");
    if (cfg.score_training.uncond_prob < 0.0 ||
        cfg.score_training.uncond_prob >= 1.0)
      throw ConfigError("score_training.uncond_prob must lie in [0, 1)");
  }

  {
    json j = section(root, "classifier");
    require_keys(j, "classifier", {"hidden", "time_embed"});
    cfg.classifier_arch.dim = cfg.mixture.dim;
    cfg.classifier_arch.classes = cfg.mixture.classes;
    cfg.classifier_arch.hidden =
        get_or<std::vector<int>>(j, "classifier", "hidden", {64, 64});
    cfg.classifier_arch.time_embed =
        get_or<int>(j, "classifier", "time_embed", 16);
    cfg.classifier_arch.validate();
  }

  {
    json j = section(root, "classifier_training");
    require_keys(j, "classifier_training", {"steps", "batch", "lr", "seed"});
    cfg.classifier_training.steps =
        get_or<long>(j, "classifier_training", "steps", 4000);
    cfg.classifier_training.batch =
        get_or<int>(j, "classifier_training", "batch", 128);
    cfg.classifier_training.lr =
        get_or<double>(j, "classifier_training", "lr", 1e-3);
    cfg.classifier_training.seed =
        get_or<unsigned long long>(j, "classifier_training", "seed", 5);
    if (cfg.classifier_training.steps < 1 || cfg.classifier_training.batch < 1)
      throw ConfigError("classifier_training steps/batch must be positive");
  }

  {
    json j = section(root, "transition_estimation");
    require_keys(j, "transition_estimation",
                 {"enabled", "steps", "batch", "lr", "vol_weight",
                  "freeze_fraction", "det_floor", "seed"});
    cfg.estimate_transition =
        get_or<bool>(j, "transition_estimation", "enabled", false);
    cfg.volmin.steps = get_or<long>(j, "transition_estimation", "steps", 6000);
    cfg.volmin.batch = get_or<int>(j, "transition_estimation", "batch", 128);
    cfg.volmin.lr = get_or<double>(j, "transition_estimation", "lr", 1e-3);
    cfg.volmin.vol_weight =
        get_or<double>(j, "transition_estimation", "vol_weight", 1e-2);
    cfg.volmin.freeze_fraction =
        get_or<double>(j, "transition_estimation", "freeze_fraction", 0.25);
    cfg.volmin.det_floor =
        get_or<double>(j, "transition_estimation", "det_floor", 1e-8);
    cfg.volmin.seed =
        get_or<unsigned long long>(j, "transition_estimation", "seed", 7);
    if (cfg.volmin.steps < 1 || cfg.volmin.batch < 1)
      throw ConfigError("transition_estimation steps/batch must be positive");
    if (cfg.volmin.freeze_fraction < 0.0 || cfg.volmin.freeze_fraction > 1.0)
      throw ConfigError("transition_estimation.freeze_fraction in [0, 1]");
  }

  {
    json j = section(root, "sampler");
    require_keys(j, "sampler",
                 {"method", "steps", "t_max", "t_min", "guidance", "seed",
                  "n_samples", "score_source", "checkpoint"});
    cfg.sampler.method =
        get_or<std::string>(j, "sampler", "method", "reverse-sde");
    cfg.sampler.steps = get_or<int>(j, "sampler", "steps", 128);
    cfg.sampler.t_max =
        get_or<double>(j, "sampler", "t_max", cfg.schedule.t_max);
    cfg.sampler.t_min =
        get_or<double>(j, "sampler", "t_min",
                       cfg.schedule.t_min > 0.0 ? cfg.schedule.t_min : 0.05);
    cfg.sampler.guidance = guidance_from_string(
        get_or<std::string>(j, "sampler", "guidance", "none"));
    cfg.sampler.seed = get_or<unsigned long long>(j, "sampler", "seed", 13);
    cfg.sampler.validate();
    cfg.n_samples = get_or<long>(j, "sampler", "n_samples", 4096);
    if (cfg.n_samples < 1) throw ConfigError("sampler.n_samples must be positive");
    cfg.score_source =
        get_or<std::string>(j, "sampler", "score_source", "checkpoint");
    if (cfg.score_source != "checkpoint" && cfg.score_source != "oracle")
      throw ConfigError("sampler.score_source must be checkpoint or oracle");
    cfg.checkpoint = get_or<std::string>(j, "sampler", "checkpoint", "");
  }

  {
    GridSpec grid_default;
    cfg.grid = parse_grid(root, "grid", grid_default);
    GridSpec contour_default;
    contour_default.lo = -2.0;
    contour_default.hi = 2.0;
    contour_default.n = 21;
    contour_default.times = {0.05, 0.1, 1.0, 3.0, 10.0};
    cfg.contour = parse_grid(root, "contour", contour_default);
  }

  {
    json j = section(root, "fields");
    require_keys(j, "fields", {"checkpoints"});
    cfg.field_checkpoints =
        get_or<std::vector<std::string>>(j, "fields", "checkpoints", {});
  }

  cfg.out_dir = get_or<std::string>(root, "config", "out_dir", "out");

  if (ov.seed) {
    cfg.data_seed = *ov.seed;
    cfg.classifier_training.seed = *ov.seed + 1;
    cfg.volmin.seed = *ov.seed + 2;
    cfg.score_training.seed = *ov.seed + 3;
    cfg.sampler.seed = *ov.seed + 4;
  }
  if (ov.out_dir) cfg.out_dir = *ov.out_dir;

  json canon;
  canon["mixture"] = {{"means", rows_of(cfg.mixture.means)},
                      {"variances", vec_of(cfg.mixture.variances)},
                      {"prior", vec_of(cfg.mixture.clean_prior)}};
  canon["schedule"] = {{"t_min", cfg.schedule.t_min},
                       {"t_max", cfg.schedule.t_max}};
  canon["noise"] = {{"orientation", "forward"},
                    {"rows", rows_of(cfg.forward.rows)}};
  canon["data"] = {{"n", cfg.n_data}, {"seed", cfg.data_seed}};
  canon["objective"] = {{"kind", to_string(cfg.objective.kind)},
                        {"skip_threshold", cfg.objective.skip_threshold},
                        {"temporal_weight", cfg.objective.temporal_weight},
                        {"detach_nontarget", cfg.objective.detach_nontarget},
                        {"weight_source", cfg.objective.weight_source}};
  canon["score_model"] = {{"hidden", cfg.score_arch.hidden},
                          {"class_embed", cfg.score_arch.class_embed},
                          {"time_embed", cfg.score_arch.time_embed},
                          {"parameterization", cfg.score_arch.parameterization}};
  canon["score_training"] = {{"steps", cfg.score_training.steps},
                             {"batch", cfg.score_training.batch},
                             {"lr", cfg.score_training.lr},
                             {"seed", cfg.score_training.seed},
                             {"use_clean_labels",
                              cfg.score_training.use_clean_labels},
                             {"uncond_prob", cfg.score_training.uncond_prob}};
  canon["classifier"] = {{"hidden", cfg.classifier_arch.hidden},
                         {"time_embed", cfg.classifier_arch.time_embed}};
  canon["classifier_training"] = {{"steps", cfg.classifier_training.steps},
                                  {"batch", cfg.classifier_training.batch},
                                  {"lr", cfg.classifier_training.lr},
                                  {"seed", cfg.classifier_training.seed}};
  canon["transition_estimation"] = {{"enabled", cfg.estimate_transition},
                                    {"steps", cfg.volmin.steps},
                                    {"batch", cfg.volmin.batch},
                                    {"lr", cfg.volmin.lr},
                                    {"vol_weight", cfg.volmin.vol_weight},
                                    {"freeze_fraction",
                                     cfg.volmin.freeze_fraction},
                                    {"det_floor", cfg.volmin.det_floor},
                                    {"seed", cfg.volmin.seed}};
  canon["sampler"] = {{"method", cfg.sampler.method},
                      {"steps", cfg.sampler.steps},
                      {"t_max", cfg.sampler.t_max},
                      {"t_min", cfg.sampler.t_min},
                      {"guidance", to_string(cfg.sampler.guidance)},
                      {"seed", cfg.sampler.seed},
                      {"n_samples", cfg.n_samples},
                      {"score_source", cfg.score_source},
                      {"checkpoint", cfg.checkpoint}};
  canon["grid"] = {{"lo", cfg.grid.lo},
                   {"hi", cfg.grid.hi},
                   {"n", cfg.grid.n},
                   {"times", cfg.grid.times}};
  canon["contour"] = {{"lo", cfg.contour.lo},
                      {"hi", cfg.contour.hi},
                      {"n", cfg.contour.n},
                      {"times", cfg.contour.times}};
  canon["fields"] = {{"checkpoints", cfg.field_checkpoints}};
  canon["out_dir"] = cfg.out_dir;
  cfg.canonical_json = canon.dump();
  cfg.config_hash = fnv1a_hex(cfg.canonical_json);
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path,
                                        const ConfigOverrides& ov) {
  return parse_experiment_config(read_text_file(path), ov);
}

NoisyDataset materialize_dataset(const ExperimentConfig& cfg) {
  const std::string path = joinp(cfg.out_dir, "dataset.csv");
  if (fs::exists(path)) return read_dataset_csv(path, cfg.mixture.classes);
  const MixtureSample ms =
      sample_mixture(cfg.mixture, cfg.n_data, cfg.data_seed);
  return corrupt_labels(ms.instances, ms.labels, cfg.forward,
                        cfg.data_seed + 1);
}

int cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log) {
  ensure_out_dir(cfg);
  const MixtureSample ms =
      sample_mixture(cfg.mixture, cfg.n_data, cfg.data_seed);
  const NoisyDataset ds = corrupt_labels(ms.instances, ms.labels, cfg.forward,
                                         cfg.data_seed + 1);
  write_dataset_csv(joinp(cfg.out_dir, "dataset.csv"), ds, cfg.config_hash);
  write_transition_json(joinp(cfg.out_dir, "transition_forward.json"),
                        cfg.forward, cfg.config_hash);
  write_transition_json(joinp(cfg.out_dir, "transition_reverse.json"),
                        cfg.reverse, cfg.config_hash);
  Eigen::Index flipped = 0;
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    if (ds.clean_labels[static_cast<std::size_t>(i)] !=
        ds.noisy_labels[static_cast<std::size_t>(i)])
      ++flipped;
  log << "wrote " << ds.size() << " rows, flipped fraction "
      << static_cast<double>(flipped) / static_cast<double>(ds.size())
      << "\n";
  return 0;
}

int cmd_verify(const ExperimentConfig& cfg, std::ostream& log) {
  ensure_out_dir(cfg);
  std::string report;
  bool ok = false;
  try {
    const std::vector<CheckResult> results =
        run_verification(cfg.mixture, cfg.schedule, cfg.reverse);
    report = verification_report(results);
    ok = all_passed(results);
  } catch (const Error& e) {
    report = std::string("FAIL  verification aborted: ") + e.what() + "\n";
    ok = false;
  }
  write_text_file(joinp(cfg.out_dir, "verify_report.txt"),
                  "# config_hash=" + cfg.config_hash + "\n" + report);
  log << report;
  log << (ok ? "all checks passed" : "verification FAILED") << "\n";
  return ok ? 0 : 1;
}

int cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  ensure_out_dir(cfg);
  const auto start = std::chrono::steady_clock::now();
  const NoisyDataset data = materialize_dataset(cfg);

  const bool weighted = cfg.objective.kind == ObjectiveKind::tdsm ||
                        cfg.objective.kind == ObjectiveKind::tdsm_rc;
  const bool classifier_weights =
      weighted && cfg.objective.weight_source == "classifier";
  const bool guidance_needs_classifier =
      cfg.sampler.guidance.kind == GuidanceSpec::Kind::cg ||
      cfg.sampler.guidance.kind == GuidanceSpec::Kind::tcg;
  const bool train_clf = classifier_weights || guidance_needs_classifier ||
                         cfg.estimate_transition;

  TransitionMatrix s_used = cfg.reverse;
  std::optional<NoisyClassifier> clf;
  if (train_clf) {
    clf.emplace(cfg.classifier_arch, cfg.classifier_training.seed);
    if (cfg.estimate_transition) {
      TrainableTransition trans(cfg.mixture.classes);
      const VolMinResult vr =
          estimate_transition_volmin(*clf, trans, data, cfg.schedule,
                                     cfg.volmin);
      write_loss_trace_csv(joinp(cfg.out_dir, "volmin_trace.csv"), vr.trace,
                           cfg.config_hash);
      write_transition_json(joinp(cfg.out_dir, "transition_estimate.json"),
                            vr.estimated_forward, cfg.config_hash);
      Eigen::VectorXd counts_prior(cfg.mixture.classes);
      for (int i = 0; i < cfg.mixture.classes; ++i)
        counts_prior(i) = static_cast<double>(data.counts(i)) /
                          static_cast<double>(data.size());
      const OrientedPair pair = reverse_from_forward(
          vr.estimated_forward, counts_prior, PriorSide::noisy);
      s_used = pair.reverse;
      write_transition_json(
          joinp(cfg.out_dir, "transition_estimate_reverse.json"), s_used,
          cfg.config_hash);
      clf->set_simplex_projection(vr.estimated_forward);
      log << "estimated forward matrix:\n" << vr.estimated_forward.rows
          << "\n";
    }
    const std::vector<TraceRow> trace =
        train_classifier(*clf, data, cfg.schedule, cfg.classifier_training);
    write_classifier_checkpoint(joinp(cfg.out_dir, "classifier.json"), *clf,
                                cfg.config_hash);
    write_loss_trace_csv(joinp(cfg.out_dir, "classifier_trace.csv"), trace,
                         cfg.config_hash);
    if (!trace.empty())
      log << "classifier final loss " << trace.back().loss << "\n";
  }

  WeightSource wsrc;
  const WeightSource* wptr = nullptr;
  if (weighted) {
    if (cfg.objective.weight_source == "oracle")
      wsrc = make_oracle_weight_source(cfg.mixture, cfg.schedule, cfg.reverse);
    else
      wsrc = make_classifier_weight_source(*clf, s_used, data.counts);
    wptr = &wsrc;
  }

  ScoreModel model(cfg.score_arch, cfg.score_training.seed);
  const std::vector<TraceRow> trace =
      train_score_model(model, data, cfg.schedule, cfg.objective, &s_used,
                        wptr, cfg.score_training);
  write_score_checkpoint(joinp(cfg.out_dir, "score_model.json"), model,
                         cfg.config_hash);
  write_loss_trace_csv(joinp(cfg.out_dir, "score_trace.csv"), trace,
                       cfg.config_hash);

  MetricsReport report;
  const Eigen::MatrixXd grid = make_grid(cfg.grid.lo, cfg.grid.hi, cfg.grid.n);
  const BatchScoreFn model_fn = make_model_score_fn(model);
  report.score_field_mse_clean = field_mse_table(
      cfg.mixture, cfg.schedule, grid, model_fn,
      make_oracle_clean_score_fn(cfg.mixture, cfg.schedule), cfg.grid.times);
  report.score_field_mse_noisy = field_mse_table(
      cfg.mixture, cfg.schedule, grid, model_fn,
      oracle_noisy_score_fn(cfg.mixture, cfg.schedule, cfg.reverse),
      cfg.grid.times);
  report.runtime_seconds = elapsed_seconds(start);
  write_metrics_json(joinp(cfg.out_dir, "train_metrics.json"), report,
                     cfg.config_hash);

  log << to_string(cfg.objective.kind) << " final loss "
      << (trace.empty() ? 0.0 : trace.back().loss) << ", grid MSE clean "
      << mean_mse(report.score_field_mse_clean) << ", noisy "
      << mean_mse(report.score_field_mse_noisy) << ", "
      << report.runtime_seconds << " s\n";
  return 0;
}

int cmd_sample(const ExperimentConfig& cfg, std::ostream& log) {
  ensure_out_dir(cfg);
  const auto start = std::chrono::steady_clock::now();
  const int c = cfg.mixture.classes;
  const int dim = cfg.mixture.dim;

  std::optional<ScoreModel> model;
  BatchScoreFn base;
  if (cfg.score_source == "oracle") {
    base = make_oracle_clean_score_fn(cfg.mixture, cfg.schedule);
  } else {
    const std::string path = cfg.checkpoint.empty()
                                 ? joinp(cfg.out_dir, "score_model.json")
                                 : cfg.checkpoint;
    if (!fs::exists(path))
      throw ConfigError("score checkpoint not found: " + path);
    model.emplace(read_score_checkpoint(path));
    base = make_model_score_fn(*model);
  }

  const GuidanceSpec::Kind kind = cfg.sampler.guidance.kind;
  const double value = cfg.sampler.guidance.value;
  std::optional<NoisyClassifier> clf;
  if ((kind == GuidanceSpec::Kind::cg || kind == GuidanceSpec::Kind::tcg) &&
      cfg.score_source != "oracle") {
    const std::string path = joinp(cfg.out_dir, "classifier.json");
    if (!fs::exists(path))
      throw ConfigError("classifier checkpoint not found: " + path);
    clf.emplace(read_classifier_checkpoint(path));
  }

  const TransitionMatrix s_sampling = sampling_reverse_matrix(cfg);
  TcgDiagnostics diag;
  BatchScoreFn score = base;
  if (kind == GuidanceSpec::Kind::cg || kind == GuidanceSpec::Kind::tcg) {
    BatchScoreFn uncond =
        cfg.score_source == "oracle"
            ? make_oracle_marginal_score_fn(cfg.mixture, cfg.schedule)
            : make_model_uncond_score_fn(*model);
    BatchGradFn ngrad;
    if (cfg.score_source == "oracle") {
      const GaussianMixture gmm = cfg.mixture;
      const VESchedule sched = cfg.schedule;
      const TransitionMatrix S = s_sampling;
      ngrad = [gmm, sched, S](const Eigen::MatrixXd& x, int yt, double t) {
        Eigen::MatrixXd g(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.rows(); ++i)
          g.row(i) = noisy_classifier_log_grad(gmm, sched, S,
                                               x.row(i).transpose(), yt, t)
                         .transpose();
        return g;
      };
    } else {
      ngrad = make_classifier_grad_fn(*clf);
    }
    if (kind == GuidanceSpec::Kind::cg) {
      score = make_cg_score_fn(uncond, ngrad, value);
    } else {
      WeightMatrixFn wmat;
      if (cfg.score_source == "oracle") {
        const GaussianMixture gmm = cfg.mixture;
        const VESchedule sched = cfg.schedule;
        const TransitionMatrix S = s_sampling;
        wmat = [gmm, sched, S](const Eigen::VectorXd& x, double t) {
          return weight_matrix(gmm, sched, S, x, t);
        };
      } else {
        const NoisyDataset data = materialize_dataset(cfg);
        const NoisyClassifier clf_copy = *clf;
        const WeightEstimator est(s_sampling, data.counts);
        wmat = [clf_copy, est, c](const Eigen::VectorXd& x, double t) {
          const Eigen::VectorXd h = clf_copy.classify_one(x, t);
          Eigen::MatrixXd W(c, c);
          for (int yt = 0; yt < c; ++yt)
            W.row(yt) = est.estimate(h, yt).values.transpose();
          return W;
        };
      }
      score = make_tcg_score_fn(uncond, ngrad, wmat, value, c, &diag);
    }
  } else if (kind == GuidanceSpec::Kind::cfg) {
    if (!model)
      throw ConfigError("classifier-free guidance needs a model checkpoint");
    score = make_cfg_score_fn(*model, value);
  } else if (kind == GuidanceSpec::Kind::affine) {
    WeightSource wsrc;
    if (cfg.objective.weight_source == "oracle") {
      wsrc = make_oracle_weight_source(cfg.mixture, cfg.schedule, s_sampling);
    } else {
      const std::string path = joinp(cfg.out_dir, "classifier.json");
      if (!fs::exists(path))
        throw ConfigError("classifier checkpoint not found: " + path);
      const NoisyClassifier wclf = read_classifier_checkpoint(path);
      const NoisyDataset data = materialize_dataset(cfg);
      wsrc = make_classifier_weight_source(wclf, s_sampling, data.counts);
    }
    score = make_affine_score_fn(base, wsrc, value, c);
  }

  // The reverse run starts from the exact conditional prior at t_max: the
  // requested component for clean-conditional targets, the reverse-row
  // mixture for models trained toward the noisy conditional.
  const bool noisy_target =
      cfg.score_source != "oracle" && kind == GuidanceSpec::Kind::none &&
      !cfg.score_training.use_clean_labels &&
      (cfg.objective.kind == ObjectiveKind::dsm ||
       cfg.objective.kind == ObjectiveKind::sdsm);

  Eigen::MatrixXd samples(cfg.n_samples, dim);
  std::vector<int> requested(static_cast<std::size_t>(cfg.n_samples));
  Eigen::Index row = 0;
  for (int y = 0; y < c; ++y) {
    const long n_y = cfg.n_samples / c + (y < cfg.n_samples % c ? 1 : 0);
    if (n_y == 0) continue;
    SamplerConfig scfg = cfg.sampler;
    scfg.prior = noisy_target ? noisy_mixture_prior(cfg.mixture, cfg.reverse, y)
                              : clean_component_prior(cfg.mixture, y);
    scfg.seed = cfg.sampler.seed + static_cast<unsigned long long>(y);
    const Eigen::MatrixXd chunk =
        cfg.sampler.method == "reverse-sde"
            ? sample_reverse_sde(score, cfg.schedule, scfg, y,
                                 static_cast<int>(n_y), dim)
            : sample_ode(score, cfg.schedule, scfg, y, static_cast<int>(n_y),
                         dim);
    samples.middleRows(row, n_y) = chunk;
    for (long k = 0; k < n_y; ++k)
      requested[static_cast<std::size_t>(row + k)] = y;
    row += n_y;
  }

  MetricsReport report;
  report.condition_accuracy =
      condition_accuracy(cfg.mixture, samples, requested);
  report.per_class_mean_error =
      per_class_mean_error(cfg.mixture, samples, requested);
  if (model) {
    const Eigen::MatrixXd grid =
        make_grid(cfg.grid.lo, cfg.grid.hi, cfg.grid.n);
    const BatchScoreFn model_fn = make_model_score_fn(*model);
    report.score_field_mse_clean = field_mse_table(
        cfg.mixture, cfg.schedule, grid, model_fn,
        make_oracle_clean_score_fn(cfg.mixture, cfg.schedule), cfg.grid.times);
    report.score_field_mse_noisy = field_mse_table(
        cfg.mixture, cfg.schedule, grid, model_fn,
        oracle_noisy_score_fn(cfg.mixture, cfg.schedule, cfg.reverse),
        cfg.grid.times);
  }
  report.runtime_seconds = elapsed_seconds(start);
  write_samples_csv(joinp(cfg.out_dir, "samples.csv"), samples, requested,
                    cfg.config_hash);
  write_metrics_json(joinp(cfg.out_dir, "metrics.json"), report,
                     cfg.config_hash);

  log << "condition accuracy " << report.condition_accuracy << " over "
      << cfg.n_samples << " samples, " << report.runtime_seconds << " s\n";
  if (kind == GuidanceSpec::Kind::tcg)
    log << "tcg fallbacks " << diag.fallbacks << ", max condition "
        << diag.max_condition << "\n";
  return 0;
}

int cmd_contour(const ExperimentConfig& cfg, std::ostream& log) {
  if (cfg.mixture.dim != 2)
    throw ConfigError("contour export needs a 2-d mixture");
  ensure_out_dir(cfg);
  const Eigen::MatrixXd grid =
      make_grid(cfg.contour.lo, cfg.contour.hi, cfg.contour.n);
  std::ostringstream out;
  out << "# config_hash=" << cfg.config_hash << "\n";
  out << "x1,x2,t,w\n";
  for (double t : cfg.contour.times)
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
      const double w = exact_weight(cfg.mixture, cfg.schedule, cfg.reverse,
                                    grid.row(i).transpose(), 0, 0, t);
      out << format_double(grid(i, 0)) << "," << format_double(grid(i, 1))
          << "," << format_double(t) << "," << format_double(w) << "\n";
    }
  write_text_file(joinp(cfg.out_dir, "contour.csv"), out.str());
  log << "wrote " << grid.rows() * static_cast<Eigen::Index>(
                         cfg.contour.times.size())
      << " contour rows\n";
  return 0;
}

int cmd_fields(const ExperimentConfig& cfg, std::ostream& log) {
  if (cfg.mixture.dim != 2)
    throw ConfigError("field export needs a 2-d mixture");
  ensure_out_dir(cfg);
  const Eigen::MatrixXd grid = make_grid(cfg.grid.lo, cfg.grid.hi, cfg.grid.n);

  const BatchScoreFn clean_fn =
      make_oracle_clean_score_fn(cfg.mixture, cfg.schedule);
  const BatchScoreFn noisy_fn =
      oracle_noisy_score_fn(cfg.mixture, cfg.schedule, cfg.reverse);
  const BatchScoreFn fixed_fn =
      fixed_point_score_fn(cfg.mixture, cfg.schedule, cfg.reverse);
  write_field_csv(joinp(cfg.out_dir, "field_clean_oracle.csv"), cfg, grid,
                  clean_fn, cfg.grid.times);
  write_field_csv(joinp(cfg.out_dir, "field_noisy_oracle.csv"), cfg, grid,
                  noisy_fn, cfg.grid.times);
  write_field_csv(joinp(cfg.out_dir, "field_sdsm_fixed_point.csv"), cfg, grid,
                  fixed_fn, cfg.grid.times);

  std::vector<std::string> checkpoints = cfg.field_checkpoints;
  if (checkpoints.empty()) {
    const std::string fallback = joinp(cfg.out_dir, "score_model.json");
    if (fs::exists(fallback)) checkpoints.push_back(fallback);
  }

  nlohmann::json models = nlohmann::json::array();
  for (std::size_t k = 0; k < checkpoints.size(); ++k) {
    if (!fs::exists(checkpoints[k]))
      throw ConfigError("field checkpoint not found: " + checkpoints[k]);
    const ScoreModel m = read_score_checkpoint(checkpoints[k]);
    const BatchScoreFn fn = make_model_score_fn(m);
    write_field_csv(joinp(cfg.out_dir,
                          "field_model_" + std::to_string(k + 1) + ".csv"),
                    cfg, grid, fn, cfg.grid.times);
    nlohmann::json entry;
    entry["checkpoint"] = checkpoints[k];
    auto table_json = [](const std::vector<FieldMseEntry>& t) {
      nlohmann::json arr = nlohmann::json::array();
      for (const FieldMseEntry& e : t)
        arr.push_back({{"label", e.label + 1}, {"t", e.t}, {"mse", e.mse}});
      return arr;
    };
    const auto vs_clean = field_mse_table(cfg.mixture, cfg.schedule, grid, fn,
                                          clean_fn, cfg.grid.times);
    const auto vs_noisy = field_mse_table(cfg.mixture, cfg.schedule, grid, fn,
                                          noisy_fn, cfg.grid.times);
    const auto vs_fixed = field_mse_table(cfg.mixture, cfg.schedule, grid, fn,
                                          fixed_fn, cfg.grid.times);
    entry["mse_clean"] = table_json(vs_clean);
    entry["mse_noisy"] = table_json(vs_noisy);
    entry["mse_fixed_point"] = table_json(vs_fixed);
    entry["mean_mse_clean"] = mean_mse(vs_clean);
    entry["mean_mse_noisy"] = mean_mse(vs_noisy);
    entry["mean_mse_fixed_point"] = mean_mse(vs_fixed);
    models.push_back(entry);
    log << checkpoints[k] << ": mean MSE clean " << mean_mse(vs_clean)
        << ", noisy " << mean_mse(vs_noisy) << ", fixed point "
        << mean_mse(vs_fixed) << "\n";
  }
  nlohmann::json j;
  j["format_version"] = 1;
  j["config_hash"] = cfg.config_hash;
  j["models"] = models;
  write_text_file(joinp(cfg.out_dir, "fields_metrics.json"), j.dump(2) + "\n");
  log << "wrote " << (3 + checkpoints.size()) << " field exports\n";
  return 0;
}

}  // namespace tdsm
