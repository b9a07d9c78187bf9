#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tdsm/classifier.hpp"
#include "tdsm/dataset.hpp"
#include "tdsm/gmm.hpp"
#include "tdsm/objectives.hpp"
#include "tdsm/sampler.hpp"
#include "tdsm/score_model.hpp"
#include "tdsm/transition.hpp"

namespace tdsm {

struct GridSpec {
  double lo = -8.0;
  double hi = 8.0;
  int n = 25;
  std::vector<double> times = {0.1, 1.0, 2.0, 3.0};
};

// One experiment, fully determined by a single JSON document: mixture,
// diffusion schedule, label noise, training setups, sampling, and export
// grids. Every field has an explicit default (the desk-scale benchmark);
// unknown keys are rejected. The canonical re-serialization of the
// effective config is hashed into every artifact this config produces.
struct ExperimentConfig {
  GaussianMixture mixture;
  VESchedule schedule;
  TransitionMatrix forward;   // clean -> noisy
  TransitionMatrix reverse;   // noisy -> clean, Bayes-derived when needed
  Eigen::VectorXd noisy_prior;

  long n_data = 10000;
  unsigned long long data_seed = 11;

  ObjectiveConfig objective;
  ScoreModelArch score_arch;
  ScoreTrainConfig score_training;

  ClassifierArch classifier_arch;
  ClassifierTrainConfig classifier_training;
  bool estimate_transition = false;
  VolMinConfig volmin;

  SamplerConfig sampler;
  long n_samples = 4096;
  std::string score_source = "checkpoint";  // "checkpoint" | "oracle"
  std::string checkpoint;  // empty: <out_dir>/score_model.json

  GridSpec grid;     // field metrics and exports
  GridSpec contour;  // weight-contour export
  std::vector<std::string> field_checkpoints;
  std::string out_dir = "out";

  std::string canonical_json;
  std::string config_hash;
};

struct ConfigOverrides {
  std::optional<unsigned long long> seed;  // re-derives every stage seed
  std::optional<std::string> out_dir;
};

ExperimentConfig parse_experiment_config(const std::string& text,
                                         const ConfigOverrides& ov = {});
ExperimentConfig load_experiment_config(const std::string& path,
                                        const ConfigOverrides& ov = {});

// Deterministic dataset identical to what cmd_gen_data writes: reads
// <out_dir>/dataset.csv when present, otherwise regenerates it in memory
// from the config seeds.
NoisyDataset materialize_dataset(const ExperimentConfig& cfg);

// Commands return 0 on success, 1 on a verification/runtime failure.
// Configuration problems (bad fields, missing referenced files) throw
// ConfigError, which the CLI maps to exit code 2.
int cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log);
int cmd_verify(const ExperimentConfig& cfg, std::ostream& log);
int cmd_train(const ExperimentConfig& cfg, std::ostream& log);
int cmd_sample(const ExperimentConfig& cfg, std::ostream& log);
int cmd_contour(const ExperimentConfig& cfg, std::ostream& log);
int cmd_fields(const ExperimentConfig& cfg, std::ostream& log);

}  // namespace tdsm
