#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tdsm/errors.hpp"
#include "tdsm/experiment.hpp"

namespace {

struct Command {
  const char* name;
  const char* help;
  int (*run)(const tdsm::ExperimentConfig&, std::ostream&);
};

constexpr Command kCommands[] = {
    {"gen-data", "draw the mixture dataset and corrupt its labels",
     &tdsm::cmd_gen_data},
    {"verify", "run the analytic self-check suite", &tdsm::cmd_verify},
    {"train", "train the configured score model and its helpers",
     &tdsm::cmd_train},
    {"sample", "integrate the reverse process and score the draws",
     &tdsm::cmd_sample},
    {"contour", "export transition-weight contours over a grid",
     &tdsm::cmd_contour},
    {"fields", "export oracle and model score fields with error tables",
     &tdsm::cmd_fields},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale lab for score models trained on noisy labels"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  unsigned long long seed = 0;
  std::vector<CLI::App*> subs;
  for (const Command& c : kCommands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "experiment config JSON")
        ->required();
    sub->add_option("--seed", seed, "override every stage seed");
    sub->add_option("--out", out_dir, "override the output directory");
    subs.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  std::size_t chosen = 0;
  for (std::size_t i = 0; i < subs.size(); ++i)
    if (subs[i]->parsed()) chosen = i;

  try {
    tdsm::ConfigOverrides ov;
    if (subs[chosen]->count("--seed") > 0) ov.seed = seed;
    if (subs[chosen]->count("--out") > 0) ov.out_dir = out_dir;
    const tdsm::ExperimentConfig cfg =
        tdsm::load_experiment_config(config_path, ov);
    return kCommands[chosen].run(cfg, std::cout);
  } catch (const tdsm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
