#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "rml/errors.hpp"
#include "rml/experiment.hpp"
#include "rml/kernels.hpp"

// Pipeline driver. Every stage reads one JSON config, works under one
// output root, and skips itself when its inputs and outputs are already
// current, so the whole experiment can be replayed stage by stage.

int main(int argc, char** argv) {
  CLI::App app{"deskside domain-adaptation laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "experiment config (JSON)")
      ->required();
  long long seed_override = -1;
  app.add_option("--seed", seed_override,
                 "override the config's seed (non-negative)");
  bool sequential = false;
  app.add_flag("--sequential", sequential,
               "disable the parallel kernels; bitwise-identical results");

  static const std::map<std::string, std::string> descriptions = {
      {"synth", "generate the synthetic corpus and its splits"},
      {"ingest", "load and clean real parallel text"},
      {"train-classifier", "train the domain classifier"},
      {"score", "score training sentences for the curriculum"},
      {"split", "build curriculum task manifests"},
      {"pretrain-mix", "pretrain each baseline's translation model"},
      {"meta-train", "meta-train the baselines that use it"},
      {"finetune", "adapt models on domain support sets"},
      {"evaluate", "decode test sets and compute metrics"},
      {"robustness", "cross-domain fine-tuning robustness grid"},
      {"report", "assemble the final comparison tables"}};
  for (const auto& name : rml::Experiment::subcommands()) {
    CLI::App* sub = app.add_subcommand(name, descriptions.at(name));
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    rml::kernels::set_parallel(!sequential);
    rml::ExperimentConfig cfg = rml::ExperimentConfig::load(config_path);
    if (seed_override >= 0) {
      cfg.seed = static_cast<uint64_t>(seed_override);
    }
    rml::Experiment ex(std::move(cfg));
    const rml::StageResult res =
        ex.run(app.get_subcommands().front()->get_name());
    std::printf("%s\n", res.message.c_str());
    return 0;
  } catch (const rml::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
