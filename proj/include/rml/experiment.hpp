#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rml/corpus.hpp"
#include "rml/meta.hpp"
#include "rml/model.hpp"

// Experiment orchestration: one JSON config describes the corpus, the
// seen/unseen domain partition, model and training settings, and the set
// of baseline systems to build. Stages run as subcommands and leave their
// artifacts under one output root; each stage records a stamp with the
// config hash and the hashes of the files it read and wrote, so a rerun
// with unchanged inputs is a no-op and a changed config rebuilds from the
// first affected stage. All randomness flows from the single config seed
// through named substreams, which makes full pipeline reruns byte-identical.

namespace rml {

struct SynthSpec {
  std::vector<std::string> domains;
  int types_per_domain{80};
  double overlap{0.3};
  int pairs_per_domain{500};
  int min_len{4};
  int max_len{12};
};

struct CorpusSpec {
  bool synthetic{true};
  SynthSpec synth;
  // domain -> {src path, tgt path}, for ingesting real parallel text.
  std::map<std::string, std::pair<std::string, std::string>> paths;
  int vocab_cap{4096};
  int max_tokens{64};
};

struct PartitionSpec {
  std::vector<std::string> seen, unseen;
};

struct ModelSpec {
  int d_model{32};
  int n_heads{2};
  int enc_layers{1};
  int dec_layers{1};
  int d_ff{48};
  double epsilon{0.1};
  int max_len{96};
};

struct ClassifierSpec {
  int hidden{32};
  double lr{0.2};
  int epochs{10};
  int batch{16};
  double holdout{0.1};
};

struct SplitSpec {
  int n_tasks{8};
  long support_tokens{8000};
  long query_tokens{16000};
  std::string strategy{"token-budget"};
};

struct PretrainSpec {
  int epochs{3};
  double lr{0.1};
  double final_lr{-1.0};  // < 0 means constant lr; else linear decay to it
  int batch_pairs{8};

  double lr_at(int epoch) const;
};

struct MetaSpec {
  double alpha{0.05};
  double beta{0.02};
  int epochs{2};
  std::string order{"first-order"};
};

struct FinetuneSpec {
  std::string strategy{"ft-specific"};
  int steps{30};
  double lr{0.05};
  int support_pairs{24};
};

struct EvalSpec {
  int beam_size{4};
  int max_length{24};
  double length_penalty{0.0};
  int max_sentences{40};
};

// The six systems under comparison, all driven by the same stage code:
//   vanilla              plain transformer, pretraining only
//   plain-ft             vanilla plus direct fine-tuning
//   meta-only            vanilla plus meta-training on uniform-score tasks
//   meta-curriculum-cls  vanilla plus meta-training on classifier tasks
//   word-level-adaptive  domain-mixing transformer, pretraining only
//   rmlnmt               domain-mixing plus classifier-curriculum meta plus ft
struct BaselineSpec {
  std::string kind{"rmlnmt"};
  // Scales model width by ceil(sqrt(k)) so a single-bank model can match
  // the parameter budget of a k-bank mixing model.
  bool widen_embeddings{false};
};

struct ExperimentConfig {
  CorpusSpec corpus;
  PartitionSpec partition;
  ModelSpec model;
  ClassifierSpec classifier;
  SplitSpec split;
  PretrainSpec pretrain;
  MetaSpec meta;
  FinetuneSpec finetune;
  EvalSpec eval;
  std::vector<BaselineSpec> baselines;
  uint64_t seed{0};
  std::string output{"out"};

  // Throws ConfigError naming the dotted field path for missing keys,
  // wrong types, and inconsistent values.
  static ExperimentConfig load(const std::filesystem::path& path);
  static ExperimentConfig parse(const std::string& text);

  void validate() const;

  // Deterministic dump of the effective config; its FNV-1a hash stamps
  // every artifact.
  std::string canonical_json() const;
  std::string hash() const;

  std::vector<std::string> all_domains() const;  // seen then unseen
  bool is_seen(const std::string& domain) const;
};

struct StageResult {
  bool skipped{false};
  std::string message;
};

class Experiment {
 public:
  // The RML_ADAPT_OUT environment variable, when set, overrides the
  // config's output root.
  explicit Experiment(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& root() const { return root_; }

  StageResult synth();
  StageResult ingest();
  StageResult train_classifier();
  StageResult score();
  StageResult split();
  StageResult pretrain();
  StageResult meta_train_stage();
  StageResult finetune();
  StageResult evaluate();
  StageResult robustness();
  StageResult report();

  // Dispatches a CLI subcommand name; throws ConfigError for unknown ones.
  StageResult run(const std::string& subcommand);
  static const std::vector<std::string>& subcommands();

  // Baseline roles.
  static bool uses_mixing(const std::string& kind);
  static bool uses_meta(const std::string& kind);
  static bool uses_finetune(const std::string& kind);
  static bool uses_classifier_scores(const std::string& kind);

  MixConfig model_config(const BaselineSpec& b) const;

 private:
  ExperimentConfig cfg_;
  std::filesystem::path root_;
  std::string hash_;

  std::filesystem::path stamp_path(const std::string& stage) const;
  bool up_to_date(const std::string& stage) const;
  void write_stamp(const std::string& stage,
                   const std::vector<std::filesystem::path>& inputs,
                   const std::vector<std::filesystem::path>& outputs) const;

  StageResult corpus_stage(bool from_synth);
  void require_artifact(const std::filesystem::path& p,
                        const std::string& producer) const;

  int domain_index(const std::string& domain) const;  // routing label
  std::vector<RawPair> load_slice(const std::string& domain,
                                  const std::string& slice) const;
  Vocabulary vocab() const;
  ParamSet load_params(const std::filesystem::path& ckpt,
                       const MixConfig& mc) const;
  void save_params(const std::filesystem::path& ckpt, const MixConfig& mc,
                   const std::string& stage_name, const ParamSet& params) const;
  std::filesystem::path base_model_path(const BaselineSpec& b) const;
  std::filesystem::path ft_model_path(const BaselineSpec& b,
                                      const std::string& domain) const;
};

// 64-bit FNV-1a over a file's bytes, hex-encoded; the artifact fingerprint
// used by stage stamps.
std::string hash_file(const std::filesystem::path& p);

}  // namespace rml
