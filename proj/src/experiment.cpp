#include "rml/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rml/checkpoint.hpp"
#include "rml/classifier.hpp"
#include "rml/curriculum.hpp"
#include "rml/decode.hpp"
#include "rml/errors.hpp"
#include "rml/metrics.hpp"
#include "rml/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace rml {

namespace {

std::string hex64(uint64_t h) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(h));
  return b;
}

std::string fmt(const char* spec, double v) {
  char b[64];
  std::snprintf(b, sizeof b, spec, v);
  return b;
}

std::string joinp(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

const json& need(const json& obj, const std::string& prefix,
                 const std::string& key) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ConfigError("config field '" + joinp(prefix, key) + "': required");
  }
  return obj.at(key);
}

int as_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) {
    throw ConfigError("config field '" + path + "': expected an integer");
  }
  return v.get<int>();
}

double as_num(const json& v, const std::string& path) {
  if (!v.is_number()) {
    throw ConfigError("config field '" + path + "': expected a number");
  }
  return v.get<double>();
}

std::string as_str(const json& v, const std::string& path) {
  if (!v.is_string()) {
    throw ConfigError("config field '" + path + "': expected a string");
  }
  return v.get<std::string>();
}

bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) {
    throw ConfigError("config field '" + path + "': expected a boolean");
  }
  return v.get<bool>();
}

int opt_int(const json& obj, const std::string& prefix, const char* key,
            int def) {
  if (!obj.is_object() || !obj.contains(key)) return def;
  return as_int(obj.at(key), joinp(prefix, key));
}

double opt_num(const json& obj, const std::string& prefix, const char* key,
               double def) {
  if (!obj.is_object() || !obj.contains(key)) return def;
  return as_num(obj.at(key), joinp(prefix, key));
}

std::string opt_str(const json& obj, const std::string& prefix,
                    const char* key, const std::string& def) {
  if (!obj.is_object() || !obj.contains(key)) return def;
  return as_str(obj.at(key), joinp(prefix, key));
}

std::vector<std::string> str_list(const json& v, const std::string& path) {
  if (!v.is_array()) {
    throw ConfigError("config field '" + path + "': expected an array");
  }
  std::vector<std::string> out;
  for (size_t i = 0; i < v.size(); ++i) {
    out.push_back(as_str(v[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_jsonl(const fs::path& p, const std::vector<ojson>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_text(p, text);
}

const std::vector<std::string> kKinds = {
    "vanilla",          "plain-ft",            "meta-only",
    "meta-curriculum-cls", "word-level-adaptive", "rmlnmt"};

CurriculumConfig::Strategy parse_strategy(const std::string& s,
                                          const std::string& path) {
  if (s == "token-budget") return CurriculumConfig::Strategy::kTokenBudget;
  if (s == "balanced") return CurriculumConfig::Strategy::kBalanced;
  throw ConfigError("config field '" + path +
                    "': expected 'token-budget' or 'balanced'");
}

MetaConfig::Order parse_order(const std::string& s, const std::string& path) {
  if (s == "first-order") return MetaConfig::Order::kFirstOrder;
  if (s == "second-order") return MetaConfig::Order::kSecondOrder;
  throw ConfigError("config field '" + path +
                    "': expected 'first-order' or 'second-order'");
}

}  // namespace

std::string hash_file(const fs::path& p) {
  return hex64(fnv1a64(read_text(p)));
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root: expected an object");

  ExperimentConfig c;

  const json& jc = need(j, "", "corpus");
  if (!jc.is_object()) throw ConfigError("config field 'corpus': expected an object");
  c.corpus.synthetic = jc.contains("synthetic")
                           ? as_bool(jc.at("synthetic"), "corpus.synthetic")
                           : !jc.contains("paths");
  if (jc.contains("synth")) {
    const json& js = jc.at("synth");
    if (!js.is_object()) throw ConfigError("config field 'corpus.synth': expected an object");
    c.corpus.synth.domains = str_list(need(js, "corpus.synth", "domains"),
                                      "corpus.synth.domains");
    c.corpus.synth.types_per_domain =
        opt_int(js, "corpus.synth", "types_per_domain", 80);
    c.corpus.synth.overlap = opt_num(js, "corpus.synth", "overlap", 0.3);
    c.corpus.synth.pairs_per_domain =
        opt_int(js, "corpus.synth", "pairs_per_domain", 500);
    c.corpus.synth.min_len = opt_int(js, "corpus.synth", "min_len", 4);
    c.corpus.synth.max_len = opt_int(js, "corpus.synth", "max_len", 12);
  }
  if (jc.contains("paths")) {
    const json& jp = jc.at("paths");
    if (!jp.is_object()) throw ConfigError("config field 'corpus.paths': expected an object");
    for (auto it = jp.begin(); it != jp.end(); ++it) {
      const std::string path = "corpus.paths." + it.key();
      c.corpus.paths[it.key()] = {as_str(need(*it, path, "src"), path + ".src"),
                                  as_str(need(*it, path, "tgt"), path + ".tgt")};
    }
  }
  c.corpus.vocab_cap = opt_int(jc, "corpus", "vocab_cap", 4096);
  c.corpus.max_tokens = opt_int(jc, "corpus", "max_tokens", 64);

  const json& jpart = need(j, "", "partition");
  c.partition.seen =
      str_list(need(jpart, "partition", "seen"), "partition.seen");
  if (jpart.is_object() && jpart.contains("unseen")) {
    c.partition.unseen = str_list(jpart.at("unseen"), "partition.unseen");
  }

  const json& jm = j.contains("model") ? j.at("model") : json::object();
  c.model.d_model = opt_int(jm, "model", "d_model", 32);
  c.model.n_heads = opt_int(jm, "model", "n_heads", 2);
  c.model.enc_layers = opt_int(jm, "model", "enc_layers", 1);
  c.model.dec_layers = opt_int(jm, "model", "dec_layers", 1);
  c.model.d_ff = opt_int(jm, "model", "d_ff", 48);
  c.model.epsilon = opt_num(jm, "model", "epsilon", 0.1);
  c.model.max_len = opt_int(jm, "model", "max_len", 96);

  const json& jcl = j.contains("classifier") ? j.at("classifier") : json::object();
  c.classifier.hidden = opt_int(jcl, "classifier", "hidden", 32);
  c.classifier.lr = opt_num(jcl, "classifier", "lr", 0.2);
  c.classifier.epochs = opt_int(jcl, "classifier", "epochs", 10);
  c.classifier.batch = opt_int(jcl, "classifier", "batch", 16);
  c.classifier.holdout = opt_num(jcl, "classifier", "holdout", 0.1);

  const json& jsp = j.contains("split") ? j.at("split") : json::object();
  c.split.n_tasks = opt_int(jsp, "split", "n_tasks", 8);
  c.split.support_tokens =
      opt_int(jsp, "split", "support_tokens", 8000);
  c.split.query_tokens = opt_int(jsp, "split", "query_tokens", 16000);
  c.split.strategy = opt_str(jsp, "split", "strategy", "token-budget");

  const json& jpre = j.contains("pretrain") ? j.at("pretrain") : json::object();
  c.pretrain.epochs = opt_int(jpre, "pretrain", "epochs", 3);
  c.pretrain.lr = opt_num(jpre, "pretrain", "lr", 0.1);
  c.pretrain.final_lr = opt_num(jpre, "pretrain", "final_lr", -1.0);
  c.pretrain.batch_pairs = opt_int(jpre, "pretrain", "batch_pairs", 8);

  const json& jme = j.contains("meta") ? j.at("meta") : json::object();
  c.meta.alpha = opt_num(jme, "meta", "alpha", 0.05);
  c.meta.beta = opt_num(jme, "meta", "beta", 0.02);
  c.meta.epochs = opt_int(jme, "meta", "epochs", 2);
  c.meta.order = opt_str(jme, "meta", "order", "first-order");

  const json& jft = j.contains("finetune") ? j.at("finetune") : json::object();
  c.finetune.strategy = opt_str(jft, "finetune", "strategy", "ft-specific");
  c.finetune.steps = opt_int(jft, "finetune", "steps", 30);
  c.finetune.lr = opt_num(jft, "finetune", "lr", 0.05);
  c.finetune.support_pairs = opt_int(jft, "finetune", "support_pairs", 24);

  const json& jev = j.contains("eval") ? j.at("eval") : json::object();
  c.eval.beam_size = opt_int(jev, "eval", "beam_size", 4);
  c.eval.max_length = opt_int(jev, "eval", "max_length", 24);
  c.eval.length_penalty = opt_num(jev, "eval", "length_penalty", 0.0);
  c.eval.max_sentences = opt_int(jev, "eval", "max_sentences", 40);

  const json& jb = need(j, "", "baselines");
  if (!jb.is_array() || jb.empty()) {
    throw ConfigError("config field 'baselines': expected a non-empty array");
  }
  for (size_t i = 0; i < jb.size(); ++i) {
    const std::string path = "baselines[" + std::to_string(i) + "]";
    BaselineSpec b;
    if (jb[i].is_string()) {
      b.kind = jb[i].get<std::string>();
    } else if (jb[i].is_object()) {
      b.kind = as_str(need(jb[i], path, "kind"), path + ".kind");
      if (jb[i].contains("widen_embeddings")) {
        b.widen_embeddings =
            as_bool(jb[i].at("widen_embeddings"), path + ".widen_embeddings");
      }
    } else {
      throw ConfigError("config field '" + path +
                        "': expected a string or an object");
    }
    c.baselines.push_back(std::move(b));
  }

  const json& jseed = need(j, "", "seed");
  if (!jseed.is_number_integer() || jseed.is_number_float() ||
      (jseed.is_number_integer() && !jseed.is_number_unsigned() &&
       jseed.get<long long>() < 0)) {
    throw ConfigError("config field 'seed': expected a non-negative integer");
  }
  c.seed = jseed.get<uint64_t>();
  c.output = opt_str(j, "", "output", "out");

  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

double PretrainSpec::lr_at(int epoch) const {
  if (final_lr < 0 || epochs <= 1) return lr;
  const double t = double(epoch) / double(epochs - 1);
  return lr + (final_lr - lr) * t;
}

void ExperimentConfig::validate() const {
  std::vector<std::string> corpus_domains;
  if (corpus.synthetic) {
    if (!corpus.paths.empty()) {
      throw ConfigError(
          "config field 'corpus': 'synthetic' and 'paths' are mutually "
          "exclusive");
    }
    SynthConfig sc;
    sc.domains = corpus.synth.domains;
    sc.types_per_domain = corpus.synth.types_per_domain;
    sc.overlap = corpus.synth.overlap;
    sc.pairs_per_domain = corpus.synth.pairs_per_domain;
    sc.min_len = corpus.synth.min_len;
    sc.max_len = corpus.synth.max_len;
    try {
      sc.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config field 'corpus.synth': ") +
                        e.what());
    }
    corpus_domains = corpus.synth.domains;
  } else {
    if (corpus.paths.empty()) {
      throw ConfigError(
          "config field 'corpus.paths': required when synthetic is false");
    }
    for (const auto& [d, _] : corpus.paths) corpus_domains.push_back(d);
  }
  if (corpus.vocab_cap < 8) {
    throw ConfigError("config field 'corpus.vocab_cap': must be at least 8");
  }
  if (corpus.max_tokens < 2) {
    throw ConfigError("config field 'corpus.max_tokens': must be at least 2");
  }

  if (partition.seen.empty()) {
    throw ConfigError("config field 'partition.seen': must not be empty");
  }
  auto check_dups = [](const std::vector<std::string>& v,
                       const std::string& path) {
    std::set<std::string> seen_names;
    for (const auto& d : v) {
      if (!seen_names.insert(d).second) {
        throw ConfigError("config field '" + path + "': duplicate domain '" +
                          d + "'");
      }
    }
  };
  check_dups(partition.seen, "partition.seen");
  check_dups(partition.unseen, "partition.unseen");

  const std::set<std::string> known(corpus_domains.begin(),
                                    corpus_domains.end());
  for (const auto& d : partition.seen) {
    if (!known.count(d)) {
      throw ConfigError("config field 'partition.seen': unknown domain '" + d +
                        "'");
    }
  }
  for (const auto& d : partition.unseen) {
    if (!known.count(d)) {
      throw ConfigError("config field 'partition.unseen': unknown domain '" +
                        d + "'");
    }
  }
  const std::set<std::string> seen_set(partition.seen.begin(),
                                       partition.seen.end());
  const std::set<std::string> unseen_set(partition.unseen.begin(),
                                         partition.unseen.end());
  for (const auto& d : corpus_domains) {
    const bool s = seen_set.count(d) > 0, u = unseen_set.count(d) > 0;
    if (s && u) {
      throw ConfigError("config field 'partition': domain '" + d +
                        "' appears in both seen and unseen");
    }
    if (!s && !u) {
      throw ConfigError("config field 'partition': domain '" + d +
                        "' is in neither seen nor unseen; every domain goes "
                        "in exactly one");
    }
  }
  if (!seen_set.count("general")) {
    throw ConfigError(
        "config field 'partition.seen': must include 'general', the "
        "classifier's reference domain");
  }

  {
    MixConfig mc;
    mc.vocab = corpus.vocab_cap;
    mc.domains = static_cast<int>(partition.seen.size());
    mc.epsilon = model.epsilon;
    mc.d_model = model.d_model;
    mc.n_heads = model.n_heads;
    mc.enc_layers = model.enc_layers;
    mc.dec_layers = model.dec_layers;
    mc.d_ff = model.d_ff;
    mc.max_len = model.max_len;
    try {
      mc.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config field 'model': ") + e.what());
    }
  }

  if (classifier.hidden < 1) {
    throw ConfigError("config field 'classifier.hidden': must be positive");
  }
  if (classifier.lr <= 0) {
    throw ConfigError("config field 'classifier.lr': must be positive");
  }
  if (classifier.epochs < 1) {
    throw ConfigError("config field 'classifier.epochs': must be positive");
  }
  if (classifier.batch < 1) {
    throw ConfigError("config field 'classifier.batch': must be positive");
  }
  if (classifier.holdout <= 0 || classifier.holdout >= 1) {
    throw ConfigError(
        "config field 'classifier.holdout': must lie strictly between 0 and "
        "1");
  }

  {
    CurriculumConfig cc;
    cc.n_tasks = split.n_tasks;
    cc.support_tokens = split.support_tokens;
    cc.query_tokens = split.query_tokens;
    cc.strategy = parse_strategy(split.strategy, "split.strategy");
    try {
      cc.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config field 'split': ") + e.what());
    }
  }

  if (pretrain.epochs < 0) {
    throw ConfigError("config field 'pretrain.epochs': must not be negative");
  }
  if (pretrain.lr <= 0) {
    throw ConfigError("config field 'pretrain.lr': must be positive");
  }
  if (pretrain.final_lr >= 0 && pretrain.final_lr > pretrain.lr) {
    throw ConfigError(
        "config field 'pretrain.final_lr': must not exceed pretrain.lr");
  }
  if (pretrain.batch_pairs < 1) {
    throw ConfigError("config field 'pretrain.batch_pairs': must be positive");
  }

  {
    MetaConfig mc;
    mc.alpha = meta.alpha;
    mc.beta = meta.beta;
    mc.epochs = meta.epochs;
    mc.order = parse_order(meta.order, "meta.order");
    try {
      mc.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config field 'meta': ") + e.what());
    }
  }

  try {
    parse_ft_strategy(finetune.strategy);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config field 'finetune.strategy': ") +
                      e.what());
  }
  if (finetune.steps < 0) {
    throw ConfigError("config field 'finetune.steps': must not be negative");
  }
  if (finetune.lr <= 0) {
    throw ConfigError("config field 'finetune.lr': must be positive");
  }
  if (finetune.support_pairs < 1) {
    throw ConfigError(
        "config field 'finetune.support_pairs': must be positive");
  }

  {
    BeamConfig bc;
    bc.beam_size = eval.beam_size;
    bc.max_length = eval.max_length;
    bc.length_penalty = eval.length_penalty;
    try {
      bc.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config field 'eval': ") + e.what());
    }
  }
  if (eval.max_sentences < 1) {
    throw ConfigError("config field 'eval.max_sentences': must be positive");
  }

  for (size_t i = 0; i < baselines.size(); ++i) {
    const std::string path = "baselines[" + std::to_string(i) + "]";
    const auto& b = baselines[i];
    if (std::find(kKinds.begin(), kKinds.end(), b.kind) == kKinds.end()) {
      std::string names;
      for (const auto& k : kKinds) names += (names.empty() ? "" : ", ") + k;
      throw ConfigError("config field '" + path + ".kind': unknown kind '" +
                        b.kind + "'; expected one of " + names);
    }
    if (b.widen_embeddings && Experiment::uses_mixing(b.kind)) {
      throw ConfigError("config field '" + path +
                        ".widen_embeddings': applies only to single-bank "
                        "systems");
    }
    for (size_t k = 0; k < i; ++k) {
      if (baselines[k].kind == b.kind) {
        throw ConfigError("config field '" + path + "': duplicate kind '" +
                          b.kind + "'");
      }
    }
  }

  if (corpus.synthetic) {
    const int minimum = finetune.support_pairs + eval.max_sentences + 1;
    if (corpus.synth.pairs_per_domain < minimum) {
      throw ConfigError(
          "config field 'corpus.synth.pairs_per_domain': needs at least " +
          std::to_string(minimum) +
          " to cover the support and test splits");
    }
  }
}

std::string ExperimentConfig::canonical_json() const {
  ojson j;
  ojson& jc = j["corpus"];
  jc["synthetic"] = corpus.synthetic;
  if (corpus.synthetic) {
    jc["synth"] = {{"domains", corpus.synth.domains},
                   {"types_per_domain", corpus.synth.types_per_domain},
                   {"overlap", corpus.synth.overlap},
                   {"pairs_per_domain", corpus.synth.pairs_per_domain},
                   {"min_len", corpus.synth.min_len},
                   {"max_len", corpus.synth.max_len}};
  } else {
    ojson jp = ojson::object();
    for (const auto& [d, sp] : corpus.paths) {
      jp[d] = {{"src", sp.first}, {"tgt", sp.second}};
    }
    jc["paths"] = jp;
  }
  jc["vocab_cap"] = corpus.vocab_cap;
  jc["max_tokens"] = corpus.max_tokens;
  j["partition"] = {{"seen", partition.seen}, {"unseen", partition.unseen}};
  j["model"] = {{"d_model", model.d_model},     {"n_heads", model.n_heads},
                {"enc_layers", model.enc_layers}, {"dec_layers", model.dec_layers},
                {"d_ff", model.d_ff},           {"epsilon", model.epsilon},
                {"max_len", model.max_len}};
  j["classifier"] = {{"hidden", classifier.hidden},
                     {"lr", classifier.lr},
                     {"epochs", classifier.epochs},
                     {"batch", classifier.batch},
                     {"holdout", classifier.holdout}};
  j["split"] = {{"n_tasks", split.n_tasks},
                {"support_tokens", split.support_tokens},
                {"query_tokens", split.query_tokens},
                {"strategy", split.strategy}};
  j["pretrain"] = {{"epochs", pretrain.epochs},
                   {"lr", pretrain.lr},
                   {"final_lr", pretrain.final_lr},
                   {"batch_pairs", pretrain.batch_pairs}};
  j["meta"] = {{"alpha", meta.alpha},
               {"beta", meta.beta},
               {"epochs", meta.epochs},
               {"order", meta.order}};
  j["finetune"] = {{"strategy", finetune.strategy},
                   {"steps", finetune.steps},
                   {"lr", finetune.lr},
                   {"support_pairs", finetune.support_pairs}};
  j["eval"] = {{"beam_size", eval.beam_size},
               {"max_length", eval.max_length},
               {"length_penalty", eval.length_penalty},
               {"max_sentences", eval.max_sentences}};
  ojson jb = ojson::array();
  for (const auto& b : baselines) {
    jb.push_back({{"kind", b.kind}, {"widen_embeddings", b.widen_embeddings}});
  }
  j["baselines"] = jb;
  // The output root is deliberately left out: where artifacts live does not
  // change what they contain.
  j["seed"] = seed;
  return j.dump();
}

std::string ExperimentConfig::hash() const {
  return hex64(fnv1a64(canonical_json()));
}

std::vector<std::string> ExperimentConfig::all_domains() const {
  std::vector<std::string> out = partition.seen;
  out.insert(out.end(), partition.unseen.begin(), partition.unseen.end());
  return out;
}

bool ExperimentConfig::is_seen(const std::string& domain) const {
  return std::find(partition.seen.begin(), partition.seen.end(), domain) !=
         partition.seen.end();
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

Experiment::Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const char* env = std::getenv("RML_ADAPT_OUT");
  root_ = (env != nullptr && *env != '\0') ? fs::path(env)
                                           : fs::path(cfg_.output);
  hash_ = cfg_.hash();
}

bool Experiment::uses_mixing(const std::string& kind) {
  return kind == "word-level-adaptive" || kind == "rmlnmt";
}

bool Experiment::uses_meta(const std::string& kind) {
  return kind == "meta-only" || kind == "meta-curriculum-cls" ||
         kind == "rmlnmt";
}

bool Experiment::uses_finetune(const std::string& kind) {
  return kind == "plain-ft" || kind == "meta-only" ||
         kind == "meta-curriculum-cls" || kind == "rmlnmt";
}

bool Experiment::uses_classifier_scores(const std::string& kind) {
  return kind == "meta-curriculum-cls" || kind == "rmlnmt";
}

const std::vector<std::string>& Experiment::subcommands() {
  static const std::vector<std::string> cmds = {
      "synth",        "ingest",   "train-classifier", "score",
      "split",        "pretrain-mix", "meta-train",   "finetune",
      "evaluate",     "robustness",   "report"};
  return cmds;
}

StageResult Experiment::run(const std::string& sub) {
  if (sub == "synth") return synth();
  if (sub == "ingest") return ingest();
  if (sub == "train-classifier") return train_classifier();
  if (sub == "score") return score();
  if (sub == "split") return split();
  if (sub == "pretrain-mix") return pretrain();
  if (sub == "meta-train") return meta_train_stage();
  if (sub == "finetune") return finetune();
  if (sub == "evaluate") return evaluate();
  if (sub == "robustness") return robustness();
  if (sub == "report") return report();
  std::string names;
  for (const auto& s : subcommands()) names += (names.empty() ? "" : ", ") + s;
  throw ConfigError("unknown subcommand '" + sub + "'; expected one of " +
                    names);
}

// ---------------------------------------------------------------------------
// Stamps: each stage records the config hash plus the fingerprints of what
// it read and wrote. A stage is current when all three still match.
// ---------------------------------------------------------------------------

fs::path Experiment::stamp_path(const std::string& stage) const {
  return root_ / "stamps" / (stage + ".json");
}

bool Experiment::up_to_date(const std::string& stage) const {
  const fs::path sp = stamp_path(stage);
  if (!fs::exists(sp)) return false;
  json j;
  try {
    j = json::parse(read_text(sp));
  } catch (...) {
    return false;
  }
  if (!j.is_object() || j.value("config_hash", "") != hash_) return false;
  for (const char* part : {"inputs", "outputs"}) {
    if (!j.contains(part) || !j.at(part).is_object()) return false;
    for (auto it = j.at(part).begin(); it != j.at(part).end(); ++it) {
      const fs::path p = root_ / fs::path(it.key());
      if (!fs::exists(p)) return false;
      try {
        if (hash_file(p) != it.value().get<std::string>()) return false;
      } catch (...) {
        return false;
      }
    }
  }
  return true;
}

void Experiment::write_stamp(const std::string& stage,
                             const std::vector<fs::path>& inputs,
                             const std::vector<fs::path>& outputs) const {
  ojson j;
  j["config_hash"] = hash_;
  for (const auto& [name, files] :
       {std::pair<const char*, const std::vector<fs::path>*>{"inputs", &inputs},
        {"outputs", &outputs}}) {
    ojson part = ojson::object();
    for (const auto& p : *files) {
      part[fs::relative(p, root_).generic_string()] = hash_file(p);
    }
    j[name] = part;
  }
  write_text(stamp_path(stage), j.dump(2) + "\n");
}

void Experiment::require_artifact(const fs::path& p,
                                  const std::string& producer) const {
  if (!fs::exists(p)) {
    throw DataError("missing artifact " +
                    fs::relative(p, root_).generic_string() + "; run '" +
                    producer + "' first");
  }
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

StageResult Experiment::synth() {
  if (!cfg_.corpus.synthetic) {
    throw ConfigError(
        "config field 'corpus': describes real files; run 'ingest' instead");
  }
  return corpus_stage(true);
}

StageResult Experiment::ingest() {
  if (cfg_.corpus.synthetic) {
    throw ConfigError(
        "config field 'corpus': describes a synthetic corpus; run 'synth' "
        "instead");
  }
  return corpus_stage(false);
}

StageResult Experiment::corpus_stage(bool from_synth) {
  if (up_to_date("corpus")) return {true, "corpus: up to date"};

  std::vector<fs::path> inputs, outputs;
  std::map<std::string, std::vector<RawPair>> pools;
  ojson ingest_stats = ojson::object();
  if (from_synth) {
    SynthConfig sc;
    sc.domains = cfg_.corpus.synth.domains;
    sc.types_per_domain = cfg_.corpus.synth.types_per_domain;
    sc.overlap = cfg_.corpus.synth.overlap;
    sc.pairs_per_domain = cfg_.corpus.synth.pairs_per_domain;
    sc.min_len = cfg_.corpus.synth.min_len;
    sc.max_len = cfg_.corpus.synth.max_len;
    pools = synthesize_corpus(sc, Rng::stream(cfg_.seed, "synth").next_u64());
  } else {
    for (const auto& [dom, sp] : cfg_.corpus.paths) {
      inputs.push_back(sp.first);
      inputs.push_back(sp.second);
      IngestStats st;
      pools[dom] = clean_pairs(load_parallel(sp.first, sp.second),
                               cfg_.corpus.max_tokens, &st);
      ingest_stats[dom] = {{"kept", st.kept},
                          {"dropped_duplicate", st.dropped_duplicate},
                          {"dropped_length", st.dropped_length},
                          {"dropped_empty", st.dropped_empty}};
    }
  }

  const fs::path cdir = root_ / "corpus";
  fs::create_directories(cdir);
  const int n_test = cfg_.eval.max_sentences;
  const int n_support = cfg_.finetune.support_pairs;

  ojson dom_counts = ojson::object();
  std::map<std::string, MetaSplit> splits;
  for (const auto& dom : cfg_.all_domains()) {
    auto it = pools.find(dom);
    if (it == pools.end()) {
      throw DataError("corpus is missing domain '" + dom + "'");
    }
    const long have = static_cast<long>(it->second.size());
    const long n_train = have - n_support - n_test;
    const long floor_train = cfg_.is_seen(dom) ? 1 : 0;
    if (n_train < floor_train) {
      throw DataError("domain '" + dom + "' holds " + std::to_string(have) +
                      " usable pairs but the split needs at least " +
                      std::to_string(n_support + n_test + floor_train));
    }
    Rng rng = Rng::stream(cfg_.seed, "split:" + dom);
    MetaSplit ms = make_meta_split(it->second, static_cast<int>(n_train),
                                   n_support, n_test, rng);
    for (const auto& [slice, pairs] :
         {std::pair<const char*, const std::vector<RawPair>*>{"train",
                                                              &ms.train},
          {"support", &ms.support},
          {"test", &ms.query}}) {
      const fs::path sp = cdir / (dom + "." + slice + ".src");
      const fs::path tp = cdir / (dom + "." + slice + ".tgt");
      write_parallel(sp, tp, *pairs);
      outputs.push_back(sp);
      outputs.push_back(tp);
    }
    dom_counts[dom] = {{"train", ms.train.size()},
                       {"support", ms.support.size()},
                       {"test", ms.query.size()}};
    splits[dom] = std::move(ms);
  }

  // The vocabulary covers the seen training pools plus every domain's
  // support set: adaptation data is visible at adaptation time, test data
  // never is.
  std::vector<const std::vector<RawPair>*> vsrc;
  for (const auto& dom : cfg_.partition.seen) vsrc.push_back(&splits[dom].train);
  for (const auto& dom : cfg_.all_domains()) vsrc.push_back(&splits[dom].support);
  Vocabulary v = Vocabulary::build(vsrc, cfg_.corpus.vocab_cap);
  const fs::path vpath = cdir / "vocab.txt";
  v.save(vpath);
  outputs.push_back(vpath);

  ojson manifest;
  manifest["config_hash"] = hash_;
  manifest["synthetic"] = from_synth;
  manifest["domains"] = dom_counts;
  manifest["vocab_size"] = v.size();
  if (!from_synth) manifest["ingest"] = ingest_stats;
  const fs::path mpath = cdir / "manifest.json";
  write_text(mpath, manifest.dump(2) + "\n");
  outputs.push_back(mpath);

  write_stamp("corpus", inputs, outputs);
  return {false, "corpus: " + std::to_string(pools.size()) +
                     " domains, vocab " + std::to_string(v.size())};
}

int Experiment::domain_index(const std::string& domain) const {
  const auto& s = cfg_.partition.seen;
  auto it = std::find(s.begin(), s.end(), domain);
  if (it != s.end()) return static_cast<int>(it - s.begin());
  // Unseen domains route through the general bank until adaptation says
  // otherwise.
  return static_cast<int>(std::find(s.begin(), s.end(), "general") -
                          s.begin());
}

std::vector<RawPair> Experiment::load_slice(const std::string& domain,
                                            const std::string& slice) const {
  const fs::path sp = root_ / "corpus" / (domain + "." + slice + ".src");
  require_artifact(sp, cfg_.corpus.synthetic ? "synth" : "ingest");
  return load_parallel(sp, root_ / "corpus" / (domain + "." + slice + ".tgt"));
}

Vocabulary Experiment::vocab() const {
  const fs::path vp = root_ / "corpus" / "vocab.txt";
  require_artifact(vp, cfg_.corpus.synthetic ? "synth" : "ingest");
  return Vocabulary::load(vp);
}

MixConfig Experiment::model_config(const BaselineSpec& b) const {
  MixConfig mc;
  mc.vocab = vocab().size();
  mc.domains = uses_mixing(b.kind)
                   ? static_cast<int>(cfg_.partition.seen.size())
                   : 1;
  mc.epsilon = cfg_.model.epsilon;
  const int widen =
      b.widen_embeddings
          ? static_cast<int>(std::ceil(
                std::sqrt(static_cast<double>(cfg_.partition.seen.size()))))
          : 1;
  mc.d_model = cfg_.model.d_model * widen;
  mc.d_ff = cfg_.model.d_ff * widen;
  mc.n_heads = cfg_.model.n_heads;
  mc.enc_layers = cfg_.model.enc_layers;
  mc.dec_layers = cfg_.model.dec_layers;
  mc.max_len = cfg_.model.max_len;
  mc.validate();
  return mc;
}

// ---------------------------------------------------------------------------
// Classifier and scores
// ---------------------------------------------------------------------------

StageResult Experiment::train_classifier() {
  if (up_to_date("train-classifier")) {
    return {true, "train-classifier: up to date"};
  }
  std::vector<fs::path> inputs, outputs;
  const Vocabulary v = vocab();
  inputs.push_back(root_ / "corpus" / "vocab.txt");

  std::vector<ClassifierExample> data;
  for (size_t li = 0; li < cfg_.partition.seen.size(); ++li) {
    const std::string& dom = cfg_.partition.seen[li];
    for (const auto& p : load_slice(dom, "train")) {
      data.push_back({v.encode(p.src), static_cast<int>(li)});
    }
    inputs.push_back(root_ / "corpus" / (dom + ".train.src"));
    inputs.push_back(root_ / "corpus" / (dom + ".train.tgt"));
  }

  ClassifierConfig cc;
  cc.hidden = cfg_.classifier.hidden;
  cc.lr = cfg_.classifier.lr;
  cc.epochs = cfg_.classifier.epochs;
  cc.batch = cfg_.classifier.batch;
  cc.holdout = cfg_.classifier.holdout;
  ClassifierReport rep;
  DomainClassifier cls = DomainClassifier::train(
      data, cfg_.partition.seen, v.size(), cc,
      Rng::stream(cfg_.seed, "classifier").next_u64(), &rep);

  Checkpoint ck = cls.to_checkpoint();
  ck.meta["config_hash"] = hash_;
  const fs::path mp = root_ / "classifier" / "model.ckpt";
  fs::create_directories(mp.parent_path());
  save_checkpoint(mp, ck);
  outputs.push_back(mp);

  ojson rj;
  rj["config_hash"] = hash_;
  rj["labels"] = cfg_.partition.seen;
  rj["holdout_accuracy"] = rep.holdout_accuracy;
  rj["train_n"] = rep.train_n;
  rj["holdout_n"] = rep.holdout_n;
  rj["epoch_loss"] = rep.epoch_loss;
  const fs::path rp = root_ / "classifier" / "report.json";
  write_text(rp, rj.dump(2) + "\n");
  outputs.push_back(rp);

  write_stamp("train-classifier", inputs, outputs);
  return {false, "train-classifier: holdout accuracy " +
                     fmt("%.3f", rep.holdout_accuracy)};
}

StageResult Experiment::score() {
  if (up_to_date("score")) return {true, "score: up to date"};
  std::vector<fs::path> inputs, outputs;
  const fs::path cp = root_ / "classifier" / "model.ckpt";
  require_artifact(cp, "train-classifier");
  inputs.push_back(cp);
  const Vocabulary v = vocab();
  inputs.push_back(root_ / "corpus" / "vocab.txt");
  DomainClassifier cls = DomainClassifier::from_checkpoint(load_checkpoint(cp));

  std::string scored, uniform;
  for (const auto& dom : cfg_.partition.seen) {
    for (const auto& p : load_slice(dom, "train")) {
      const std::string sent = join_tokens(p.src);
      scored += fmt("%.6f", cls.general_score(v.encode(p.src))) + "\t" + dom +
                "\t" + sent + "\n";
      uniform += "0.500000\t" + dom + "\t" + sent + "\n";
    }
    inputs.push_back(root_ / "corpus" / (dom + ".train.src"));
  }
  const fs::path sp = root_ / "scores" / "classifier.tsv";
  const fs::path up = root_ / "scores" / "uniform.tsv";
  write_text(sp, scored);
  write_text(up, uniform);
  outputs.push_back(sp);
  outputs.push_back(up);

  write_stamp("score", inputs, outputs);
  return {false, "score: wrote classifier and uniform score files"};
}

// ---------------------------------------------------------------------------
// Curriculum split
// ---------------------------------------------------------------------------

namespace {

// Reads a score file back into the curriculum pool, re-attaching targets
// from the aligned training slices.
std::vector<ScoredPair> read_scored_pool(
    const fs::path& tsv, const std::vector<std::string>& seen,
    const std::function<std::vector<RawPair>(const std::string&)>& train_of) {
  std::ifstream in(tsv);
  if (!in) throw DataError("cannot read " + tsv.string());
  std::vector<ScoredPair> pool;
  std::string line;
  size_t lineno = 0;
  size_t dom_i = 0, row = 0;
  std::vector<RawPair> train;
  auto advance_domain = [&] {
    while (dom_i < seen.size()) {
      train = train_of(seen[dom_i]);
      if (row < train.size()) return;
      ++dom_i;
      row = 0;
    }
  };
  advance_domain();
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto diag = [&](const std::string& msg) {
      return DataError(tsv.string() + ":" + std::to_string(lineno) + ": " +
                       msg);
    };
    const size_t t1 = line.find('\t');
    const size_t t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw diag("expected score<TAB>domain<TAB>sentence");
    double sc;
    try {
      sc = std::stod(line.substr(0, t1));
    } catch (...) {
      throw diag("bad score '" + line.substr(0, t1) + "'");
    }
    const std::string dom = line.substr(t1 + 1, t2 - t1 - 1);
    const std::string sent = line.substr(t2 + 1);
    if (dom_i >= seen.size()) throw diag("more scores than training pairs");
    if (dom != seen[dom_i] || join_tokens(train[row].src) != sent) {
      throw diag("row does not match the training slice; rerun 'score'");
    }
    pool.push_back({train[row], sc, dom});
    ++row;
    advance_domain();
  }
  if (dom_i < seen.size()) {
    throw DataError(tsv.string() + ": fewer scores than training pairs; rerun 'score'");
  }
  return pool;
}

}  // namespace

StageResult Experiment::split() {
  if (up_to_date("split")) return {true, "split: up to date"};
  std::vector<fs::path> inputs, outputs;
  const fs::path cls_tsv = root_ / "scores" / "classifier.tsv";
  const fs::path uni_tsv = root_ / "scores" / "uniform.tsv";
  require_artifact(cls_tsv, "score");
  require_artifact(uni_tsv, "score");
  inputs.push_back(cls_tsv);
  inputs.push_back(uni_tsv);
  for (const auto& dom : cfg_.partition.seen) {
    inputs.push_back(root_ / "corpus" / (dom + ".train.src"));
    inputs.push_back(root_ / "corpus" / (dom + ".train.tgt"));
  }

  std::map<std::string, std::vector<RawPair>> cache;
  auto train_of = [&](const std::string& d) {
    auto it = cache.find(d);
    if (it == cache.end()) it = cache.emplace(d, load_slice(d, "train")).first;
    return it->second;
  };

  CurriculumConfig cc;
  cc.n_tasks = cfg_.split.n_tasks;
  cc.support_tokens = cfg_.split.support_tokens;
  cc.query_tokens = cfg_.split.query_tokens;
  cc.strategy = parse_strategy(cfg_.split.strategy, "split.strategy");

  std::string warnings;
  size_t n_tasks = 0;
  for (const auto& [name, tsv] :
       {std::pair<const char*, const fs::path*>{"classifier", &cls_tsv},
        {"uniform", &uni_tsv}}) {
    CurriculumResult cur = build_curriculum(
        read_scored_pool(*tsv, cfg_.partition.seen, train_of), cc);
    const fs::path out = root_ / "tasks" / (std::string(name) + ".tsv");
    fs::create_directories(out.parent_path());
    write_task_manifest(out, cur);
    outputs.push_back(out);
    for (const auto& w : cur.warnings) {
      warnings += std::string(name) + ": " + w + "\n";
    }
    n_tasks = cur.tasks.size();
  }
  const fs::path wp = root_ / "tasks" / "warnings.txt";
  write_text(wp, warnings);
  outputs.push_back(wp);

  write_stamp("split", inputs, outputs);
  return {false, "split: " + std::to_string(n_tasks) + " tasks per schedule"};
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

ParamSet Experiment::load_params(const fs::path& ckpt,
                                 const MixConfig& mc) const {
  Checkpoint ck = load_checkpoint(ckpt);
  const std::string rel = fs::relative(ckpt, root_).generic_string();
  if (ck.kind != "mix-model") {
    throw DataError(rel + ": expected a mix-model checkpoint, found '" +
                    ck.kind + "'");
  }
  if (ck.meta.value("config_hash", "") != hash_) {
    throw DataError(rel +
                    " was produced by a different config; rerun the stage "
                    "that wrote it");
  }
  const auto schema = build_schema(mc);
  if (ck.tensors.size() != schema.size()) {
    throw DataError(rel + ": parameter count does not match the model");
  }
  ParamSet params;
  for (size_t i = 0; i < schema.size(); ++i) {
    const auto& [name, t] = ck.tensors[i];
    if (name != schema[i].name || t.rows() != schema[i].rows ||
        t.cols() != schema[i].cols) {
      throw DataError(rel + ": tensor '" + name +
                      "' does not match the model schema");
    }
    params.push_back(t);
  }
  return params;
}

void Experiment::save_params(const fs::path& ckpt, const MixConfig& mc,
                             const std::string& stage_name,
                             const ParamSet& params) const {
  Checkpoint ck;
  ck.kind = "mix-model";
  ck.meta["config_hash"] = hash_;
  ck.meta["stage"] = stage_name;
  ck.meta["model"] = {{"vocab", mc.vocab},       {"domains", mc.domains},
                      {"epsilon", mc.epsilon},   {"d_model", mc.d_model},
                      {"n_heads", mc.n_heads},   {"enc_layers", mc.enc_layers},
                      {"dec_layers", mc.dec_layers}, {"d_ff", mc.d_ff},
                      {"max_len", mc.max_len}};
  const auto schema = build_schema(mc);
  for (size_t i = 0; i < schema.size(); ++i) {
    ck.tensors.emplace_back(schema[i].name, params[i]);
  }
  fs::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, ck);
}

fs::path Experiment::base_model_path(const BaselineSpec& b) const {
  return root_ / "models" / b.kind /
         (uses_meta(b.kind) ? "meta.ckpt" : "pretrain.ckpt");
}

fs::path Experiment::ft_model_path(const BaselineSpec& b,
                                   const std::string& domain) const {
  const FtStrategy s = parse_ft_strategy(cfg_.finetune.strategy);
  std::string key;
  switch (s) {
    case FtStrategy::kSpecific: key = domain; break;
    case FtStrategy::kSeen: key = cfg_.is_seen(domain) ? "seen" : ""; break;
    case FtStrategy::kUnseen: key = cfg_.is_seen(domain) ? "" : "unseen"; break;
    case FtStrategy::kAll: key = "all"; break;
  }
  if (key.empty()) return base_model_path(b);
  return root_ / "models" / b.kind / ("ft_" + key + ".ckpt");
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

StageResult Experiment::pretrain() {
  const Vocabulary v = vocab();
  std::vector<std::string> notes;
  bool all_skipped = true;
  for (const auto& b : cfg_.baselines) {
    const std::string stage = "pretrain." + b.kind;
    if (up_to_date(stage)) {
      notes.push_back(b.kind + ": up to date");
      continue;
    }
    all_skipped = false;

    std::vector<fs::path> inputs, outputs;
    inputs.push_back(root_ / "corpus" / "vocab.txt");
    const MixConfig mc = model_config(b);
    MixModel model(mc);

    // Meta systems without domain mixing start from a general-domain model;
    // the episodic loop, not pretraining, is what exposes them to the other
    // domains. Every other system pretrains on all seen pools.
    std::vector<std::string> pool = cfg_.partition.seen;
    if (uses_meta(b.kind) && !uses_mixing(b.kind)) {
      const auto& s = cfg_.partition.seen;
      if (std::find(s.begin(), s.end(), "general") == s.end()) {
        throw DataError("baseline '" + b.kind +
                        "' pretrains on the general pool, but 'general' is "
                        "not a seen domain");
      }
      pool = {"general"};
    }
    std::vector<SentencePair> pairs;
    for (const auto& dom : pool) {
      const int label = uses_mixing(b.kind) ? domain_index(dom) : 0;
      for (const auto& p : load_slice(dom, "train")) {
        pairs.push_back(encode_pair(v, p, label));
      }
      inputs.push_back(root_ / "corpus" / (dom + ".train.src"));
      inputs.push_back(root_ / "corpus" / (dom + ".train.tgt"));
    }
    if (pairs.empty()) throw DataError("no training pairs for pretraining");

    ParamSet params =
        init_params(mc, Rng::stream(cfg_.seed, "init:" + b.kind).next_u64());
    Rng shuffler = Rng::stream(cfg_.seed, "pretrain:" + b.kind);
    std::vector<ojson> log;
    double last = 0.0;
    for (int epoch = 0; epoch < cfg_.pretrain.epochs; ++epoch) {
      shuffler.shuffle(pairs);
      double tot = 0.0, gen = 0.0, mix = 0.0;
      size_t counted = 0;
      ParamSet grads;
      for (size_t at = 0; at < pairs.size();
           at += static_cast<size_t>(cfg_.pretrain.batch_pairs)) {
        const size_t hi = std::min(
            pairs.size(), at + static_cast<size_t>(cfg_.pretrain.batch_pairs));
        const std::vector<SentencePair> batch(pairs.begin() + at,
                                              pairs.begin() + hi);
        const auto lv = model.eval_loss_grad(params, batch, grads);
        apply_sgd(params, grads, cfg_.pretrain.lr_at(epoch));
        const size_t n = hi - at;
        tot += lv.total * n;
        gen += lv.gen * n;
        mix += lv.mix * n;
        counted += n;
      }
      last = tot / counted;
      log.push_back({{"epoch", epoch},
                     {"loss", tot / counted},
                     {"gen", gen / counted},
                     {"mix", mix / counted}});
    }
    model.check_params(params);

    const fs::path mp = root_ / "models" / b.kind / "pretrain.ckpt";
    save_params(mp, mc, "pretrain", params);
    outputs.push_back(mp);
    const fs::path lp = root_ / "models" / b.kind / "pretrain_log.jsonl";
    write_jsonl(lp, log);
    outputs.push_back(lp);

    write_stamp(stage, inputs, outputs);
    notes.push_back(b.kind + ": " + std::to_string(cfg_.pretrain.epochs) +
                    " epochs, final loss " + fmt("%.4f", last));
  }
  std::string msg = "pretrain-mix: ";
  for (size_t i = 0; i < notes.size(); ++i) {
    msg += (i ? "; " : "") + notes[i];
  }
  return {all_skipped, msg};
}

// ---------------------------------------------------------------------------
// Meta-training
// ---------------------------------------------------------------------------

StageResult Experiment::meta_train_stage() {
  const Vocabulary v = vocab();
  std::vector<std::string> notes;
  bool all_skipped = true;
  for (const auto& b : cfg_.baselines) {
    if (!uses_meta(b.kind)) {
      notes.push_back(b.kind + ": not applicable");
      continue;
    }
    const std::string stage = "meta." + b.kind;
    if (up_to_date(stage)) {
      notes.push_back(b.kind + ": up to date");
      continue;
    }
    all_skipped = false;

    std::vector<fs::path> inputs, outputs;
    const fs::path pre = root_ / "models" / b.kind / "pretrain.ckpt";
    require_artifact(pre, "pretrain-mix");
    inputs.push_back(pre);
    const fs::path manifest =
        root_ / "tasks" /
        (uses_classifier_scores(b.kind) ? "classifier.tsv" : "uniform.tsv");
    require_artifact(manifest, "split");
    inputs.push_back(manifest);
    inputs.push_back(root_ / "corpus" / "vocab.txt");

    const MixConfig mc = model_config(b);
    MixModel model(mc);
    ParamSet theta = load_params(pre, mc);

    std::vector<std::unique_ptr<ModelTask>> tasks;
    std::vector<AdaptationTask*> ptrs;
    for (const auto& mt : load_task_manifest(manifest)) {
      auto enc = [&](const std::vector<ScoredPair>& sps) {
        std::vector<SentencePair> out;
        for (const auto& sp : sps) {
          const int label =
              uses_mixing(b.kind) ? domain_index(sp.domain) : 0;
          out.push_back(encode_pair(v, sp.pair, label));
        }
        return out;
      };
      auto s = enc(mt.support);
      auto q = enc(mt.query);
      if (s.empty() || q.empty()) continue;
      tasks.push_back(std::make_unique<ModelTask>(model, std::move(s),
                                                  std::move(q)));
      ptrs.push_back(tasks.back().get());
    }
    if (ptrs.empty()) {
      throw DataError("task manifest " +
                      fs::relative(manifest, root_).generic_string() +
                      " yields no usable tasks");
    }

    MetaConfig mcfg;
    mcfg.alpha = cfg_.meta.alpha;
    mcfg.beta = cfg_.meta.beta;
    mcfg.epochs = cfg_.meta.epochs;
    mcfg.order = parse_order(cfg_.meta.order, "meta.order");

    std::vector<fs::path> epoch_ckpts;
    auto on_epoch = [&](int epoch, const ParamSet& p) {
      const fs::path ep = root_ / "models" / b.kind /
                          ("meta_e" + std::to_string(epoch + 1) + ".ckpt");
      save_params(ep, mc, "meta_e" + std::to_string(epoch + 1), p);
      epoch_ckpts.push_back(ep);
    };
    MetaTrainResult res = meta_train(ptrs, std::move(theta), mcfg, on_epoch);

    const fs::path mp = root_ / "models" / b.kind / "meta.ckpt";
    save_params(mp, mc, "meta", res.params);
    outputs.push_back(mp);
    for (const auto& ep : epoch_ckpts) outputs.push_back(ep);
    const fs::path lp = root_ / "models" / b.kind / "meta_log.jsonl";
    write_meta_log(lp, res.log);
    outputs.push_back(lp);

    write_stamp(stage, inputs, outputs);
    const double q_last =
        res.log.empty() ? 0.0
                        : res.log.back().query_loss_sentence +
                              res.log.back().query_loss_word;
    notes.push_back(b.kind + ": " + std::to_string(ptrs.size()) +
                    " tasks, final query loss " + fmt("%.4f", q_last));
  }
  std::string msg = "meta-train: ";
  for (size_t i = 0; i < notes.size(); ++i) msg += (i ? "; " : "") + notes[i];
  return {all_skipped, msg};
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

StageResult Experiment::finetune() {
  const Vocabulary v = vocab();
  const FtStrategy strat = parse_ft_strategy(cfg_.finetune.strategy);
  std::vector<std::string> notes;
  bool all_skipped = true;
  for (const auto& b : cfg_.baselines) {
    if (!uses_finetune(b.kind)) {
      notes.push_back(b.kind + ": not applicable");
      continue;
    }
    const std::string stage = "finetune." + b.kind;
    if (up_to_date(stage)) {
      notes.push_back(b.kind + ": up to date");
      continue;
    }
    all_skipped = false;

    std::vector<fs::path> inputs, outputs;
    const fs::path base = base_model_path(b);
    require_artifact(base, uses_meta(b.kind) ? "meta-train" : "pretrain-mix");
    inputs.push_back(base);
    inputs.push_back(root_ / "corpus" / "vocab.txt");

    const MixConfig mc = model_config(b);
    MixModel model(mc);
    const ParamSet theta = load_params(base, mc);

    std::map<std::string, std::vector<SentencePair>> support_by_domain;
    for (const auto& dom : cfg_.all_domains()) {
      const int label = uses_mixing(b.kind) ? domain_index(dom) : 0;
      support_by_domain[dom] =
          encode_pairs(v, load_slice(dom, "support"), label);
      inputs.push_back(root_ / "corpus" / (dom + ".support.src"));
      inputs.push_back(root_ / "corpus" / (dom + ".support.tgt"));
    }
    const std::set<std::string> seen_set(cfg_.partition.seen.begin(),
                                         cfg_.partition.seen.end());
    std::vector<ojson> log;
    for (const auto& [key, pairs] :
         finetune_corpora(support_by_domain, seen_set, strat)) {
      ModelTask task(model, pairs, pairs);
      const double before = task.support_loss(theta, nullptr).total;
      ParamSet adapted =
          descend(task, theta, cfg_.finetune.lr, cfg_.finetune.steps);
      const double after = task.support_loss(adapted, nullptr).total;
      const fs::path fp = root_ / "models" / b.kind / ("ft_" + key + ".ckpt");
      save_params(fp, mc, "ft_" + key, adapted);
      outputs.push_back(fp);
      log.push_back({{"key", key},
                     {"pairs", pairs.size()},
                     {"steps", cfg_.finetune.steps},
                     {"loss_before", before},
                     {"loss_after", after}});
    }
    const fs::path lp = root_ / "models" / b.kind / "ft_log.jsonl";
    write_jsonl(lp, log);
    outputs.push_back(lp);

    write_stamp(stage, inputs, outputs);
    notes.push_back(b.kind + ": " + std::to_string(log.size()) +
                    " adapted model(s)");
  }
  std::string msg = "finetune: ";
  for (size_t i = 0; i < notes.size(); ++i) msg += (i ? "; " : "") + notes[i];
  return {all_skipped, msg};
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

StageResult Experiment::evaluate() {
  const Vocabulary v = vocab();
  BeamConfig bc;
  bc.beam_size = cfg_.eval.beam_size;
  bc.max_length = cfg_.eval.max_length;
  bc.length_penalty = cfg_.eval.length_penalty;

  std::vector<std::string> notes;
  bool all_skipped = true;
  for (const auto& b : cfg_.baselines) {
    const std::string stage = "evaluate." + b.kind;
    if (up_to_date(stage)) {
      notes.push_back(b.kind + ": up to date");
      continue;
    }
    all_skipped = false;

    std::vector<fs::path> inputs, outputs;
    inputs.push_back(root_ / "corpus" / "vocab.txt");
    const MixConfig mc = model_config(b);
    MixModel model(mc);

    std::vector<std::pair<std::string, fs::path>> stages;
    const fs::path pre = root_ / "models" / b.kind / "pretrain.ckpt";
    require_artifact(pre, "pretrain-mix");
    stages.emplace_back("pretrain", pre);
    if (uses_meta(b.kind)) {
      const fs::path mp = root_ / "models" / b.kind / "meta.ckpt";
      require_artifact(mp, "meta-train");
      stages.emplace_back("meta", mp);
    }
    if (uses_finetune(b.kind)) stages.emplace_back("ft", fs::path());

    std::map<std::string, ParamSet> cache;
    auto params_at = [&](const fs::path& p) -> const ParamSet& {
      const std::string key = p.string();
      auto it = cache.find(key);
      if (it == cache.end()) it = cache.emplace(key, load_params(p, mc)).first;
      return it->second;
    };

    std::vector<ojson> rows;
    for (const auto& [stage_name, fixed_path] : stages) {
      for (const auto& dom : cfg_.all_domains()) {
        fs::path mp = fixed_path;
        if (stage_name == "ft") {
          mp = ft_model_path(b, dom);
          require_artifact(mp, "finetune");
        }
        if (std::find(inputs.begin(), inputs.end(), mp) == inputs.end()) {
          inputs.push_back(mp);
        }
        const int label = uses_mixing(b.kind) ? domain_index(dom) : 0;
        const auto test = load_slice(dom, "test");
        const auto enc = encode_pairs(v, test, label);
        const auto hyps = translate_corpus(model, params_at(mp), enc, v, bc);
        std::vector<std::string> refs;
        refs.reserve(test.size());
        for (const auto& p : test) refs.push_back(join_tokens(p.tgt));
        rows.push_back({{"model", stage_name},
                        {"domain", dom},
                        {"group", cfg_.is_seen(dom) ? "seen" : "unseen"},
                        {"bleu", bleu(hyps, refs)},
                        {"chrf", chrf(hyps, refs)},
                        {"n_sentences", test.size()}});
      }
    }
    for (const auto& dom : cfg_.all_domains()) {
      inputs.push_back(root_ / "corpus" / (dom + ".test.src"));
      inputs.push_back(root_ / "corpus" / (dom + ".test.tgt"));
    }

    ojson rj;
    rj["config_hash"] = hash_;
    rj["baseline"] = b.kind;
    rj["rows"] = rows;
    const fs::path jp = root_ / "eval" / b.kind / "results.json";
    write_text(jp, rj.dump(2) + "\n");
    outputs.push_back(jp);
    const fs::path lp = root_ / "eval" / b.kind / "results.jsonl";
    write_jsonl(lp, rows);
    outputs.push_back(lp);

    write_stamp(stage, inputs, outputs);
    notes.push_back(b.kind + ": " + std::to_string(rows.size()) + " rows");
  }
  std::string msg = "evaluate: ";
  for (size_t i = 0; i < notes.size(); ++i) msg += (i ? "; " : "") + notes[i];
  return {all_skipped, msg};
}

// ---------------------------------------------------------------------------
// Robustness
// ---------------------------------------------------------------------------

StageResult Experiment::robustness() {
  const FtStrategy strat = parse_ft_strategy(cfg_.finetune.strategy);
  const Vocabulary v = vocab();
  BeamConfig bc;
  bc.beam_size = cfg_.eval.beam_size;
  bc.max_length = cfg_.eval.max_length;
  bc.length_penalty = cfg_.eval.length_penalty;
  const std::vector<std::string> domains = cfg_.all_domains();
  const int k = static_cast<int>(domains.size());

  // Every matrix is measured against the same reference: the unadapted
  // plain transformer, taken from a 'vanilla' baseline if one is configured
  // and otherwise from 'plain-ft' (whose pretrained model is identical in
  // role). Mixing systems keep their usual per-domain routing; the plain
  // reference has a single bank.
  const BaselineSpec* ref = nullptr;
  for (const auto& cand : cfg_.baselines) {
    if (cand.kind == "vanilla") ref = &cand;
  }
  if (!ref) {
    for (const auto& cand : cfg_.baselines) {
      if (cand.kind == "plain-ft") ref = &cand;
    }
  }

  std::vector<std::vector<RawPair>> tests;
  std::vector<std::vector<std::string>> refs;
  std::vector<double> baseline;  // decoded once, shared by every matrix
  fs::path ref_ckpt;
  auto prepare_reference = [&] {
    if (!baseline.empty()) return;
    if (!ref) {
      throw ConfigError(
          "robustness needs a 'vanilla' or 'plain-ft' baseline to supply "
          "the reference model");
    }
    tests.resize(k);
    refs.resize(k);
    for (int i = 0; i < k; ++i) {
      tests[i] = load_slice(domains[i], "test");
      for (const auto& p : tests[i]) refs[i].push_back(join_tokens(p.tgt));
    }
    ref_ckpt = root_ / "models" / ref->kind / "pretrain.ckpt";
    require_artifact(ref_ckpt, "pretrain-mix");
    const MixConfig rmc = model_config(*ref);
    MixModel rmodel(rmc);
    const ParamSet rparams = load_params(ref_ckpt, rmc);
    baseline.resize(k);
    for (int i = 0; i < k; ++i) {
      const auto enc = encode_pairs(v, tests[i], 0);
      baseline[i] =
          bleu(translate_corpus(rmodel, rparams, enc, v, bc), refs[i]);
    }
  };

  std::vector<std::string> notes;
  bool all_skipped = true;
  for (const auto& b : cfg_.baselines) {
    if (!uses_finetune(b.kind) || strat != FtStrategy::kSpecific) {
      notes.push_back(b.kind + ": not applicable");
      continue;
    }
    const std::string stage = "robustness." + b.kind;
    if (up_to_date(stage)) {
      notes.push_back(b.kind + ": up to date");
      continue;
    }
    all_skipped = false;
    prepare_reference();

    std::vector<fs::path> inputs, outputs;
    inputs.push_back(root_ / "corpus" / "vocab.txt");
    inputs.push_back(ref_ckpt);
    for (int i = 0; i < k; ++i) {
      inputs.push_back(root_ / "corpus" / (domains[i] + ".test.src"));
      inputs.push_back(root_ / "corpus" / (domains[i] + ".test.tgt"));
    }
    const MixConfig mc = model_config(b);
    MixModel model(mc);

    // Row J: the model fine-tuned toward domain J, decoding every test
    // domain i under i's own routing, so off-diagonal cells expose what
    // fine-tuning did to the rest of the system.
    Tensor cells(k, k);
    for (int J = 0; J < k; ++J) {
      const fs::path fp =
          root_ / "models" / b.kind / ("ft_" + domains[J] + ".ckpt");
      require_artifact(fp, "finetune");
      inputs.push_back(fp);
      const ParamSet pj = load_params(fp, mc);
      for (int i = 0; i < k; ++i) {
        const int label = uses_mixing(b.kind) ? domain_index(domains[i]) : 0;
        const auto enc = encode_pairs(v, tests[i], label);
        cells.at(J, i) = bleu(translate_corpus(model, pj, enc, v, bc), refs[i]);
      }
    }
    const RobustnessMatrix m = build_robustness(domains, cells, baseline);

    ojson rj;
    rj["config_hash"] = hash_;
    rj["baseline_kind"] = b.kind;
    rj["reference"] = ref->kind;
    rj["domains"] = m.domains;
    ojson grid = ojson::array();
    for (int J = 0; J < k; ++J) {
      ojson row = ojson::array();
      for (int i = 0; i < k; ++i) row.push_back(m.cells.at(J, i));
      grid.push_back(row);
    }
    rj["cells"] = grid;
    rj["unadapted"] = m.baseline;
    rj["avg_diff"] = m.avg_diff;
    const fs::path jp = root_ / "robustness" / b.kind / "matrix.json";
    write_text(jp, rj.dump(2) + "\n");
    outputs.push_back(jp);
    const fs::path tp = root_ / "robustness" / b.kind / "table.txt";
    write_text(tp, format_robustness(m));
    outputs.push_back(tp);

    write_stamp(stage, inputs, outputs);
    notes.push_back(b.kind + ": avg_diff " + fmt("%.3f", m.avg_diff));
  }
  std::string msg = "robustness: ";
  for (size_t i = 0; i < notes.size(); ++i) msg += (i ? "; " : "") + notes[i];
  return {all_skipped, msg};
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

StageResult Experiment::report() {
  if (up_to_date("report")) return {true, "report: up to date"};
  std::vector<fs::path> inputs, outputs;

  auto load_stamped = [&](const fs::path& p,
                          const std::string& producer) -> json {
    require_artifact(p, producer);
    inputs.push_back(p);
    json j = json::parse(read_text(p));
    const std::string h = j.value("config_hash", "");
    if (h != hash_) {
      throw DataError("report refuses to mix artifacts: " +
                      fs::relative(p, root_).generic_string() +
                      " was produced by config " +
                      (h.empty() ? "<unknown>" : h) +
                      " but the current config hashes to " + hash_);
    }
    return j;
  };

  load_stamped(root_ / "corpus" / "manifest.json",
               cfg_.corpus.synthetic ? "synth" : "ingest");

  // Domain columns run unseen first, then seen.
  std::vector<std::string> columns = cfg_.partition.unseen;
  columns.insert(columns.end(), cfg_.partition.seen.begin(),
                 cfg_.partition.seen.end());

  ojson table = ojson::array();
  ojson detail = ojson::array();
  ojson robust = ojson::object();
  for (const auto& b : cfg_.baselines) {
    const json ev =
        load_stamped(root_ / "eval" / b.kind / "results.json", "evaluate");
    const std::string final_stage = uses_finetune(b.kind) ? "ft"
                                    : uses_meta(b.kind)   ? "meta"
                                                          : "pretrain";
    std::map<std::string, std::pair<double, double>> cells;
    for (const auto& row : ev.at("rows")) {
      ojson drow = {{"baseline", b.kind},
                    {"model", row.at("model").get<std::string>()},
                    {"domain", row.at("domain").get<std::string>()},
                    {"group", row.at("group").get<std::string>()},
                    {"bleu", row.at("bleu").get<double>()},
                    {"chrf", row.at("chrf").get<double>()},
                    {"n_sentences", row.at("n_sentences").get<long>()}};
      detail.push_back(drow);
      if (row.at("model").get<std::string>() == final_stage) {
        cells[row.at("domain").get<std::string>()] = {
            row.at("bleu").get<double>(), row.at("chrf").get<double>()};
      }
    }
    for (const auto& dom : columns) {
      if (!cells.count(dom)) {
        throw DataError("eval results for '" + b.kind +
                        "' lack domain '" + dom + "'; rerun 'evaluate'");
      }
    }
    auto mean_over = [&](const std::vector<std::string>& doms, bool use_chrf) {
      double s = 0.0;
      for (const auto& d : doms) {
        s += use_chrf ? cells.at(d).second : cells.at(d).first;
      }
      return doms.empty() ? 0.0 : s / static_cast<double>(doms.size());
    };
    ojson jcells = ojson::object();
    for (const auto& dom : columns) {
      jcells[dom] = {{"bleu", cells.at(dom).first},
                     {"chrf", cells.at(dom).second}};
    }
    table.push_back(
        {{"baseline", b.kind},
         {"final_stage", final_stage},
         {"cells", jcells},
         {"mean", {{"seen",
                    {{"bleu", mean_over(cfg_.partition.seen, false)},
                     {"chrf", mean_over(cfg_.partition.seen, true)}}},
                   {"unseen",
                    {{"bleu", mean_over(cfg_.partition.unseen, false)},
                     {"chrf", mean_over(cfg_.partition.unseen, true)}}}}}});

    const fs::path rp = root_ / "robustness" / b.kind / "matrix.json";
    if (fs::exists(rp)) {
      robust[b.kind] = load_stamped(rp, "robustness").at("avg_diff");
    }
  }

  ojson rep;
  rep["config_hash"] = hash_;
  rep["seed"] = cfg_.seed;
  rep["domains"] = {{"unseen", cfg_.partition.unseen},
                    {"seen", cfg_.partition.seen}};
  rep["table"] = table;
  rep["robustness"] = robust;
  rep["detail"] = detail;
  const fs::path jp = root_ / "report" / "report.json";
  write_text(jp, rep.dump(2) + "\n");
  outputs.push_back(jp);
  const fs::path lp = root_ / "report" / "report.jsonl";
  {
    std::vector<ojson> lines;
    for (const auto& d : detail) lines.push_back(d);
    write_jsonl(lp, lines);
  }
  outputs.push_back(lp);

  // Human-readable table: chrF and BLEU blocks with unseen columns first.
  std::ostringstream txt;
  txt << "config " << hash_ << "  seed " << cfg_.seed << "\n";
  auto block = [&](const char* title, bool use_chrf) {
    txt << "\n" << title << "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-22s", "system");
    txt << buf;
    for (const auto& dom : columns) {
      std::snprintf(buf, sizeof buf, " %10s", dom.c_str());
      txt << buf;
    }
    txt << "   mean-unseen  mean-seen\n";
    for (const auto& row : table) {
      std::snprintf(buf, sizeof buf, "%-22s",
                    row.at("baseline").get<std::string>().c_str());
      txt << buf;
      for (const auto& dom : columns) {
        const double val =
            row.at("cells").at(dom).at(use_chrf ? "chrf" : "bleu");
        std::snprintf(buf, sizeof buf, " %10.2f", val);
        txt << buf;
      }
      const auto& mean = row.at("mean");
      std::snprintf(buf, sizeof buf, "   %11.2f %10.2f",
                    mean.at("unseen").at(use_chrf ? "chrf" : "bleu")
                        .get<double>(),
                    mean.at("seen").at(use_chrf ? "chrf" : "bleu")
                        .get<double>());
      txt << buf << "\n";
    }
  };
  block("chrF", true);
  block("BLEU", false);
  if (!robust.empty()) {
    txt << "\nrobustness avg_diff\n";
    for (auto it = robust.begin(); it != robust.end(); ++it) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%-22s %10.3f\n", it.key().c_str(),
                    it.value().get<double>());
      txt << buf;
    }
  }
  const fs::path tp = root_ / "report" / "report.txt";
  write_text(tp, txt.str());
  outputs.push_back(tp);

  write_stamp("report", inputs, outputs);
  return {false, "report: " + std::to_string(table.size()) + " systems, " +
                     std::to_string(detail.size()) + " detail rows"};
}

}  // namespace rml
