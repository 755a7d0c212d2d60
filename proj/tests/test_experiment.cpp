#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "rml/errors.hpp"
#include "rml/experiment.hpp"
#include "rml/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "rml_experiment_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string micro_config(
    const std::string& out,
    const std::string& baselines = "[\"rmlnmt\", \"plain-ft\"]") {
  return std::string(R"({
    "corpus": {
      "synth": {"domains": ["general", "alpha", "beta"],
                "types_per_domain": 30, "overlap": 0.3,
                "pairs_per_domain": 60, "min_len": 4, "max_len": 6},
      "vocab_cap": 256, "max_tokens": 16},
    "partition": {"seen": ["general", "alpha"], "unseen": ["beta"]},
    "model": {"d_model": 16, "n_heads": 2, "enc_layers": 1, "dec_layers": 1,
              "d_ff": 24, "max_len": 64},
    "classifier": {"hidden": 16, "lr": 0.3, "epochs": 6, "batch": 8,
                   "holdout": 0.2},
    "split": {"n_tasks": 4},
    "pretrain": {"epochs": 1, "lr": 0.08, "batch_pairs": 8},
    "meta": {"alpha": 0.03, "beta": 0.01, "epochs": 1},
    "finetune": {"strategy": "ft-specific", "steps": 2, "lr": 0.05,
                 "support_pairs": 8},
    "eval": {"beam_size": 2, "max_length": 10, "max_sentences": 6},
    "baselines": )") +
         baselines + R"(,
    "seed": 7,
    "output": ")" + out + R"("})";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  REQUIRE(bool(out));
  out << text;
}

void run_pipeline(rml::Experiment& ex, bool expect_fresh) {
  for (const char* sub :
       {"synth", "train-classifier", "score", "split", "pretrain-mix",
        "meta-train", "finetune", "evaluate", "robustness", "report"}) {
    const rml::StageResult r = ex.run(sub);
    if (expect_fresh) {
      INFO(sub, ": ", r.message);
      CHECK_FALSE(r.skipped);
    }
  }
}

// Built once, shared by the read-only cases below.
rml::Experiment& shared_pipeline() {
  static rml::Experiment ex = [] {
    const std::string out = (scratch_root() / "main").string();
    rml::Experiment e(rml::ExperimentConfig::parse(micro_config(out)));
    run_pipeline(e, true);
    return e;
  }();
  return ex;
}

}  // namespace

TEST_CASE("config errors carry dotted field paths") {
  const std::string out = (scratch_root() / "cfg").string();
  auto expect = [&](const std::string& text, const std::string& needle) {
    try {
      rml::ExperimentConfig::parse(text);
      FAIL_CHECK("expected ConfigError containing '", needle, "'");
    } catch (const rml::ConfigError& e) {
      INFO(e.what());
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };

  expect("{nope", "not valid JSON");
  expect("{}", "corpus");

  json j = json::parse(micro_config(out));
  {
    json bad = j;
    bad.erase("seed");
    expect(bad.dump(), "seed");
  }
  {
    json bad = j;
    bad["partition"]["unseen"].push_back("alpha");
    expect(bad.dump(), "both");
  }
  {
    json bad = j;
    bad["partition"]["unseen"] = json::array();
    expect(bad.dump(), "neither");
  }
  {
    json bad = j;
    bad["partition"]["seen"] = {"alpha", "beta"};
    expect(bad.dump(), "general");
  }
  {
    json bad = j;
    bad["baselines"] = {"warp-drive"};
    expect(bad.dump(), "baselines[0]");
  }
  {
    json bad = j;
    bad["baselines"] = {"rmlnmt", "rmlnmt"};
    expect(bad.dump(), "duplicate");
  }
  {
    json bad = j;
    bad["baselines"] = json::array(
        {{{"kind", "rmlnmt"}, {"widen_embeddings", true}}});
    expect(bad.dump(), "widen_embeddings");
  }
  {
    json bad = j;
    bad["corpus"]["synth"]["domains"] = 3;
    expect(bad.dump(), "corpus.synth.domains");
  }
  {
    json bad = j;
    bad["model"]["d_model"] = 15;  // not divisible by n_heads
    expect(bad.dump(), "model");
  }
  {
    json bad = j;
    bad["split"]["strategy"] = "vibes";
    expect(bad.dump(), "split.strategy");
  }
  {
    json bad = j;
    bad["finetune"]["strategy"] = "ft-everything";
    expect(bad.dump(), "finetune.strategy");
  }
  {
    json bad = j;
    bad["eval"]["beam_size"] = 0;
    expect(bad.dump(), "eval");
  }

  CHECK_THROWS_AS(
      rml::ExperimentConfig::load(scratch_root() / "no_such_config.json"),
      rml::ConfigError);
}

TEST_CASE("config hash ignores the output root but tracks the seed") {
  const auto a = rml::ExperimentConfig::parse(micro_config("outA"));
  const auto b = rml::ExperimentConfig::parse(micro_config("outB"));
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);

  auto c = rml::ExperimentConfig::parse(micro_config("outA"));
  c.seed = 8;
  CHECK(a.hash() != c.hash());
}

TEST_CASE("pipeline runs end to end and stamps every artifact") {
  rml::Experiment& ex = shared_pipeline();
  const fs::path root = ex.root();
  const std::string h = ex.config().hash();

  const json manifest = json::parse(slurp(root / "corpus" / "manifest.json"));
  CHECK(manifest.at("config_hash") == h);
  CHECK(manifest.at("domains").size() == 3);
  for (const auto& dom : {"general", "alpha", "beta"}) {
    CHECK(manifest.at("domains").at(dom).at("test") == 6);
    CHECK(manifest.at("domains").at(dom).at("support") == 8);
  }

  const json cls = json::parse(slurp(root / "classifier" / "report.json"));
  CHECK(cls.at("config_hash") == h);
  const double acc = cls.at("holdout_accuracy").get<double>();
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);

  CHECK(fs::exists(root / "tasks" / "classifier.tsv"));
  CHECK(fs::exists(root / "tasks" / "uniform.tsv"));
  CHECK(fs::exists(root / "models" / "rmlnmt" / "pretrain.ckpt"));
  CHECK(fs::exists(root / "models" / "rmlnmt" / "meta.ckpt"));
  CHECK(fs::exists(root / "models" / "rmlnmt" / "ft_general.ckpt"));
  CHECK(fs::exists(root / "models" / "rmlnmt" / "ft_beta.ckpt"));

  const json ev = json::parse(slurp(root / "eval" / "rmlnmt" / "results.json"));
  CHECK(ev.at("config_hash") == h);
  CHECK(ev.at("rows").size() == 9);  // pretrain, meta, ft across 3 domains
  for (const auto& row : ev.at("rows")) {
    CHECK(row.at("bleu").get<double>() >= 0.0);
    CHECK(row.at("chrf").get<double>() >= 0.0);
    CHECK(row.at("n_sentences") == 6);
  }

  // The matrix spans every domain, and its reference row comes from the
  // plain transformer, not the system under test.
  const json rm =
      json::parse(slurp(root / "robustness" / "rmlnmt" / "matrix.json"));
  CHECK(rm.at("config_hash") == h);
  CHECK(rm.at("reference") == "plain-ft");
  CHECK(rm.at("domains").size() == 3);
  CHECK(rm.at("cells").size() == 3);
  CHECK(rm.at("cells").at(0).size() == 3);
  CHECK(rm.at("unadapted").size() == 3);
  CHECK(fs::exists(root / "robustness" / "plain-ft" / "matrix.json"));

  const json rep = json::parse(slurp(root / "report" / "report.json"));
  CHECK(rep.at("config_hash") == h);
  CHECK(rep.at("table").size() == 2);
  CHECK(rep.at("table").at(0).at("final_stage") == "ft");
  CHECK(rep.at("detail").size() == 15);  // 3 stages + 2, across 3 domains
  const std::string txt = slurp(root / "report" / "report.txt");
  CHECK(txt.find("chrF") != std::string::npos);
  CHECK(txt.find("rmlnmt") != std::string::npos);
  CHECK(txt.find("beta") != std::string::npos);
}

TEST_CASE("every stage is a no-op when nothing changed") {
  rml::Experiment& ex = shared_pipeline();
  const std::string before = slurp(ex.root() / "report" / "report.json");
  for (const char* sub :
       {"synth", "train-classifier", "score", "split", "pretrain-mix",
        "meta-train", "finetune", "evaluate", "robustness", "report"}) {
    const rml::StageResult r = ex.run(sub);
    INFO(sub, ": ", r.message);
    CHECK(r.skipped);
    CHECK(r.message.find("up to date") != std::string::npos);
  }
  CHECK(slurp(ex.root() / "report" / "report.json") == before);
}

TEST_CASE("a fresh rerun reproduces the report byte for byte") {
  rml::Experiment& first = shared_pipeline();
  const std::string out = (scratch_root() / "rerun").string();
  rml::Experiment again(rml::ExperimentConfig::parse(micro_config(out)));
  run_pipeline(again, true);

  for (const char* rel : {"report/report.json", "report/report.txt",
                          "report/report.jsonl"}) {
    CHECK(slurp(first.root() / rel) == slurp(again.root() / rel));
  }
  CHECK(rml::hash_file(first.root() / "models" / "rmlnmt" / "meta.ckpt") ==
        rml::hash_file(again.root() / "models" / "rmlnmt" / "meta.ckpt"));
}

TEST_CASE("missing upstream artifacts name the stage to run first") {
  const std::string out = (scratch_root() / "gaps").string();
  rml::Experiment ex(rml::ExperimentConfig::parse(micro_config(out)));

  auto expect = [&](const std::string& sub, const std::string& needle) {
    try {
      ex.run(sub);
      FAIL_CHECK(sub, ": expected DataError naming '", needle, "'");
    } catch (const rml::DataError& e) {
      INFO(e.what());
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };

  expect("train-classifier", "synth");
  CHECK_FALSE(ex.run("synth").skipped);
  expect("score", "train-classifier");
  expect("meta-train", "pretrain-mix");
  expect("report", "evaluate");
}

TEST_CASE("report refuses artifacts from a different config") {
  rml::Experiment& ex = shared_pipeline();
  const fs::path evp = ex.root() / "eval" / "rmlnmt" / "results.json";
  const std::string original = slurp(evp);
  const std::string h = ex.config().hash();
  std::string tampered = original;
  const size_t at = tampered.find(h);
  REQUIRE(at != std::string::npos);
  tampered[at] = tampered[at] == '0' ? 'f' : '0';
  spit(evp, tampered);

  try {
    ex.run("report");
    FAIL_CHECK("expected the report to refuse the tampered artifact");
  } catch (const rml::DataError& e) {
    INFO(e.what());
    CHECK(std::string(e.what()).find("refuses to mix") != std::string::npos);
  }

  spit(evp, original);
  CHECK(ex.run("report").skipped);
}

TEST_CASE("widened single-bank models scale with the seen domain count") {
  rml::Experiment& ex = shared_pipeline();
  rml::BaselineSpec wide{"vanilla", true};
  const rml::MixConfig mc = ex.model_config(wide);
  // ceil(sqrt(2)) doubles the width for two seen domains.
  CHECK(mc.domains == 1);
  CHECK(mc.d_model == 32);
  CHECK(mc.d_ff == 48);

  rml::BaselineSpec mix{"rmlnmt", false};
  const rml::MixConfig mm = ex.model_config(mix);
  CHECK(mm.domains == 2);
  CHECK(mm.d_model == 16);

  CHECK(rml::Experiment::uses_mixing("word-level-adaptive"));
  CHECK_FALSE(rml::Experiment::uses_mixing("meta-only"));
  CHECK(rml::Experiment::uses_meta("meta-curriculum-cls"));
  CHECK_FALSE(rml::Experiment::uses_meta("plain-ft"));
  CHECK(rml::Experiment::uses_finetune("plain-ft"));
  CHECK_FALSE(rml::Experiment::uses_finetune("vanilla"));
  CHECK(rml::Experiment::uses_classifier_scores("rmlnmt"));
  CHECK_FALSE(rml::Experiment::uses_classifier_scores("meta-only"));
}

TEST_CASE("meta systems without mixing pretrain on the general pool only") {
  const std::string out = (scratch_root() / "meta_pool").string();
  rml::Experiment ex(
      rml::ExperimentConfig::parse(micro_config(out, "[\"meta-only\"]")));
  CHECK_FALSE(ex.run("synth").skipped);
  CHECK_FALSE(ex.run("pretrain-mix").skipped);

  const json stamp =
      json::parse(slurp(ex.root() / "stamps" / "pretrain.meta-only.json"));
  const auto& inputs = stamp.at("inputs");
  CHECK(inputs.contains("corpus/general.train.src"));
  CHECK_FALSE(inputs.contains("corpus/alpha.train.src"));
}

TEST_CASE("robustness without a plain reference baseline is a config error") {
  const std::string out = (scratch_root() / "no_ref").string();
  rml::Experiment ex(
      rml::ExperimentConfig::parse(micro_config(out, "[\"rmlnmt\"]")));
  for (const char* sub : {"synth", "train-classifier", "score", "split",
                          "pretrain-mix", "meta-train", "finetune"}) {
    ex.run(sub);
  }
  CHECK_THROWS_AS(ex.run("robustness"), rml::ConfigError);
}

TEST_CASE("subcommand dispatch rejects unknown names") {
  rml::Experiment& ex = shared_pipeline();
  CHECK_THROWS_AS(ex.run("frobnicate"), rml::ConfigError);
  CHECK_THROWS_AS(ex.run("ingest"), rml::ConfigError);  // synthetic config
}

TEST_CASE("the output root honors the environment override") {
  const fs::path forced = scratch_root() / "env_root";
  setenv("RML_ADAPT_OUT", forced.string().c_str(), 1);
  rml::Experiment ex(rml::ExperimentConfig::parse(micro_config("ignored")));
  unsetenv("RML_ADAPT_OUT");
  CHECK(ex.root() == forced);
}

TEST_CASE("ingest cleans and splits real parallel files") {
  const fs::path dir = scratch_root() / "real";
  fs::create_directories(dir);
  auto write_corpus = [&](const std::string& dom, const std::string& prefix) {
    std::ostringstream src, tgt;
    for (int i = 0; i < 30; ++i) {
      src << prefix << i << " w" << i << " x" << i << " y" << i << "\n";
      tgt << "T" << prefix << i << " a" << i << " b" << i << " c" << i << "\n";
    }
    // A duplicate and an empty line exercise the cleaner.
    src << prefix << 0 << " w0 x0 y0\n\n";
    tgt << "T" << prefix << 0 << " a0 b0 c0\n\n";
    spit(dir / (dom + ".src"), src.str());
    spit(dir / (dom + ".tgt"), tgt.str());
  };
  write_corpus("general", "g");
  write_corpus("med", "m");

  const std::string cfg_text = std::string(R"({
    "corpus": {"paths": {
        "general": {"src": ")" + (dir / "general.src").string() +
                               R"(", "tgt": ")" +
                               (dir / "general.tgt").string() + R"("},
        "med": {"src": ")" + (dir / "med.src").string() + R"(", "tgt": ")" +
                               (dir / "med.tgt").string() + R"("}},
      "vocab_cap": 512, "max_tokens": 16},
    "partition": {"seen": ["general", "med"]},
    "model": {"d_model": 16, "n_heads": 2, "enc_layers": 1, "dec_layers": 1,
              "d_ff": 24, "max_len": 64},
    "finetune": {"support_pairs": 4},
    "eval": {"max_sentences": 3},
    "baselines": ["vanilla"],
    "seed": 3,
    "output": ")" + (scratch_root() / "real_out").string() + R"("})");

  rml::Experiment ex(rml::ExperimentConfig::parse(cfg_text));
  CHECK_THROWS_AS(ex.run("synth"), rml::ConfigError);
  CHECK_FALSE(ex.run("ingest").skipped);

  const json manifest =
      json::parse(slurp(ex.root() / "corpus" / "manifest.json"));
  CHECK(manifest.at("synthetic") == false);
  CHECK(manifest.at("ingest").at("general").at("dropped_duplicate") == 1);
  CHECK(manifest.at("ingest").at("general").at("dropped_empty") == 1);
  CHECK(manifest.at("ingest").at("general").at("kept") == 30);
  CHECK(manifest.at("domains").at("med").at("test") == 3);
  CHECK(ex.run("ingest").skipped);
}
