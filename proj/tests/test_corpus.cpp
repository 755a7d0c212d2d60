#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "rml/corpus.hpp"

using rml::RawPair;
using rml::Rng;
using rml::SynthConfig;
using rml::Vocabulary;

namespace fs = std::filesystem;

namespace {

RawPair mk(const std::string& src, const std::string& tgt) {
  return {rml::split_tokens(src), rml::split_tokens(tgt)};
}

}  // namespace

TEST_CASE("vocabulary ranks by frequency with lexicographic ties") {
  std::vector<RawPair> pairs{mk("a a b", "c")};
  Vocabulary v = Vocabulary::build(pairs, 6);
  CHECK(v.size() == 6);
  CHECK(v.token(rml::kPad) == "<pad>");
  CHECK(v.token(rml::kUnk) == "<unk>");
  // a occurs twice; b and c once each, so b wins the tie alphabetically
  // and c falls off the cap.
  CHECK(v.id("a") == 4);
  CHECK(v.id("b") == 5);
  CHECK(v.id("c") == rml::kUnk);
}

TEST_CASE("vocabulary cap below the reserved block is rejected") {
  std::vector<RawPair> pairs{mk("a", "b")};
  CHECK_THROWS_AS(Vocabulary::build(pairs, 4), rml::ConfigError);
  CHECK_THROWS_AS(Vocabulary::build(pairs, 2), rml::ConfigError);
  CHECK_NOTHROW(Vocabulary::build(pairs, 5));
}

TEST_CASE("encode maps unknown tokens to unk and decode drops control tokens") {
  std::vector<RawPair> pairs{mk("x y z", "x y z")};
  Vocabulary v = Vocabulary::build(pairs, 16);
  auto ids = v.encode({"x", "mystery", "z"});
  CHECK(ids[1] == rml::kUnk);
  auto toks = v.decode({rml::kBos, v.id("x"), rml::kEos});
  REQUIRE(toks.size() == 1);
  CHECK(toks[0] == "x");
}

TEST_CASE("vocabulary file round-trips and rejects a mangled header") {
  std::vector<RawPair> pairs{mk("w1 w2 w3", "u1 u2")};
  Vocabulary v = Vocabulary::build(pairs, 32);
  const auto dir = fs::temp_directory_path() / "rml_vocab_test";
  fs::create_directories(dir);
  const auto path = dir / "vocab.txt";
  v.save(path);
  Vocabulary back = Vocabulary::load(path);
  CHECK(back.size() == v.size());
  for (int i = 0; i < v.size(); ++i) CHECK(back.token(i) == v.token(i));

  std::ofstream bad(path, std::ios::trunc);
  bad << "<pad>\n<bos>\nwrong\n<unk>\nx\n";
  bad.close();
  CHECK_THROWS_AS(Vocabulary::load(path), rml::DataError);
  fs::remove_all(dir);
}

TEST_CASE("clean_pairs deduplicates and filters by length, idempotently") {
  std::vector<RawPair> pairs{
      mk("a b", "c d"), mk("a b", "c d"),  // duplicate
      mk("", "x"),                          // empty side
      mk("t t t t t", "u"),                 // too long at cap 4
      mk("e f", "g h"),
  };
  rml::IngestStats st;
  auto clean = rml::clean_pairs(pairs, 4, &st);
  CHECK(st.kept == 2);
  CHECK(st.dropped_duplicate == 1);
  CHECK(st.dropped_empty == 1);
  CHECK(st.dropped_length == 1);

  rml::IngestStats again;
  auto twice = rml::clean_pairs(clean, 4, &again);
  CHECK(again.kept == clean.size());
  CHECK(again.dropped_duplicate == 0);
  CHECK(twice.size() == clean.size());
}

TEST_CASE("parallel files round-trip and misalignment is named") {
  const auto dir = fs::temp_directory_path() / "rml_par_test";
  fs::create_directories(dir);
  std::vector<RawPair> pairs{mk("a b", "c"), mk("d", "e f")};
  rml::write_parallel(dir / "x.src", dir / "x.tgt", pairs);
  auto back = rml::load_parallel(dir / "x.src", dir / "x.tgt");
  REQUIRE(back.size() == 2);
  CHECK(back[0].src == pairs[0].src);
  CHECK(back[1].tgt == pairs[1].tgt);

  std::ofstream extra(dir / "x.src", std::ios::app);
  extra << "orphan line\n";
  extra.close();
  try {
    rml::load_parallel(dir / "x.src", dir / "x.tgt");
    FAIL("expected DataError");
  } catch (const rml::DataError& e) {
    std::string msg = e.what();
    CHECK(msg.find("3") != std::string::npos);
    CHECK(msg.find("2") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("synthetic corpus is a pure substitution cipher with seeded determinism") {
  SynthConfig cfg;
  cfg.domains = {"general", "alpha", "beta"};
  cfg.types_per_domain = 20;
  cfg.overlap = 0.25;
  cfg.pairs_per_domain = 40;
  auto a = rml::synthesize_corpus(cfg, 7);
  auto b = rml::synthesize_corpus(cfg, 7);
  auto c = rml::synthesize_corpus(cfg, 8);

  REQUIRE(a.size() == 3);
  bool identical = true, differs = false;
  for (const auto& [dom, pairs] : a) {
    REQUIRE(pairs.size() == 40);
    for (size_t i = 0; i < pairs.size(); ++i) {
      // Target is the word-for-word image of the source.
      REQUIRE(pairs[i].src.size() == pairs[i].tgt.size());
      for (size_t j = 0; j < pairs[i].src.size(); ++j)
        CHECK(pairs[i].tgt[j] == rml::cipher_target(pairs[i].src[j]));
      if (rml::join_tokens(pairs[i].src) !=
          rml::join_tokens(b.at(dom)[i].src))
        identical = false;
      if (rml::join_tokens(pairs[i].src) !=
          rml::join_tokens(c.at(dom)[i].src))
        differs = true;
    }
    // No duplicate sentences inside a domain.
    std::set<std::string> seen;
    for (const auto& p : pairs) CHECK(seen.insert(rml::join_tokens(p.src)).second);
  }
  CHECK(identical);
  CHECK(differs);
}

TEST_CASE("synthetic domains overlap with general by the configured share") {
  SynthConfig cfg;
  cfg.domains = {"general", "alpha"};
  cfg.types_per_domain = 20;
  cfg.overlap = 0.25;
  cfg.pairs_per_domain = 120;
  cfg.min_len = 6;
  cfg.max_len = 10;
  auto corpora = rml::synthesize_corpus(cfg, 11);

  std::set<std::string> general_types, alpha_types;
  for (const auto& p : corpora.at("general"))
    general_types.insert(p.src.begin(), p.src.end());
  for (const auto& p : corpora.at("alpha"))
    alpha_types.insert(p.src.begin(), p.src.end());

  // With 120 sentences of 6-10 tokens over 20 types, every type shows up.
  CHECK(general_types.size() == 20);
  CHECK(alpha_types.size() == 20);
  std::set<std::string> shared;
  for (const auto& t : alpha_types)
    if (general_types.count(t)) shared.insert(t);
  CHECK(shared.size() == 5);  // round(0.25 * 20)

  SynthConfig disjoint = cfg;
  disjoint.overlap = 0.0;
  auto dj = rml::synthesize_corpus(disjoint, 11);
  std::set<std::string> dja;
  for (const auto& p : dj.at("alpha")) dja.insert(p.src.begin(), p.src.end());
  for (const auto& t : dja) CHECK(general_types.count(t) == 0);
}

TEST_CASE("synthetic config validation catches bad setups") {
  SynthConfig cfg;
  cfg.domains = {"alpha"};
  CHECK_THROWS_AS(rml::synthesize_corpus(cfg, 1), rml::ConfigError);
  cfg.domains = {"general", "general"};
  CHECK_THROWS_AS(rml::synthesize_corpus(cfg, 1), rml::ConfigError);
  cfg.domains = {"general", "alpha"};
  cfg.overlap = 1.5;
  CHECK_THROWS_AS(rml::synthesize_corpus(cfg, 1), rml::ConfigError);
  cfg.overlap = 0.2;
  cfg.min_len = 5;
  cfg.max_len = 4;
  CHECK_THROWS_AS(rml::synthesize_corpus(cfg, 1), rml::ConfigError);

  // Impossible uniqueness demand: more sentences than distinct short strings.
  SynthConfig impossible;
  impossible.domains = {"general"};
  impossible.types_per_domain = 4;
  impossible.min_len = 1;
  impossible.max_len = 1;
  impossible.pairs_per_domain = 10;
  CHECK_THROWS_AS(rml::synthesize_corpus(impossible, 1), rml::DataError);
}

TEST_CASE("meta split slices are disjoint and sized as requested") {
  std::vector<RawPair> pool;
  for (int i = 0; i < 100; ++i)
    pool.push_back(mk("sent " + std::to_string(i), "tsent " + std::to_string(i)));
  Rng rng(5);
  auto split = rml::make_meta_split(pool, 60, 10, 20, rng);
  CHECK(split.train.size() == 60);
  CHECK(split.support.size() == 10);
  CHECK(split.query.size() == 20);
  std::set<std::string> seen;
  for (const auto* part : {&split.train, &split.support, &split.query})
    for (const auto& p : *part)
      CHECK(seen.insert(rml::join_tokens(p.src)).second);

  Rng rng2(6);
  CHECK_THROWS_AS(rml::make_meta_split(pool, 90, 10, 20, rng2),
                  rml::DataError);
}

TEST_CASE("encode_pairs attaches the domain label") {
  std::vector<RawPair> pairs{mk("a b", "Ta Tb")};
  Vocabulary v = Vocabulary::build(pairs, 16);
  auto enc = rml::encode_pairs(v, pairs, 3);
  REQUIRE(enc.size() == 1);
  CHECK(enc[0].domain == 3);
  CHECK(enc[0].src.size() == 2);
  CHECK(enc[0].tgt.size() == 2);
  CHECK(enc[0].src[0] == v.id("a"));
}
