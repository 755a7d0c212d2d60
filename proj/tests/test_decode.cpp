#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "rml/decode.hpp"
#include "rml/errors.hpp"
#include "rml/rng.hpp"
#include "rml/tokens.hpp"

namespace {

rml::MixConfig tiny_config(int k) {
  rml::MixConfig c;
  c.vocab = 12;
  c.domains = k;
  c.d_model = 8;
  c.n_heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.d_ff = 12;
  c.max_len = 32;
  return c;
}

std::vector<int> random_src(rml::Rng& rng, int lo = 2, int hi = 5) {
  std::vector<int> src;
  const int len = rng.uniform_int(lo, hi);
  for (int i = 0; i < len; ++i) src.push_back(rng.uniform_int(4, 11));
  return src;
}

// Argmax rollout against the model, first maximum winning ties.
std::vector<int> greedy_rollout(const rml::MixModel& m,
                                const std::vector<rml::Tensor>& params,
                                const std::vector<int>& src, int domain,
                                int max_len, bool* finished) {
  std::vector<int> out;
  *finished = false;
  for (int step = 0; step < max_len; ++step) {
    const rml::Tensor logits = m.next_token_logits(params, src, domain, {out});
    int best = 0;
    for (int t = 1; t < logits.cols(); ++t)
      if (logits.at(0, t) > logits.at(0, best)) best = t;
    if (best == rml::kEos) {
      *finished = true;
      return out;
    }
    out.push_back(best);
  }
  return out;
}

// Fixed per-step logits rows; the prefix length selects the row.
rml::StepScorer table_scorer(const std::vector<std::vector<double>>& rows) {
  return [rows](const std::vector<std::vector<int>>& prefixes) {
    const int vocab = static_cast<int>(rows[0].size());
    rml::Tensor out(static_cast<int>(prefixes.size()), vocab);
    for (size_t p = 0; p < prefixes.size(); ++p) {
      const auto& row = rows.at(prefixes[p].size());
      for (int t = 0; t < vocab; ++t) out.at(static_cast<int>(p), t) = row[t];
    }
    return out;
  };
}

double log_softmax_at(const std::vector<double>& row, int idx) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double lse = 0.0;
  for (double v : row) lse += std::exp(v - mx);
  return row[idx] - (mx + std::log(lse));
}

}  // namespace

TEST_CASE("beam of one equals a greedy rollout across random models") {
  rml::Rng rng(71);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 1 + (trial % 3);
    auto cfg = tiny_config(k);
    rml::MixModel model(cfg);
    auto params = rml::init_params(cfg, 1000 + trial);
    const auto src = random_src(rng);
    const int domain = rng.uniform_int(0, k - 1);

    rml::BeamConfig bc;
    bc.beam_size = 1;
    bc.max_length = 8;
    const auto beam = rml::beam_decode(model, params, src, domain, bc);
    bool finished = false;
    const auto greedy =
        greedy_rollout(model, params, src, domain, bc.max_length, &finished);
    CHECK(beam.ids == greedy);
    CHECK(beam.truncated == !finished);
  }
}

TEST_CASE("beam search matches exhaustive enumeration on a logits table") {
  const std::vector<std::vector<double>> rows = {
      {0.2, -0.1, 0.0, 1.1, 0.4},
      {0.0, 0.9, 0.6, -0.5, 0.3},
      {0.1, 0.2, 2.0, 0.25, -1.0},
  };
  auto scorer = table_scorer(rows);

  // Every body of non-end tokens up to length two, closed by the end
  // marker, scored by summed log-softmax.
  std::vector<int> letters = {0, 1, 3, 4};
  std::vector<int> best_body;
  double best_score = -1e300;
  auto consider = [&](const std::vector<int>& body) {
    double s = 0.0;
    for (size_t i = 0; i < body.size(); ++i)
      s += log_softmax_at(rows[i], body[i]);
    s += log_softmax_at(rows[body.size()], rml::kEos);
    if (s > best_score) {
      best_score = s;
      best_body = body;
    }
  };
  consider({});
  for (int a : letters) {
    consider({a});
    for (int b : letters) consider({a, b});
  }

  rml::BeamConfig bc;
  bc.beam_size = 100;  // wide enough to cover every candidate: exhaustive
  bc.max_length = 3;
  const auto r = rml::beam_decode(scorer, 5, bc);
  CHECK_FALSE(r.truncated);
  CHECK(r.ids == best_body);
  CHECK(r.log_prob == doctest::Approx(best_score).epsilon(1e-12));
}

TEST_CASE("wider beams never score below greedy") {
  rml::Rng rng(72);
  for (int trial = 0; trial < 20; ++trial) {
    auto cfg = tiny_config(2);
    rml::MixModel model(cfg);
    auto params = rml::init_params(cfg, 2000 + trial);
    const auto src = random_src(rng);
    const int domain = rng.uniform_int(0, 1);

    rml::BeamConfig narrow, wide;
    narrow.beam_size = 1;
    narrow.max_length = 8;
    wide.beam_size = 5;
    wide.max_length = 8;
    const auto a = rml::beam_decode(model, params, src, domain, narrow);
    const auto b = rml::beam_decode(model, params, src, domain, wide);
    if (!a.truncated && !b.truncated) CHECK(b.log_prob >= a.log_prob - 1e-12);
  }
}

TEST_CASE("suppressed end marker truncates at the length limit") {
  const int vocab = 5;
  std::vector<double> row = {0.5, 0.1, -1e9, 0.9, 0.2};
  rml::StepScorer scorer = [&](const std::vector<std::vector<int>>& ps) {
    rml::Tensor out(static_cast<int>(ps.size()), vocab);
    for (size_t p = 0; p < ps.size(); ++p)
      for (int t = 0; t < vocab; ++t) out.at(static_cast<int>(p), t) = row[t];
    return out;
  };
  rml::BeamConfig bc;
  bc.beam_size = 3;
  bc.max_length = 6;
  const auto r = rml::beam_decode(scorer, vocab, bc);
  CHECK(r.truncated);
  CHECK(r.ids.size() == 6);
  for (int t : r.ids) CHECK(t != rml::kEos);
}

TEST_CASE("length penalty can prefer the longer completion") {
  // One-step completion against a two-step one with better per-token odds.
  const std::vector<std::vector<double>> rows = {
      {-1e9, -1e9, std::log(0.5), std::log(0.3), std::log(0.2)},
      {-1e9, -1e9, std::log(0.8), std::log(0.1), std::log(0.1)},
      {-1e9, -1e9, 5.0, 0.0, 0.0},
  };
  auto scorer = table_scorer(rows);

  rml::BeamConfig raw;
  raw.beam_size = 3;
  raw.max_length = 3;
  const auto plain = rml::beam_decode(scorer, 5, raw);
  CHECK(plain.ids.empty());  // immediate end marker wins on raw score

  rml::BeamConfig shaped = raw;
  shaped.length_penalty = 2.0;
  const auto bent = rml::beam_decode(scorer, 5, shaped);
  CHECK(bent.ids == std::vector<int>{3});
}

TEST_CASE("decoder configuration and input validation") {
  rml::BeamConfig bad;
  bad.beam_size = 0;
  CHECK_THROWS_AS(bad.validate(), rml::ConfigError);
  bad.beam_size = 2;
  bad.max_length = 0;
  CHECK_THROWS_AS(bad.validate(), rml::ConfigError);
  bad.max_length = 4;
  bad.length_penalty = -1.0;
  CHECK_THROWS_AS(bad.validate(), rml::ConfigError);

  auto cfg = tiny_config(1);
  rml::MixModel model(cfg);
  auto params = rml::init_params(cfg, 3);
  CHECK_THROWS_AS(rml::beam_decode(model, params, {}, 0, rml::BeamConfig{}),
                  rml::DataError);
}

TEST_CASE("corpus translation is deterministic and detokenized") {
  auto cfg = tiny_config(2);
  cfg.vocab = 10;
  rml::MixModel model(cfg);
  auto params = rml::init_params(cfg, 4);

  std::vector<rml::RawPair> raws;
  for (const char* s : {"aa bb cc", "bb cc dd", "cc dd ee", "dd ee ff"}) {
    rml::RawPair p;
    std::istringstream in(s);
    std::string t;
    while (in >> t) {
      p.src.push_back(t);
      p.tgt.push_back("T" + t);
    }
    raws.push_back(std::move(p));
  }
  auto vocab = rml::Vocabulary::build(raws, 10);
  auto pairs = rml::encode_pairs(vocab, raws, 1);

  rml::BeamConfig bc;
  bc.beam_size = 2;
  bc.max_length = 6;
  auto out1 = rml::translate_corpus(model, params, pairs, vocab, bc);
  auto out2 = rml::translate_corpus(model, params, pairs, vocab, bc);
  REQUIRE(out1.size() == pairs.size());
  CHECK(out1 == out2);

  auto forced = rml::translate_corpus(model, params, pairs, vocab, bc, 0);
  CHECK(forced.size() == pairs.size());
}
