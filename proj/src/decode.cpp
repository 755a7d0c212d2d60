#include "rml/decode.hpp"

#include <algorithm>
#include <cmath>

#include "rml/errors.hpp"
#include "rml/tokens.hpp"

namespace rml {
namespace {

struct Hypothesis {
  std::vector<int> ids;
  double log_prob{0.0};
};

double normalized(const Hypothesis& h, double penalty, bool finished) {
  // Length counts every generated token, the end marker included.
  const double len =
      static_cast<double>(h.ids.size()) + (finished ? 1.0 : 0.0);
  if (penalty == 0.0 || len == 0.0) return h.log_prob;
  return h.log_prob / std::pow(len, penalty);
}

}  // namespace

void BeamConfig::validate() const {
  if (beam_size < 1) throw ConfigError("beam size must be at least 1");
  if (max_length < 1) throw ConfigError("max decode length must be positive");
  if (length_penalty < 0.0)
    throw ConfigError("length penalty exponent must be non-negative");
}

DecodeResult beam_decode(const StepScorer& scorer, int vocab,
                         const BeamConfig& cfg) {
  cfg.validate();
  if (vocab <= kEos) throw ConfigError("vocabulary too small to decode");

  std::vector<Hypothesis> active = {Hypothesis{}};
  std::vector<Hypothesis> finished;

  for (int step = 0; step < cfg.max_length && !active.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    prefixes.reserve(active.size());
    for (const Hypothesis& h : active) prefixes.push_back(h.ids);
    const Tensor logits = scorer(prefixes);
    if (logits.rows() != static_cast<int>(active.size()) ||
        logits.cols() != vocab) {
      throw ShapeError("scorer returned " + logits.shape_str() +
                       ", expected " + std::to_string(active.size()) + "x" +
                       std::to_string(vocab));
    }

    struct Candidate {
      int parent, token;
      double log_prob;
    };
    std::vector<Candidate> cands;
    cands.reserve(active.size() * static_cast<size_t>(vocab));
    for (size_t p = 0; p < active.size(); ++p) {
      double mx = logits.at(static_cast<int>(p), 0);
      for (int t = 1; t < vocab; ++t)
        mx = std::max(mx, logits.at(static_cast<int>(p), t));
      double lse = 0.0;
      for (int t = 0; t < vocab; ++t)
        lse += std::exp(logits.at(static_cast<int>(p), t) - mx);
      lse = mx + std::log(lse);
      for (int t = 0; t < vocab; ++t) {
        cands.push_back({static_cast<int>(p), t,
                         active[p].log_prob + logits.at(static_cast<int>(p), t) -
                             lse});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) {
                       return a.log_prob > b.log_prob;
                     });

    // Strict top-k: exactly beam_size candidates survive the step; an end
    // marker retires its hypothesis into the finished pool. Beam size 1 is
    // then an argmax-greedy rollout, finishing only when the end marker
    // itself is the argmax.
    std::vector<Hypothesis> next;
    int taken = 0;
    for (const Candidate& c : cands) {
      if (taken >= cfg.beam_size) break;
      ++taken;
      Hypothesis h = active[c.parent];
      h.log_prob = c.log_prob;
      if (c.token == kEos) {
        finished.push_back(std::move(h));
      } else {
        h.ids.push_back(c.token);
        next.push_back(std::move(h));
      }
    }
    active = std::move(next);

    // Without length normalization scores only fall as hypotheses grow, so
    // the search is over once the best finished beats every live prefix.
    if (cfg.length_penalty == 0.0 && !finished.empty() && !active.empty()) {
      double best_fin = finished[0].log_prob;
      for (const Hypothesis& h : finished)
        best_fin = std::max(best_fin, h.log_prob);
      double best_act = active[0].log_prob;
      for (const Hypothesis& h : active)
        best_act = std::max(best_act, h.log_prob);
      if (best_fin >= best_act) break;
    }
  }

  DecodeResult out;
  if (!finished.empty()) {
    size_t best = 0;
    for (size_t i = 1; i < finished.size(); ++i) {
      if (normalized(finished[i], cfg.length_penalty, true) >
          normalized(finished[best], cfg.length_penalty, true)) {
        best = i;
      }
    }
    out.ids = finished[best].ids;
    out.log_prob = finished[best].log_prob;
    return out;
  }
  if (active.empty()) throw NumericError("beam search lost every hypothesis");
  size_t best = 0;
  for (size_t i = 1; i < active.size(); ++i) {
    if (normalized(active[i], cfg.length_penalty, false) >
        normalized(active[best], cfg.length_penalty, false)) {
      best = i;
    }
  }
  out.ids = active[best].ids;
  out.log_prob = active[best].log_prob;
  out.truncated = true;
  return out;
}

DecodeResult beam_decode(const MixModel& model,
                         const std::vector<Tensor>& params,
                         const std::vector<int>& src, int domain,
                         const BeamConfig& cfg) {
  if (src.empty()) throw DataError("decoding an empty source");
  StepScorer scorer = [&](const std::vector<std::vector<int>>& prefixes) {
    return model.next_token_logits(params, src, domain, prefixes);
  };
  return beam_decode(scorer, model.config().vocab, cfg);
}

std::vector<std::string> translate_corpus(
    const MixModel& model, const std::vector<Tensor>& params,
    const std::vector<SentencePair>& pairs, const Vocabulary& vocab,
    const BeamConfig& cfg, int domain_override) {
  std::vector<std::string> out;
  out.reserve(pairs.size());
  for (const SentencePair& p : pairs) {
    const int domain = domain_override >= 0 ? domain_override : p.domain;
    const DecodeResult r = beam_decode(model, params, p.src, domain, cfg);
    const std::vector<std::string> toks = vocab.decode(r.ids);
    std::string line;
    for (size_t i = 0; i < toks.size(); ++i) {
      if (i) line += ' ';
      line += toks[i];
    }
    out.push_back(std::move(line));
  }
  return out;
}

}  // namespace rml
