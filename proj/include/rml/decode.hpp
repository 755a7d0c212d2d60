#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rml/corpus.hpp"
#include "rml/model.hpp"

// Beam search over next-token scores. Hypotheses are ranked by summed token
// log-probability, optionally divided by length^length_penalty; beam size 1
// reduces to greedy decoding. Ties break toward earlier hypotheses and
// lower token ids, which keeps the search deterministic.

namespace rml {

struct BeamConfig {
  int beam_size{5};
  int max_length{64};
  double length_penalty{0.0};  // 0 disables normalization

  void validate() const;
};

struct DecodeResult {
  std::vector<int> ids;    // generated tokens, end marker excluded
  double log_prob{0.0};    // raw sum, end marker included when finished
  bool truncated{false};   // no hypothesis finished within max_length
};

// Returns one logits row per prefix, in order.
using StepScorer =
    std::function<Tensor(const std::vector<std::vector<int>>& prefixes)>;

// All live prefixes are scored in a single call per step.
DecodeResult beam_decode(const StepScorer& scorer, int vocab,
                         const BeamConfig& cfg);

DecodeResult beam_decode(const MixModel& model,
                         const std::vector<Tensor>& params,
                         const std::vector<int>& src, int domain,
                         const BeamConfig& cfg);

// Decodes every source and detokenizes with the vocabulary. A non-negative
// domain_override routes every sentence through that domain's bank instead
// of the pair's own label.
std::vector<std::string> translate_corpus(const MixModel& model,
                                          const std::vector<Tensor>& params,
                                          const std::vector<SentencePair>& pairs,
                                          const Vocabulary& vocab,
                                          const BeamConfig& cfg,
                                          int domain_override = -1);

}  // namespace rml
