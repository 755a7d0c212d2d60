#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "rml/model.hpp"
#include "rml/rng.hpp"
#include "rml/tokens.hpp"

// Corpus tooling: whitespace-tokenized parallel text on disk as .src/.tgt
// line pairs, a frequency-built vocabulary with four reserved slots, a
// synthetic family of domain corpora generated by a global substitution
// cipher, and the pool splits used by meta-training.

namespace rml {

struct RawPair {
  std::vector<std::string> src, tgt;
};

std::vector<std::string> split_tokens(const std::string& line);
std::string join_tokens(const std::vector<std::string>& toks);

// Line-aligned parallel text; throws DataError when the sides disagree.
std::vector<RawPair> load_parallel(const std::filesystem::path& src_path,
                                   const std::filesystem::path& tgt_path);
void write_parallel(const std::filesystem::path& src_path,
                    const std::filesystem::path& tgt_path,
                    const std::vector<RawPair>& pairs);

struct IngestStats {
  size_t kept{0}, dropped_duplicate{0}, dropped_length{0}, dropped_empty{0};
};

// Deduplicates exact pairs and drops empty or overlong sentences.
std::vector<RawPair> clean_pairs(const std::vector<RawPair>& pairs,
                                 int max_tokens, IngestStats* stats);

class Vocabulary {
 public:
  // Frequency-ranked over both sides of every pair; ties break
  // lexicographically. cap bounds the total size including the four
  // reserved tokens.
  static Vocabulary build(const std::vector<const std::vector<RawPair>*>& corpora,
                          int cap);
  static Vocabulary build(const std::vector<RawPair>& pairs, int cap);

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode(const std::vector<std::string>& toks) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  void reindex();
};

SentencePair encode_pair(const Vocabulary& v, const RawPair& p, int domain);
std::vector<SentencePair> encode_pairs(const Vocabulary& v,
                                       const std::vector<RawPair>& pairs,
                                       int domain);

// ---------------------------------------------------------------------------
// Synthetic corpora. Every domain owns a pool of source word types; a fixed
// share is borrowed from the general domain's pool so domains overlap by a
// controllable amount, and the rest are private to the domain. One global
// injective map sends each source type to its target type, so the reference
// translation of a sentence is its word-for-word image and the mapping for
// a private type can only be learned from that domain's data.
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::vector<std::string> domains;  // must include "general"
  int types_per_domain{80};
  double overlap{0.3};  // fraction of each domain's types shared with general
  int pairs_per_domain{500};
  int min_len{4};
  int max_len{12};

  void validate() const;
};

std::map<std::string, std::vector<RawPair>> synthesize_corpus(
    const SynthConfig& cfg, uint64_t seed);

// The target-side image of a source type under the global cipher.
std::string cipher_target(const std::string& src_type);

// ---------------------------------------------------------------------------
// Meta splits: one seeded shuffle, then disjoint slices.
// ---------------------------------------------------------------------------

struct MetaSplit {
  std::vector<RawPair> train;    // adaptation pool for curriculum tasks
  std::vector<RawPair> support;  // held-out task support set
  std::vector<RawPair> query;    // held-out task query set
};

MetaSplit make_meta_split(const std::vector<RawPair>& pool, int n_train,
                          int n_support, int n_query, Rng& rng);

}  // namespace rml
