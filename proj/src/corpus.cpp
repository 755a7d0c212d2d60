#include "rml/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "rml/errors.hpp"

namespace rml {

namespace {

const char* kSpecialNames[kNumSpecials] = {"<pad>", "<bos>", "<eos>", "<unk>"};

bool is_special_name(const std::string& tok) {
  for (const char* s : kSpecialNames)
    if (tok == s) return true;
  return false;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw DataError("cannot open " + path.string());
  }
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

std::vector<RawPair> load_parallel(const std::filesystem::path& src_path,
                                   const std::filesystem::path& tgt_path) {
  auto src = read_lines(src_path);
  auto tgt = read_lines(tgt_path);
  if (src.size() != tgt.size()) {
    throw DataError("misaligned parallel corpus: " + src_path.string() +
                    " has " + std::to_string(src.size()) + " lines, " +
                    tgt_path.string() + " has " + std::to_string(tgt.size()));
  }
  std::vector<RawPair> out;
  out.reserve(src.size());
  for (size_t i = 0; i < src.size(); ++i) {
    out.push_back({split_tokens(src[i]), split_tokens(tgt[i])});
  }
  return out;
}

void write_parallel(const std::filesystem::path& src_path,
                    const std::filesystem::path& tgt_path,
                    const std::vector<RawPair>& pairs) {
  for (const auto& path : {src_path, tgt_path}) {
    if (path.has_parent_path())
      std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream src(src_path, std::ios::trunc), tgt(tgt_path, std::ios::trunc);
  if (!src || !tgt) {
    throw DataError("cannot write parallel corpus to " + src_path.string());
  }
  for (const RawPair& p : pairs) {
    src << join_tokens(p.src) << '\n';
    tgt << join_tokens(p.tgt) << '\n';
  }
}

std::vector<RawPair> clean_pairs(const std::vector<RawPair>& pairs,
                                 int max_tokens, IngestStats* stats) {
  IngestStats local;
  std::vector<RawPair> out;
  std::set<std::string> seen;
  for (const RawPair& p : pairs) {
    if (p.src.empty() || p.tgt.empty()) {
      ++local.dropped_empty;
      continue;
    }
    if (static_cast<int>(p.src.size()) > max_tokens ||
        static_cast<int>(p.tgt.size()) > max_tokens) {
      ++local.dropped_length;
      continue;
    }
    std::string key = join_tokens(p.src) + "\t" + join_tokens(p.tgt);
    if (!seen.insert(std::move(key)).second) {
      ++local.dropped_duplicate;
      continue;
    }
    out.push_back(p);
  }
  local.kept = out.size();
  if (stats) *stats = local;
  return out;
}

Vocabulary Vocabulary::build(
    const std::vector<const std::vector<RawPair>*>& corpora, int cap) {
  if (cap <= kNumSpecials) {
    throw ConfigError("vocabulary cap " + std::to_string(cap) +
                      " leaves no room beyond the " +
                      std::to_string(int(kNumSpecials)) + " reserved tokens");
  }
  std::map<std::string, long> counts;
  for (const auto* pairs : corpora) {
    for (const RawPair& p : *pairs) {
      for (const auto& t : p.src)
        if (!is_special_name(t)) ++counts[t];
      for (const auto& t : p.tgt)
        if (!is_special_name(t)) ++counts[t];
    }
  }
  std::vector<std::pair<std::string, long>> ranked(counts.begin(),
                                                   counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const char* s : kSpecialNames) v.tokens_.emplace_back(s);
  const size_t room = static_cast<size_t>(cap) - kNumSpecials;
  for (size_t i = 0; i < ranked.size() && i < room; ++i)
    v.tokens_.push_back(ranked[i].first);
  v.reindex();
  return v;
}

Vocabulary Vocabulary::build(const std::vector<RawPair>& pairs, int cap) {
  return build(std::vector<const std::vector<RawPair>*>{&pairs}, cap);
}

void Vocabulary::reindex() {
  index_.clear();
  for (size_t i = 0; i < tokens_.size(); ++i)
    index_[tokens_[i]] = static_cast<int>(i);
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw DataError("token id " + std::to_string(id) +
                    " outside vocabulary of " + std::to_string(size()));
  }
  return tokens_[id];
}

std::vector<int> Vocabulary::encode(
    const std::vector<std::string>& toks) const {
  std::vector<int> out;
  out.reserve(toks.size());
  for (const auto& t : toks) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    out.push_back(token(i));
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) {
    throw DataError("cannot write vocabulary to " + path.string());
  }
  for (const auto& t : tokens_) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.size() < kNumSpecials) {
    throw DataError("vocabulary " + path.string() + " has only " +
                    std::to_string(lines.size()) + " entries");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (lines[i] != kSpecialNames[i]) {
      throw DataError("vocabulary " + path.string() + " line " +
                      std::to_string(i + 1) + " must be " + kSpecialNames[i]);
    }
  }
  Vocabulary v;
  v.tokens_ = std::move(lines);
  v.reindex();
  return v;
}

SentencePair encode_pair(const Vocabulary& v, const RawPair& p, int domain) {
  SentencePair out;
  out.src = v.encode(p.src);
  out.tgt = v.encode(p.tgt);
  out.domain = domain;
  return out;
}

std::vector<SentencePair> encode_pairs(const Vocabulary& v,
                                       const std::vector<RawPair>& pairs,
                                       int domain) {
  std::vector<SentencePair> out;
  out.reserve(pairs.size());
  for (const RawPair& p : pairs) out.push_back(encode_pair(v, p, domain));
  return out;
}

void SynthConfig::validate() const {
  if (std::find(domains.begin(), domains.end(), "general") == domains.end()) {
    throw ConfigError("synthetic corpus needs a domain named 'general'");
  }
  std::set<std::string> uniq(domains.begin(), domains.end());
  if (uniq.size() != domains.size()) {
    throw ConfigError("duplicate domain names in synthetic corpus config");
  }
  if (types_per_domain < 4) {
    throw ConfigError("types_per_domain must be at least 4");
  }
  if (overlap < 0.0 || overlap > 1.0) {
    throw ConfigError("overlap must lie in [0,1], got " +
                      std::to_string(overlap));
  }
  if (pairs_per_domain < 1 || min_len < 1 || max_len < min_len) {
    throw ConfigError("bad sentence counts or lengths in synth config");
  }
}

std::string cipher_target(const std::string& src_type) { return "T" + src_type; }

std::map<std::string, std::vector<RawPair>> synthesize_corpus(
    const SynthConfig& cfg, uint64_t seed) {
  cfg.validate();

  // General's own word types anchor the shared portion of every domain.
  std::vector<std::string> general_types;
  for (int i = 0; i < cfg.types_per_domain; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "g%03d", i);
    general_types.emplace_back(buf);
  }
  const int n_shared =
      static_cast<int>(std::lround(cfg.overlap * cfg.types_per_domain));

  std::map<std::string, std::vector<RawPair>> out;
  for (size_t di = 0; di < cfg.domains.size(); ++di) {
    const std::string& domain = cfg.domains[di];
    std::vector<std::string> types;
    if (domain == "general") {
      types = general_types;
    } else {
      Rng pick = Rng::stream(seed, "overlap." + domain);
      std::vector<std::string> pool = general_types;
      pick.shuffle(pool);
      types.assign(pool.begin(), pool.begin() + n_shared);
      for (int i = n_shared; i < cfg.types_per_domain; ++i) {
        types.push_back(domain + "_" + std::to_string(i - n_shared));
      }
    }

    Rng rng = Rng::stream(seed, "synth." + domain);
    std::set<std::string> seen;
    std::vector<RawPair> pairs;
    long attempts = 0;
    const long max_attempts = 50L * cfg.pairs_per_domain;
    while (static_cast<int>(pairs.size()) < cfg.pairs_per_domain) {
      if (++attempts > max_attempts) {
        throw DataError("could not draw " +
                        std::to_string(cfg.pairs_per_domain) +
                        " distinct sentences for domain " + domain +
                        "; enlarge types_per_domain or the length range");
      }
      const int len = rng.uniform_int(cfg.min_len, cfg.max_len);
      RawPair p;
      for (int i = 0; i < len; ++i) {
        const std::string& t =
            types[rng.uniform_int(0, static_cast<int>(types.size()) - 1)];
        p.src.push_back(t);
        p.tgt.push_back(cipher_target(t));
      }
      if (!seen.insert(join_tokens(p.src)).second) continue;
      pairs.push_back(std::move(p));
    }
    out[domain] = std::move(pairs);
  }
  return out;
}

MetaSplit make_meta_split(const std::vector<RawPair>& pool, int n_train,
                          int n_support, int n_query, Rng& rng) {
  const long need = long(n_train) + n_support + n_query;
  if (n_train < 0 || n_support < 1 || n_query < 1) {
    throw ConfigError("meta split sizes must be positive");
  }
  if (static_cast<long>(pool.size()) < need) {
    throw DataError("meta split needs " + std::to_string(need) +
                    " pairs but the pool holds " +
                    std::to_string(pool.size()));
  }
  std::vector<RawPair> shuffled = pool;
  rng.shuffle(shuffled);
  MetaSplit s;
  auto it = shuffled.begin();
  s.train.assign(it, it + n_train);
  it += n_train;
  s.support.assign(it, it + n_support);
  it += n_support;
  s.query.assign(it, it + n_query);
  return s;
}

}  // namespace rml
