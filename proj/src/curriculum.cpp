#include "rml/curriculum.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "rml/errors.hpp"

namespace rml {
namespace {

std::string join(const std::vector<std::string>& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

std::string format_score(double s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", s);
  return buf;
}

// Chunk sizes for cutting n pairs into n_tasks contiguous pieces; the first
// n % n_tasks chunks take the extra pair.
std::vector<long> chunk_sizes(long n, int n_tasks) {
  std::vector<long> sizes;
  const long base = n / n_tasks;
  const long rem = n % n_tasks;
  for (int i = 0; i < n_tasks; ++i) sizes.push_back(base + (i < rem ? 1 : 0));
  return sizes;
}

// Divides one chunk into support and query. Support aims for the budget's
// proportional share of the chunk but never starts a pair that would push it
// past support_tokens; query takes what follows under the same rule. Either
// side is forced to hold at least one pair so no task comes out unusable.
void split_chunk(std::vector<ScoredPair> chunk, int task_index,
                 const CurriculumConfig& cfg, CurriculumResult& out) {
  MetaTask task;
  task.index = task_index;

  const double share = static_cast<double>(cfg.support_tokens) /
                       static_cast<double>(cfg.support_tokens + cfg.query_tokens);
  const size_t want_support = static_cast<size_t>(
      std::ceil(static_cast<double>(chunk.size()) * share));

  size_t i = 0;
  long used = 0;
  for (; i < chunk.size() && task.support.size() < want_support; ++i) {
    const long t = pair_tokens(chunk[i].pair);
    if (!task.support.empty() && used + t > cfg.support_tokens) break;
    used += t;
    task.support.push_back(std::move(chunk[i]));
  }
  used = 0;
  for (; i < chunk.size(); ++i) {
    const long t = pair_tokens(chunk[i].pair);
    if (!task.query.empty() && used + t > cfg.query_tokens) break;
    used += t;
    task.query.push_back(std::move(chunk[i]));
  }
  if (i < chunk.size()) {
    out.warnings.push_back("task " + std::to_string(task_index) + " dropped " +
                           std::to_string(chunk.size() - i) +
                           " pair(s) over the token budgets");
  }
  if (task.query.empty()) {
    out.warnings.push_back("task " + std::to_string(task_index) +
                           " has no query pairs");
  }
  out.tasks.push_back(std::move(task));
}

}  // namespace

void CurriculumConfig::validate() const {
  if (n_tasks < 1) throw ConfigError("n_tasks must be at least 1");
  if (support_tokens < 1 || query_tokens < 1)
    throw ConfigError("token budgets must be positive");
}

long pair_tokens(const RawPair& p) {
  return static_cast<long>(p.src.size() + p.tgt.size());
}

CurriculumResult build_curriculum(const std::vector<ScoredPair>& pool,
                                  const CurriculumConfig& cfg) {
  cfg.validate();
  if (pool.empty()) throw DataError("cannot build a curriculum from an empty pool");

  CurriculumResult out;
  const long n = static_cast<long>(pool.size());
  int n_tasks = cfg.n_tasks;
  if (n < n_tasks) {
    out.warnings.push_back("pool of " + std::to_string(n) +
                           " pair(s) supports only that many tasks; asked for " +
                           std::to_string(cfg.n_tasks));
    n_tasks = static_cast<int>(n);
  }
  const std::vector<long> sizes = chunk_sizes(n, n_tasks);

  if (cfg.strategy == CurriculumConfig::Strategy::kTokenBudget) {
    std::vector<ScoredPair> sorted = pool;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const ScoredPair& a, const ScoredPair& b) {
                       return a.score > b.score;
                     });
    size_t at = 0;
    for (int t = 0; t < n_tasks; ++t) {
      std::vector<ScoredPair> chunk(sorted.begin() + at,
                                    sorted.begin() + at + sizes[t]);
      at += sizes[t];
      split_chunk(std::move(chunk), t, cfg, out);
    }
    return out;
  }

  // Balanced strategy: each task draws a near-equal count from every domain
  // that still has pairs, remainder slots going to the domains with the
  // highest next available score. Within a domain, scores descend. When a
  // domain cannot cover its share the slack is redistributed round-robin
  // over the others and a warning is recorded.
  std::map<std::string, std::vector<ScoredPair>> queues;
  for (const ScoredPair& p : pool) queues[p.domain].push_back(p);
  std::map<std::string, size_t> next;
  for (auto& [dom, q] : queues) {
    std::stable_sort(q.begin(), q.end(),
                     [](const ScoredPair& a, const ScoredPair& b) {
                       return a.score > b.score;
                     });
    next[dom] = 0;
  }
  auto remaining = [&](const std::string& dom) {
    return queues[dom].size() - next[dom];
  };
  auto head_score = [&](const std::string& dom) {
    return queues[dom][next[dom]].score;
  };

  for (int t = 0; t < n_tasks; ++t) {
    std::vector<std::string> live;
    for (auto& [dom, q] : queues)
      if (next[dom] < q.size()) live.push_back(dom);
    std::vector<std::string> by_score = live;
    std::stable_sort(by_score.begin(), by_score.end(),
                     [&](const std::string& a, const std::string& b) {
                       return head_score(a) > head_score(b);
                     });

    const long slots = sizes[t];
    const long d = static_cast<long>(live.size());
    std::map<std::string, long> take;
    for (long i = 0; i < d; ++i) {
      take[by_score[i]] = slots / d + (i < slots % d ? 1 : 0);
    }
    long deficit = 0;
    for (const std::string& dom : live) {
      const long have = static_cast<long>(remaining(dom));
      if (take[dom] > have) {
        deficit += take[dom] - have;
        take[dom] = have;
        out.warnings.push_back("task " + std::to_string(t) + ": domain '" +
                               dom + "' exhausted; rebalancing its slots");
      }
    }
    while (deficit > 0) {
      bool moved = false;
      for (const std::string& dom : by_score) {
        if (deficit == 0) break;
        if (take[dom] < static_cast<long>(remaining(dom))) {
          ++take[dom];
          --deficit;
          moved = true;
        }
      }
      if (!moved) break;  // every queue drained
    }

    // Interleave the task's pairs round by round so the support/query cut
    // mixes domains too.
    std::vector<ScoredPair> chunk;
    std::map<std::string, long> taken;
    bool any = true;
    while (any) {
      any = false;
      std::vector<std::string> round;
      for (const std::string& dom : live)
        if (taken[dom] < take[dom]) round.push_back(dom);
      std::stable_sort(round.begin(), round.end(),
                       [&](const std::string& a, const std::string& b) {
                         return head_score(a) > head_score(b);
                       });
      for (const std::string& dom : round) {
        chunk.push_back(queues[dom][next[dom]++]);
        ++taken[dom];
        any = true;
      }
    }
    split_chunk(std::move(chunk), t, cfg, out);
  }
  return out;
}

void write_task_manifest(const std::filesystem::path& path,
                         const CurriculumResult& cur) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  auto emit = [&](int index, const char* role, const ScoredPair& p) {
    f << index << '\t' << role << '\t' << p.domain << '\t'
      << format_score(p.score) << '\t' << join(p.pair.src) << '\t'
      << join(p.pair.tgt) << '\n';
  };
  for (const MetaTask& t : cur.tasks) {
    for (const ScoredPair& p : t.support) emit(t.index, "support", p);
    for (const ScoredPair& p : t.query) emit(t.index, "query", p);
  }
  if (!f.good()) throw DataError("failed writing " + path.string());
}

std::vector<MetaTask> load_task_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path.string());
  std::map<int, MetaTask> tasks;
  std::string line;
  long line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t start = 0;
    for (int c = 0; c < 5; ++c) {
      const size_t tab = line.find('\t', start);
      if (tab == std::string::npos)
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 6 tab-separated columns");
      cols.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    cols.push_back(line.substr(start));

    ScoredPair p;
    int index = 0;
    try {
      index = std::stoi(cols[0]);
      p.score = std::stod(cols[3]);
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": bad task index or score");
    }
    p.domain = cols[2];
    std::istringstream src(cols[4]), tgt(cols[5]);
    std::string tok;
    while (src >> tok) p.pair.src.push_back(tok);
    while (tgt >> tok) p.pair.tgt.push_back(tok);
    if (cols[1] != "support" && cols[1] != "query")
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": role must be support or query, got '" + cols[1] + "'");
    MetaTask& t = tasks[index];
    t.index = index;
    (cols[1] == "support" ? t.support : t.query).push_back(std::move(p));
  }
  std::vector<MetaTask> out;
  out.reserve(tasks.size());
  for (auto& [idx, t] : tasks) out.push_back(std::move(t));
  return out;
}

}  // namespace rml
