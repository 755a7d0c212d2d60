#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rml/corpus.hpp"

// Curriculum task construction. A scored adaptation pool is ordered from
// most general-like to most domain-specific, cut into one chunk per task,
// and each chunk is divided into a support and a query set under token
// budgets. Tasks therefore descend in difficulty: task 0 holds the pairs
// the domain classifier finds closest to general text.

namespace rml {

struct ScoredPair {
  RawPair pair;
  double score{0.0};
  std::string domain;
};

struct CurriculumConfig {
  int n_tasks{10};
  long support_tokens{8000};
  long query_tokens{16000};
  enum class Strategy { kTokenBudget, kBalanced };
  Strategy strategy{Strategy::kTokenBudget};

  void validate() const;
};

struct MetaTask {
  int index{0};
  std::vector<ScoredPair> support, query;
};

struct CurriculumResult {
  std::vector<MetaTask> tasks;
  std::vector<std::string> warnings;
};

long pair_tokens(const RawPair& p);

// Deterministic: equal inputs produce identical tasks. Ties in score keep
// the pool order.
CurriculumResult build_curriculum(const std::vector<ScoredPair>& pool,
                                  const CurriculumConfig& cfg);

// One line per pair:
// task_index<TAB>role<TAB>domain<TAB>score<TAB>src<TAB>tgt
void write_task_manifest(const std::filesystem::path& path,
                         const CurriculumResult& cur);
std::vector<MetaTask> load_task_manifest(const std::filesystem::path& path);

}  // namespace rml
