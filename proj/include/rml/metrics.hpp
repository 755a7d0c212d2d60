#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rml/tensor.hpp"

// Corpus-level translation metrics over whitespace-token strings, plus the
// cross-domain robustness summary.
//
// bleu: corpus BLEU-4. Clipped n-gram precisions for n = 1..4 from counts
// pooled over the corpus, geometric mean, brevity penalty
// min(1, e^(1 - r/c)). A zero match count at order n falls back to
// 1 / (2^z * denom) where z counts the zero orders so far; denominators are
// floored at 1 so short segments stay defined.
//
// chrf: character n-gram F-score, n = 1..6, beta = 2, whitespace removed
// before counting. Per sentence the F-scores are averaged over the orders
// present on either side, then averaged over the corpus.

namespace rml {

double bleu(const std::vector<std::string>& hypotheses,
            const std::vector<std::string>& references);
double chrf(const std::vector<std::string>& hypotheses,
            const std::vector<std::string>& references);

struct DomainEval {
  std::string domain;
  double bleu{0.0};
  double chrf{0.0};
  long n_sentences{0};
};

// One JSON record per line: {"domain":..,"bleu":..,"chrf":..,"n_sentences":..}
void write_metric_report(const std::filesystem::path& path,
                         const std::vector<DomainEval>& rows);

// Grid of scores for k fine-tuned models crossed with k test domains.
// cells(J, i) holds the score of the model adapted toward domain J on the
// test set of domain i; baseline[i] is the unadapted model on domain i.
struct RobustnessMatrix {
  std::vector<std::string> domains;
  Tensor cells;
  std::vector<double> baseline;
  double avg_diff{0.0};  // mean over all cells of cells(J,i) - baseline[i]
};

RobustnessMatrix build_robustness(std::vector<std::string> domains,
                                  Tensor cells, std::vector<double> baseline);

void write_robustness(const std::filesystem::path& path,
                      const RobustnessMatrix& m);
std::string format_robustness(const RobustnessMatrix& m);

}  // namespace rml
