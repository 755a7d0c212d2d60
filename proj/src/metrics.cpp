#include "rml/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "rml/errors.hpp"
#include "json.hpp"

namespace rml {
namespace {

std::vector<std::string> split_tokens(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

void check_corpus(const std::vector<std::string>& hyp,
                  const std::vector<std::string>& ref) {
  if (hyp.empty()) throw DataError("metric over an empty corpus");
  if (hyp.size() != ref.size()) {
    throw DataError("corpus sides disagree: " + std::to_string(hyp.size()) +
                    " hypotheses vs " + std::to_string(ref.size()) +
                    " references");
  }
}

// Clipped matches and totals for token n-grams of one order.
void ngram_counts(const std::vector<std::string>& hyp,
                  const std::vector<std::string>& ref, int n, long* matched,
                  long* total) {
  std::map<std::vector<std::string>, long> ref_counts;
  for (size_t i = 0; i + n <= ref.size(); ++i)
    ref_counts[{ref.begin() + i, ref.begin() + i + n}]++;
  std::map<std::vector<std::string>, long> hyp_counts;
  for (size_t i = 0; i + n <= hyp.size(); ++i)
    hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}]++;
  for (const auto& [gram, c] : hyp_counts) {
    *total += c;
    auto it = ref_counts.find(gram);
    if (it != ref_counts.end()) *matched += std::min(c, it->second);
  }
}

}  // namespace

double bleu(const std::vector<std::string>& hypotheses,
            const std::vector<std::string>& references) {
  check_corpus(hypotheses, references);
  long matched[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  long hyp_len = 0, ref_len = 0;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    const auto h = split_tokens(hypotheses[i]);
    const auto r = split_tokens(references[i]);
    hyp_len += static_cast<long>(h.size());
    ref_len += static_cast<long>(r.size());
    for (int n = 1; n <= 4; ++n)
      ngram_counts(h, r, n, &matched[n - 1], &total[n - 1]);
  }
  if (hyp_len == 0) return 0.0;

  double log_gm = 0.0;
  long zeros = 0;
  for (int n = 0; n < 4; ++n) {
    const double denom = static_cast<double>(std::max<long>(total[n], 1));
    double p;
    if (matched[n] > 0) {
      p = static_cast<double>(matched[n]) / denom;
    } else {
      ++zeros;
      p = 1.0 / (std::pow(2.0, static_cast<double>(zeros)) * denom);
    }
    log_gm += 0.25 * std::log(p);
  }
  const double bp =
      std::min(1.0, std::exp(1.0 - static_cast<double>(ref_len) / hyp_len));
  return 100.0 * bp * std::exp(log_gm);
}

double chrf(const std::vector<std::string>& hypotheses,
            const std::vector<std::string>& references) {
  check_corpus(hypotheses, references);
  constexpr int kMaxOrder = 6;
  constexpr double kBetaSq = 4.0;

  auto strip = [](const std::string& s) {
    std::string out;
    for (char c : s)
      if (!std::isspace(static_cast<unsigned char>(c))) out += c;
    return out;
  };

  double corpus_sum = 0.0;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    const std::string h = strip(hypotheses[i]);
    const std::string r = strip(references[i]);
    double f_sum = 0.0;
    int orders = 0;
    for (int n = 1; n <= kMaxOrder; ++n) {
      const long h_total = static_cast<long>(h.size()) - n + 1;
      const long r_total = static_cast<long>(r.size()) - n + 1;
      if (h_total <= 0 && r_total <= 0) continue;
      ++orders;
      if (h_total <= 0 || r_total <= 0) continue;  // one side absent: F = 0
      std::map<std::string, long> rc;
      for (long j = 0; j + n <= static_cast<long>(r.size()); ++j)
        rc[r.substr(j, n)]++;
      long matched = 0;
      std::map<std::string, long> hc;
      for (long j = 0; j + n <= static_cast<long>(h.size()); ++j)
        hc[h.substr(j, n)]++;
      for (const auto& [gram, c] : hc) {
        auto it = rc.find(gram);
        if (it != rc.end()) matched += std::min(c, it->second);
      }
      if (matched == 0) continue;
      const double prec = static_cast<double>(matched) / h_total;
      const double rec = static_cast<double>(matched) / r_total;
      f_sum += (1.0 + kBetaSq) * prec * rec / (kBetaSq * prec + rec);
    }
    corpus_sum += orders > 0 ? f_sum / orders : 0.0;
  }
  return 100.0 * corpus_sum / static_cast<double>(hypotheses.size());
}

void write_metric_report(const std::filesystem::path& path,
                         const std::vector<DomainEval>& rows) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  for (const DomainEval& r : rows) {
    nlohmann::ordered_json j;
    j["domain"] = r.domain;
    j["bleu"] = r.bleu;
    j["chrf"] = r.chrf;
    j["n_sentences"] = r.n_sentences;
    f << j.dump() << '\n';
  }
  if (!f.good()) throw DataError("failed writing " + path.string());
}

RobustnessMatrix build_robustness(std::vector<std::string> domains,
                                  Tensor cells, std::vector<double> baseline) {
  const int k = static_cast<int>(domains.size());
  if (k == 0) throw DataError("robustness matrix needs at least one domain");
  if (cells.rows() != k || cells.cols() != k) {
    throw ShapeError("robustness cells must be " + std::to_string(k) + "x" +
                     std::to_string(k) + ", got " + cells.shape_str());
  }
  if (static_cast<int>(baseline.size()) != k) {
    throw ShapeError("baseline vector has " + std::to_string(baseline.size()) +
                     " entries for " + std::to_string(k) + " domains");
  }
  RobustnessMatrix m;
  m.domains = std::move(domains);
  m.cells = std::move(cells);
  m.baseline = std::move(baseline);
  double sum = 0.0;
  for (int j = 0; j < k; ++j)
    for (int i = 0; i < k; ++i) sum += m.cells.at(j, i) - m.baseline[i];
  m.avg_diff = sum / static_cast<double>(k * k);
  return m;
}

void write_robustness(const std::filesystem::path& path,
                      const RobustnessMatrix& m) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  nlohmann::ordered_json j;
  j["domains"] = m.domains;
  auto& rows = j["cells"] = nlohmann::ordered_json::array();
  for (int r = 0; r < m.cells.rows(); ++r) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (int c = 0; c < m.cells.cols(); ++c) row.push_back(m.cells.at(r, c));
    rows.push_back(std::move(row));
  }
  j["baseline"] = m.baseline;
  j["avg_diff"] = m.avg_diff;
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
  if (!f.good()) throw DataError("failed writing " + path.string());
}

std::string format_robustness(const RobustnessMatrix& m) {
  std::ostringstream out;
  size_t w = 9;
  for (const auto& d : m.domains) w = std::max(w, d.size() + 2);
  auto cell = [&](const std::string& s) {
    out << s;
    for (size_t i = s.size(); i < w; ++i) out << ' ';
  };
  auto num = [&](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };

  cell("model\\test");
  for (const auto& d : m.domains) cell(d);
  out << '\n';
  for (int r = 0; r < m.cells.rows(); ++r) {
    cell(m.domains[r]);
    for (int c = 0; c < m.cells.cols(); ++c) cell(num(m.cells.at(r, c)));
    out << '\n';
  }
  cell("baseline");
  for (size_t c = 0; c < m.baseline.size(); ++c) cell(num(m.baseline[c]));
  out << '\n';
  out << "avg_diff " << num(m.avg_diff) << '\n';
  return out.str();
}

}  // namespace rml
