#include "rml/classifier.hpp"

#include <algorithm>
#include <cmath>

#include "rml/errors.hpp"
#include "rml/tape.hpp"

namespace rml {

namespace {

constexpr int kEmbed = 0, kW1 = 1, kB1 = 2, kW2 = 3, kB2 = 4;

Tape::Val sentence_logits(Tape& t, const std::vector<Tape::Val>& pv,
                          const std::vector<int>& tokens) {
  const int n = static_cast<int>(tokens.size());
  auto e = t.embedding(pv[kEmbed], tokens);
  auto avg = t.matmul(t.constant(Tensor(1, n, 1.0 / n)), e);
  auto h = t.tanh(t.add(t.matmul(avg, pv[kW1]), pv[kB1]));
  return t.add(t.matmul(h, pv[kW2]), pv[kB2]);
}

}  // namespace

DomainClassifier::DomainClassifier(int vocab, int hidden,
                                   std::vector<std::string> labels)
    : vocab_(vocab), hidden_(hidden), labels_(std::move(labels)) {
  if (vocab_ < 1 || hidden_ < 1) {
    throw ConfigError("classifier needs positive vocab and hidden sizes");
  }
  if (labels_.size() < 2) {
    throw ConfigError("classifier needs at least two labels, got " +
                      std::to_string(labels_.size()));
  }
  const int L = static_cast<int>(labels_.size());
  params_ = {Tensor(vocab_, hidden_), Tensor(hidden_, hidden_),
             Tensor(1, hidden_), Tensor(hidden_, L), Tensor(1, L)};
  find_general();
}

void DomainClassifier::find_general() {
  general_ = -1;
  for (size_t i = 0; i < labels_.size(); ++i)
    if (labels_[i] == "general") general_ = static_cast<int>(i);
}

DomainClassifier DomainClassifier::train(
    const std::vector<ClassifierExample>& data,
    const std::vector<std::string>& labels, int vocab,
    const ClassifierConfig& cfg, uint64_t seed, ClassifierReport* report) {
  if (data.empty()) {
    throw DataError("classifier training set is empty");
  }
  const int L = static_cast<int>(labels.size());
  for (const auto& ex : data) {
    if (ex.label < 0 || ex.label >= L) {
      throw DataError("classifier example labeled " +
                      std::to_string(ex.label) + " outside " +
                      std::to_string(L) + " labels");
    }
    if (ex.tokens.empty()) {
      throw DataError("classifier example with no tokens");
    }
  }

  DomainClassifier c(vocab, cfg.hidden, labels);
  {
    Rng init = Rng::stream(seed, "classifier.init");
    const double se = 1.0 / std::sqrt(double(cfg.hidden));
    for (auto& v : c.params_[kEmbed].data) v = init.normal() * se;
    const double l1 = std::sqrt(6.0 / double(2 * cfg.hidden));
    for (auto& v : c.params_[kW1].data) v = init.uniform(-l1, l1);
    const double l2 = std::sqrt(6.0 / double(cfg.hidden + L));
    for (auto& v : c.params_[kW2].data) v = init.uniform(-l2, l2);
  }

  // Stratified holdout: a fixed share of each label, after a seeded shuffle.
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffler = Rng::stream(seed, "classifier.split");
  shuffler.shuffle(order);
  std::vector<size_t> train_idx, hold_idx;
  std::vector<long> label_total(L, 0), label_held(L, 0);
  for (size_t i : order) ++label_total[data[i].label];
  for (size_t i : order) {
    const int l = data[i].label;
    const long want =
        static_cast<long>(std::floor(cfg.holdout * double(label_total[l])));
    if (label_held[l] < want) {
      hold_idx.push_back(i);
      ++label_held[l];
    } else {
      train_idx.push_back(i);
    }
  }
  if (train_idx.empty()) {
    throw DataError("holdout share leaves no classifier training data");
  }

  ClassifierReport rep;
  rep.train_n = train_idx.size();
  rep.holdout_n = hold_idx.size();

  Rng epoch_rng = Rng::stream(seed, "classifier.epochs");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    epoch_rng.shuffle(train_idx);
    double loss_sum = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < train_idx.size();
         start += static_cast<size_t>(cfg.batch)) {
      const size_t end =
          std::min(train_idx.size(), start + static_cast<size_t>(cfg.batch));
      Tape t;
      std::vector<Tape::Val> pv;
      for (const Tensor& p : c.params_) pv.push_back(t.input(p));
      Tape::Val loss{};
      bool first = true;
      for (size_t i = start; i < end; ++i) {
        const auto& ex = data[train_idx[i]];
        auto ce = t.cross_entropy(sentence_logits(t, pv, ex.tokens),
                                  {ex.label});
        loss = first ? ce : t.add(loss, ce);
        first = false;
      }
      loss = t.scale(loss, 1.0 / double(end - start));
      loss_sum += t.value(loss).at(0, 0);
      ++batches;
      t.backward(loss);
      for (size_t i = 0; i < c.params_.size(); ++i) {
        const Tensor& g = t.grad(pv[i]);
        for (size_t j = 0; j < g.numel(); ++j)
          c.params_[i].data[j] -= cfg.lr * g.data[j];
      }
    }
    rep.epoch_loss.push_back(batches ? loss_sum / double(batches) : 0.0);
  }

  size_t correct = 0;
  for (size_t i : hold_idx)
    if (c.predict(data[i].tokens) == data[i].label) ++correct;
  rep.holdout_accuracy =
      hold_idx.empty() ? 0.0 : double(correct) / double(hold_idx.size());
  if (report) *report = rep;
  return c;
}

std::vector<double> DomainClassifier::distribution(
    const std::vector<int>& tokens) const {
  if (tokens.empty()) {
    throw DataError("cannot score an empty sentence");
  }
  for (int id : tokens) {
    if (id < 0 || id >= vocab_) {
      throw DataError("token id " + std::to_string(id) +
                      " outside classifier vocabulary of " +
                      std::to_string(vocab_));
    }
  }
  namespace R = kernels::ref;
  const int n = static_cast<int>(tokens.size());
  Tensor e = R::embedding_rows(params_[kEmbed], tokens);
  Tensor avg = R::matmul(Tensor(1, n, 1.0 / n), e);
  Tensor h = R::tanh_ew(R::add(R::matmul(avg, params_[kW1]), params_[kB1]));
  Tensor logits = R::add(R::matmul(h, params_[kW2]), params_[kB2]);
  Tensor p = R::softmax_rows(logits);
  return std::vector<double>(p.data.begin(), p.data.end());
}

int DomainClassifier::predict(const std::vector<int>& tokens) const {
  auto p = distribution(tokens);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

double DomainClassifier::general_score(const std::vector<int>& tokens) const {
  if (general_ < 0) {
    throw ConfigError("classifier has no 'general' label to score against");
  }
  return distribution(tokens)[general_];
}

Checkpoint DomainClassifier::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = "domain-classifier";
  ck.meta = {{"vocab", vocab_}, {"hidden", hidden_}, {"labels", labels_}};
  const char* names[] = {"embed", "w1", "b1", "w2", "b2"};
  for (size_t i = 0; i < params_.size(); ++i)
    ck.tensors.emplace_back(names[i], params_[i]);
  return ck;
}

DomainClassifier DomainClassifier::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "domain-classifier") {
    throw DataError("checkpoint kind '" + ck.kind +
                    "' is not a domain classifier");
  }
  auto labels = ck.meta.at("labels").get<std::vector<std::string>>();
  DomainClassifier c(ck.meta.at("vocab").get<int>(),
                     ck.meta.at("hidden").get<int>(), labels);
  if (ck.tensors.size() != c.params_.size()) {
    throw DataError("classifier checkpoint holds " +
                    std::to_string(ck.tensors.size()) + " tensors, expected " +
                    std::to_string(c.params_.size()));
  }
  for (size_t i = 0; i < c.params_.size(); ++i) {
    if (!ck.tensors[i].second.same_shape(c.params_[i])) {
      throw DataError("classifier tensor " + ck.tensors[i].first +
                      " has shape " + ck.tensors[i].second.shape_str());
    }
    c.params_[i] = ck.tensors[i].second;
  }
  return c;
}

}  // namespace rml
