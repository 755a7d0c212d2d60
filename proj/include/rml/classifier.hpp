#pragma once

#include <string>
#include <vector>

#include "rml/checkpoint.hpp"
#include "rml/rng.hpp"
#include "rml/tensor.hpp"

// Sentence-level domain classifier: averaged token embeddings through one
// tanh hidden layer into a softmax over domain labels. Scores a sentence by
// the probability mass it puts on the general domain, which downstream
// curriculum code uses as the difficulty signal. A label scheme with one
// label per domain and a collapsed in-domain/general binary scheme are both
// just choices of the label vector here.

namespace rml {

struct ClassifierConfig {
  int hidden{32};
  double lr{0.2};
  int epochs{6};
  int batch{16};
  double holdout{0.1};
};

struct ClassifierExample {
  std::vector<int> tokens;
  int label{0};
};

struct ClassifierReport {
  double holdout_accuracy{0.0};
  size_t train_n{0}, holdout_n{0};
  std::vector<double> epoch_loss;
};

class DomainClassifier {
 public:
  DomainClassifier(int vocab, int hidden, std::vector<std::string> labels);

  static DomainClassifier train(const std::vector<ClassifierExample>& data,
                                const std::vector<std::string>& labels,
                                int vocab, const ClassifierConfig& cfg,
                                uint64_t seed, ClassifierReport* report);

  const std::vector<std::string>& labels() const { return labels_; }
  int vocab() const { return vocab_; }

  std::vector<double> distribution(const std::vector<int>& tokens) const;
  int predict(const std::vector<int>& tokens) const;
  // Probability of the label named "general"; the curriculum score.
  double general_score(const std::vector<int>& tokens) const;

  Checkpoint to_checkpoint() const;
  static DomainClassifier from_checkpoint(const Checkpoint& ck);

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  int vocab_{0};
  int hidden_{0};
  std::vector<std::string> labels_;
  int general_{-1};
  std::vector<Tensor> params_;  // embed, w1, b1, w2, b2

  void find_general();
};

}  // namespace rml
