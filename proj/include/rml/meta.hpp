#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rml/model.hpp"

// Episodic meta-training. Each task exposes a support objective for the
// inner adaptation step and a query objective for the outer update:
//
//   theta' = theta - alpha * grad support(theta)
//   theta  = theta - beta  * outer_grad
//
// where outer_grad is grad query(theta') in first-order mode, and
// (I - alpha * H_support(theta)) * grad query(theta') in second-order mode
// with the curvature term supplied through a Hessian-vector product.
//
// Every task loss carries two views of the same batch: `sentence` is the
// plain token cross-entropy and `word` is the routed composite (the same
// cross-entropy plus the routing term), and optimization descends their sum.
// The generation term therefore counts twice; this weighting is deliberate
// and pinned by tests.

namespace rml {

using ParamSet = std::vector<Tensor>;

struct MetaLoss {
  double sentence{0.0};
  double word{0.0};
  double total{0.0};  // always sentence + word
};

// An adaptation episode. Gradients returned through `grads` are of the
// combined objective `total` at the evaluated parameters.
struct AdaptationTask {
  virtual ~AdaptationTask() = default;

  virtual MetaLoss support_loss(const ParamSet& params, ParamSet* grads) = 0;
  virtual MetaLoss query_loss(const ParamSet& params, ParamSet* grads) = 0;

  // Hessian-vector product of support `total` at params, for second-order
  // outer gradients. Objectives without curvature information reject it.
  virtual void support_hvp(const ParamSet& params, const ParamSet& dir,
                           ParamSet& out);

  virtual std::string param_name(int i) const;
};

// Bridges a mixed-domain translation model into the episode interface.
// sentence = gen, word = gen + mix, so combined gradients weight gen by 2.
class ModelTask : public AdaptationTask {
 public:
  ModelTask(const MixModel& model, std::vector<SentencePair> support,
            std::vector<SentencePair> query, int chunk_pairs = 8);

  MetaLoss support_loss(const ParamSet& params, ParamSet* grads) override;
  MetaLoss query_loss(const ParamSet& params, ParamSet* grads) override;
  void support_hvp(const ParamSet& params, const ParamSet& dir,
                   ParamSet& out) override;
  std::string param_name(int i) const override;

  const std::vector<SentencePair>& support() const { return support_; }
  const std::vector<SentencePair>& query() const { return query_; }

 private:
  const MixModel& model_;
  std::vector<SentencePair> support_, query_;
  int chunk_;
};

struct MetaConfig {
  double alpha{1e-3};  // inner learning rate
  double beta{5e-5};   // outer learning rate
  int epochs{1};
  enum class Order { kFirstOrder, kSecondOrder };
  Order order{Order::kFirstOrder};
  double divergence_threshold{1e6};

  void validate() const;
};

struct MetaLogEntry {
  int epoch{0};
  int task_index{0};
  double support_loss{0.0};
  double query_loss_sentence{0.0};
  double query_loss_word{0.0};
};

struct MetaTrainResult {
  ParamSet params;
  std::vector<MetaLogEntry> log;
};

// Exactly one gradient step on the support objective. alpha = 0 returns
// theta unchanged. Non-finite gradients abort, naming the parameter block.
ParamSet inner_update(AdaptationTask& task, const ParamSet& theta, double alpha,
                      MetaLoss* support_out = nullptr);

// Runs cfg.epochs sweeps over the tasks in order, one outer update per task.
// on_epoch, when set, observes the parameters after each full sweep.
MetaTrainResult meta_train(
    const std::vector<AdaptationTask*>& tasks, ParamSet theta,
    const MetaConfig& cfg,
    const std::function<void(int epoch, const ParamSet&)>& on_epoch = {});

// One log line per record: {"epoch":..,"task_index":..,"support_loss":..,
// "query_loss_sentence":..,"query_loss_word":..}
void write_meta_log(const std::filesystem::path& path,
                    const std::vector<MetaLogEntry>& log);

// Plain gradient descent on one objective's support loss; the adaptation
// phase after meta-training. steps = 0 returns theta unchanged.
ParamSet descend(AdaptationTask& task, ParamSet theta, double lr, int steps);

enum class FtStrategy { kSpecific, kSeen, kUnseen, kAll };
FtStrategy parse_ft_strategy(const std::string& name);
std::string ft_strategy_name(FtStrategy s);

// Selects the adaptation corpora for a strategy. kSpecific keeps one entry
// per domain; the others collapse to a single entry ("seen", "unseen",
// "all") holding the union of the matching domains' pairs, in domain order.
std::map<std::string, std::vector<SentencePair>> finetune_corpora(
    const std::map<std::string, std::vector<SentencePair>>& support_by_domain,
    const std::set<std::string>& seen_domains, FtStrategy strategy);

}  // namespace rml
