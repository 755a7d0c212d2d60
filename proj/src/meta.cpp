#include "rml/meta.hpp"

#include <cmath>
#include <fstream>

#include "rml/errors.hpp"
#include "json.hpp"

namespace rml {
namespace {

MetaLoss from_loss_value(const MixModel::LossValue& lv) {
  MetaLoss ml;
  ml.sentence = lv.gen;
  ml.word = lv.total;
  ml.total = ml.sentence + ml.word;
  return ml;
}

void check_finite(const ParamSet& grads, const AdaptationTask& task,
                  const char* what) {
  for (size_t i = 0; i < grads.size(); ++i) {
    if (!all_finite(grads[i])) {
      throw NumericError(std::string(what) + " gradient for " +
                         task.param_name(static_cast<int>(i)) +
                         " is not finite");
    }
  }
}

void axpy(ParamSet& theta, const ParamSet& g, double factor) {
  for (size_t i = 0; i < theta.size(); ++i) {
    for (size_t j = 0; j < theta[i].numel(); ++j)
      theta[i].data[j] += factor * g[i].data[j];
  }
}

}  // namespace

void AdaptationTask::support_hvp(const ParamSet&, const ParamSet&, ParamSet&) {
  throw ConfigError(
      "this objective has no curvature product; second-order updates need one");
}

std::string AdaptationTask::param_name(int i) const {
  return "theta[" + std::to_string(i) + "]";
}

ModelTask::ModelTask(const MixModel& model, std::vector<SentencePair> support,
                     std::vector<SentencePair> query, int chunk_pairs)
    : model_(model),
      support_(std::move(support)),
      query_(std::move(query)),
      chunk_(chunk_pairs) {
  if (support_.empty()) throw DataError("task with an empty support set");
}

MetaLoss ModelTask::support_loss(const ParamSet& params, ParamSet* grads) {
  if (!grads) return from_loss_value(model_.eval_loss(params, support_, chunk_));
  return from_loss_value(
      model_.eval_loss_grad(params, support_, *grads, chunk_, 2.0));
}

MetaLoss ModelTask::query_loss(const ParamSet& params, ParamSet* grads) {
  if (query_.empty()) throw DataError("task with an empty query set");
  if (!grads) return from_loss_value(model_.eval_loss(params, query_, chunk_));
  return from_loss_value(
      model_.eval_loss_grad(params, query_, *grads, chunk_, 2.0));
}

void ModelTask::support_hvp(const ParamSet& params, const ParamSet& dir,
                            ParamSet& out) {
  model_.eval_loss_hvp(params, support_, dir, out, chunk_, 2.0);
}

std::string ModelTask::param_name(int i) const {
  const auto& schema = model_.schema();
  if (i < 0 || i >= static_cast<int>(schema.size()))
    return AdaptationTask::param_name(i);
  return schema[i].name;
}

void MetaConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("inner learning rate must be positive");
  if (!(beta > 0.0)) throw ConfigError("outer learning rate must be positive");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
}

ParamSet inner_update(AdaptationTask& task, const ParamSet& theta, double alpha,
                      MetaLoss* support_out) {
  ParamSet grads;
  const MetaLoss loss = task.support_loss(theta, &grads);
  if (support_out) *support_out = loss;
  ParamSet out = theta;
  if (alpha == 0.0) return out;
  check_finite(grads, task, "support");
  axpy(out, grads, -alpha);
  return out;
}

MetaTrainResult meta_train(
    const std::vector<AdaptationTask*>& tasks, ParamSet theta,
    const MetaConfig& cfg,
    const std::function<void(int epoch, const ParamSet&)>& on_epoch) {
  cfg.validate();
  if (tasks.empty()) throw DataError("meta-training needs at least one task");

  MetaTrainResult res;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t ti = 0; ti < tasks.size(); ++ti) {
      AdaptationTask& task = *tasks[ti];
      MetaLoss support{};
      ParamSet adapted = inner_update(task, theta, cfg.alpha, &support);

      ParamSet query_grads;
      const MetaLoss query = task.query_loss(adapted, &query_grads);
      if (!std::isfinite(query.total) ||
          query.total > cfg.divergence_threshold) {
        throw NumericError("meta-training diverged at epoch " +
                           std::to_string(epoch) + ", task " +
                           std::to_string(ti) + ": query loss " +
                           std::to_string(query.total));
      }
      check_finite(query_grads, task, "query");

      if (cfg.order == MetaConfig::Order::kSecondOrder) {
        // Chain through the inner step: outer = (I - alpha H_s(theta)) g_q.
        ParamSet hv;
        task.support_hvp(theta, query_grads, hv);
        check_finite(hv, task, "curvature");
        axpy(query_grads, hv, -cfg.alpha);
      }
      // The adapted parameters are kept and the outer step lands on top of
      // them, so each task contributes two chained updates.
      axpy(adapted, query_grads, -cfg.beta);
      theta = std::move(adapted);

      res.log.push_back({epoch, static_cast<int>(ti), support.total,
                         query.sentence, query.word});
    }
    if (on_epoch) on_epoch(epoch, theta);
  }
  res.params = std::move(theta);
  return res;
}

void write_meta_log(const std::filesystem::path& path,
                    const std::vector<MetaLogEntry>& log) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  for (const MetaLogEntry& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["task_index"] = e.task_index;
    j["support_loss"] = e.support_loss;
    j["query_loss_sentence"] = e.query_loss_sentence;
    j["query_loss_word"] = e.query_loss_word;
    f << j.dump() << '\n';
  }
  if (!f.good()) throw DataError("failed writing " + path.string());
}

ParamSet descend(AdaptationTask& task, ParamSet theta, double lr, int steps) {
  if (steps < 0) throw ConfigError("step count must be non-negative");
  for (int s = 0; s < steps; ++s) theta = inner_update(task, theta, lr);
  return theta;
}

FtStrategy parse_ft_strategy(const std::string& name) {
  if (name == "ft-specific") return FtStrategy::kSpecific;
  if (name == "ft-seen") return FtStrategy::kSeen;
  if (name == "ft-unseen") return FtStrategy::kUnseen;
  if (name == "ft-all") return FtStrategy::kAll;
  throw ConfigError("unknown fine-tuning strategy '" + name +
                    "' (expected ft-specific, ft-seen, ft-unseen or ft-all)");
}

std::string ft_strategy_name(FtStrategy s) {
  switch (s) {
    case FtStrategy::kSpecific: return "ft-specific";
    case FtStrategy::kSeen: return "ft-seen";
    case FtStrategy::kUnseen: return "ft-unseen";
    case FtStrategy::kAll: return "ft-all";
  }
  throw ConfigError("unknown fine-tuning strategy value");
}

std::map<std::string, std::vector<SentencePair>> finetune_corpora(
    const std::map<std::string, std::vector<SentencePair>>& support_by_domain,
    const std::set<std::string>& seen_domains, FtStrategy strategy) {
  std::map<std::string, std::vector<SentencePair>> out;
  if (strategy == FtStrategy::kSpecific) {
    for (const auto& [dom, pairs] : support_by_domain) out[dom] = pairs;
    return out;
  }
  const std::string key = strategy == FtStrategy::kSeen     ? "seen"
                          : strategy == FtStrategy::kUnseen ? "unseen"
                                                            : "all";
  std::vector<SentencePair>& target = out[key];
  for (const auto& [dom, pairs] : support_by_domain) {
    const bool seen = seen_domains.count(dom) > 0;
    if (strategy == FtStrategy::kSeen && !seen) continue;
    if (strategy == FtStrategy::kUnseen && seen) continue;
    target.insert(target.end(), pairs.begin(), pairs.end());
  }
  return out;
}

}  // namespace rml
