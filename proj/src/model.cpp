#include "rml/model.hpp"

#include <cmath>

namespace rml {

void MixConfig::validate() const {
  if (vocab <= kNumSpecials) {
    throw ConfigError("vocab must exceed the " +
                      std::to_string(int(kNumSpecials)) +
                      " reserved tokens, got " + std::to_string(vocab));
  }
  if (domains < 1) {
    throw ConfigError("domains must be >= 1, got " + std::to_string(domains));
  }
  if (epsilon < 0.0 || epsilon > 1.0) {
    throw ConfigError("epsilon must lie in [0,1], got " +
                      std::to_string(epsilon));
  }
  if (d_model < 2 || n_heads < 1 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " must be a positive multiple of n_heads " +
                      std::to_string(n_heads));
  }
  if (enc_layers < 1 || dec_layers < 1 || d_ff < 1 || max_len < 2) {
    throw ConfigError("layer sizes must be positive");
  }
}

namespace {

void push_mixed(std::vector<ParamDef>& out, const std::string& base, int k,
                int d_in, int d_out) {
  for (int j = 0; j < k; ++j) {
    out.push_back({base + ".w" + std::to_string(j), d_in, d_out, 'w'});
  }
  out.push_back({base + ".R", k, d_in, 'r'});
}

void push_ln(std::vector<ParamDef>& out, const std::string& base, int d) {
  out.push_back({base + ".gain", 1, d, 'g'});
  out.push_back({base + ".bias", 1, d, 'b'});
}

void push_attention(std::vector<ParamDef>& out, const std::string& base, int k,
                    int d) {
  push_mixed(out, base + ".q", k, d, d);
  push_mixed(out, base + ".k", k, d, d);
  push_mixed(out, base + ".v", k, d, d);
  push_mixed(out, base + ".o", k, d, d);
}

}  // namespace

std::vector<ParamDef> build_schema(const MixConfig& c) {
  c.validate();
  std::vector<ParamDef> out;
  out.push_back({"embed", c.vocab, c.d_model, 'e'});
  for (int l = 0; l < c.enc_layers; ++l) {
    const std::string L = "enc.l" + std::to_string(l);
    push_attention(out, L + ".att", c.domains, c.d_model);
    push_mixed(out, L + ".ff1", c.domains, c.d_model, c.d_ff);
    push_mixed(out, L + ".ff2", c.domains, c.d_ff, c.d_model);
    push_ln(out, L + ".ln1", c.d_model);
    push_ln(out, L + ".ln2", c.d_model);
  }
  push_ln(out, "enc.final_ln", c.d_model);
  for (int l = 0; l < c.dec_layers; ++l) {
    const std::string L = "dec.l" + std::to_string(l);
    push_attention(out, L + ".self", c.domains, c.d_model);
    push_attention(out, L + ".cross", c.domains, c.d_model);
    push_mixed(out, L + ".ff1", c.domains, c.d_model, c.d_ff);
    push_mixed(out, L + ".ff2", c.domains, c.d_ff, c.d_model);
    push_ln(out, L + ".ln1", c.d_model);
    push_ln(out, L + ".ln2", c.d_model);
    push_ln(out, L + ".ln3", c.d_model);
  }
  push_ln(out, "dec.final_ln", c.d_model);
  return out;
}

std::vector<Tensor> init_params(const MixConfig& c, uint64_t seed) {
  std::vector<Tensor> out;
  for (const ParamDef& d : build_schema(c)) {
    Tensor t(d.rows, d.cols);
    Rng rng = Rng::stream(seed, d.name);
    switch (d.kind) {
      case 'e': {
        const double std = 1.0 / std::sqrt(double(d.cols));
        for (auto& v : t.data) v = rng.normal() * std;
        break;
      }
      case 'w': {
        const double lim = std::sqrt(6.0 / double(d.rows + d.cols));
        for (auto& v : t.data) v = rng.uniform(-lim, lim);
        break;
      }
      case 'g':
        for (auto& v : t.data) v = 1.0;
        break;
      case 'r':
      case 'b':
      default:
        break;  // zeros
    }
    out.push_back(std::move(t));
  }
  return out;
}

long param_count(const MixConfig& c) {
  long n = 0;
  for (const ParamDef& d : build_schema(c)) n += long(d.rows) * d.cols;
  return n;
}

Tensor sinusoid_positions(int max_len, int d) {
  Tensor p(max_len, d);
  for (int t = 0; t < max_len; ++t) {
    for (int i = 0; i < d; i += 2) {
      const double rate = std::pow(10000.0, -double(i) / double(d));
      p.at(t, i) = std::sin(t * rate);
      if (i + 1 < d) p.at(t, i + 1) = std::cos(t * rate);
    }
  }
  return p;
}

Tensor causal_mask(int t) {
  Tensor m(t, t);
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) m.at(i, j) = -1e9;
  return m;
}

void apply_sgd(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               double lr) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(grads.size()) + " grads");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i])) {
      throw ShapeError("sgd: shape mismatch at tensor " + std::to_string(i));
    }
    for (size_t j = 0; j < params[i].numel(); ++j)
      params[i].data[j] -= lr * grads[i].data[j];
  }
}

double grad_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.data) s += v * v;
  return std::sqrt(s);
}

Tensor domain_proportions(const Tensor& x, const Tensor& router,
                          double epsilon) {
  if (router.cols() != x.cols()) {
    throw ShapeError("router " + router.shape_str() +
                     " does not match inputs " + x.shape_str());
  }
  const int k = router.rows();
  Tensor sm = kernels::softmax_rows(kernels::matmul_nt(x, router));
  Tensor out = kernels::scale(sm, 1.0 - epsilon);
  const double floor = epsilon / k;
  for (auto& v : out.data) v += floor;
  return out;
}

Tensor mixed_transform(const Tensor& x, const std::vector<Tensor>& weights,
                       const Tensor& router, double epsilon) {
  if (weights.empty() || static_cast<int>(weights.size()) != router.rows()) {
    throw ShapeError("need one weight matrix per router row, got " +
                     std::to_string(weights.size()) + " for " +
                     std::to_string(router.rows()));
  }
  Tensor phi = domain_proportions(x, router, epsilon);
  Tensor out(x.rows(), weights[0].cols());
  for (size_t j = 0; j < weights.size(); ++j) {
    Tensor term = kernels::row_scale(
        kernels::matmul(x, weights[j]),
        kernels::slice(phi, 0, phi.rows(), static_cast<int>(j),
                       static_cast<int>(j) + 1));
    out = j == 0 ? term : kernels::add(out, term);
  }
  return out;
}

MixModel::MixModel(MixConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  schema_ = build_schema(cfg_);
  for (size_t i = 0; i < schema_.size(); ++i)
    index_[schema_[i].name] = static_cast<int>(i);
  positions_ = sinusoid_positions(cfg_.max_len, cfg_.d_model);
}

int MixModel::param_index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ShapeError("unknown parameter " + name);
  }
  return it->second;
}

void MixModel::check_params(const std::vector<Tensor>& params) const {
  if (params.size() != schema_.size()) {
    throw ShapeError("expected " + std::to_string(schema_.size()) +
                     " parameter tensors, got " +
                     std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != schema_[i].rows ||
        params[i].cols() != schema_[i].cols) {
      throw ShapeError("parameter " + schema_[i].name + " has shape " +
                       params[i].shape_str());
    }
    if (!all_finite(params[i])) {
      throw NumericError("parameter " + schema_[i].name +
                         " contains non-finite values");
    }
  }
}

MixModel::LossValue MixModel::eval_loss(const std::vector<Tensor>& params,
                                        const std::vector<SentencePair>& pairs,
                                        int chunk_pairs) const {
  if (pairs.empty()) throw DataError("loss over an empty batch");
  double gen = 0.0, mix = 0.0;
  for (size_t start = 0; start < pairs.size();
       start += static_cast<size_t>(chunk_pairs)) {
    const size_t end = std::min(pairs.size(), start + chunk_pairs);
    std::vector<SentencePair> chunk(pairs.begin() + start, pairs.begin() + end);
    Tape tape;
    auto g = build_loss_graph(tape, params, chunk, false);
    gen += tape.value(g.gen_sum).at(0, 0);
    mix += tape.value(g.mix_sum).at(0, 0);
  }
  const double inv = 1.0 / double(pairs.size());
  return {gen * inv + mix * inv, gen * inv, mix * inv};
}

MixModel::LossValue MixModel::eval_loss_grad(
    const std::vector<Tensor>& params, const std::vector<SentencePair>& pairs,
    std::vector<Tensor>& grads, int chunk_pairs, double gen_weight) const {
  if (pairs.empty()) throw DataError("loss over an empty batch");
  grads.clear();
  for (const ParamDef& d : schema_) grads.emplace_back(d.rows, d.cols);
  double gen = 0.0, mix = 0.0;
  const double inv = 1.0 / double(pairs.size());
  for (size_t start = 0; start < pairs.size();
       start += static_cast<size_t>(chunk_pairs)) {
    const size_t end = std::min(pairs.size(), start + chunk_pairs);
    std::vector<SentencePair> chunk(pairs.begin() + start, pairs.begin() + end);
    Tape tape;
    auto g = build_loss_graph(tape, params, chunk, true);
    gen += tape.value(g.gen_sum).at(0, 0);
    mix += tape.value(g.mix_sum).at(0, 0);
    // Backprop the chunk's contribution to the batch mean.
    auto weighted = gen_weight == 1.0
                        ? tape.add(g.gen_sum, g.mix_sum)
                        : tape.add(tape.scale(g.gen_sum, gen_weight), g.mix_sum);
    tape.backward(tape.scale(weighted, inv));
    for (size_t i = 0; i < grads.size(); ++i) {
      const Tensor& gi = tape.grad(g.leaves[i]);
      for (size_t j = 0; j < gi.numel(); ++j) grads[i].data[j] += gi.data[j];
    }
  }
  return {gen * inv + mix * inv, gen * inv, mix * inv};
}

MixModel::LossValue MixModel::eval_loss_hvp(
    const std::vector<Tensor>& params, const std::vector<SentencePair>& pairs,
    const std::vector<Tensor>& dir, std::vector<Tensor>& hvp, int chunk_pairs,
    double gen_weight) const {
  if (pairs.empty()) throw DataError("loss over an empty batch");
  if (dir.size() != params.size()) {
    throw ShapeError("direction has " + std::to_string(dir.size()) +
                     " tensors, parameters have " +
                     std::to_string(params.size()));
  }
  std::vector<DualTensor> seeded;
  seeded.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(dir[i])) {
      throw ShapeError("direction tensor " + schema_[i].name +
                       " has shape " + dir[i].shape_str() +
                       ", parameter has " + params[i].shape_str());
    }
    DualTensor d(params[i].rows(), params[i].cols());
    for (size_t j = 0; j < d.numel(); ++j)
      d.data[j] = Dual(params[i].data[j], dir[i].data[j]);
    seeded.push_back(std::move(d));
  }

  hvp.clear();
  for (const ParamDef& d : schema_) hvp.emplace_back(d.rows, d.cols);
  double gen = 0.0, mix = 0.0;
  const double inv = 1.0 / double(pairs.size());
  for (size_t start = 0; start < pairs.size();
       start += static_cast<size_t>(chunk_pairs)) {
    const size_t end = std::min(pairs.size(), start + chunk_pairs);
    std::vector<SentencePair> chunk(pairs.begin() + start, pairs.begin() + end);
    DualTape tape;
    auto g = build_loss_graph(tape, seeded, chunk, true);
    gen += tape.value(g.gen_sum).at(0, 0).v;
    mix += tape.value(g.mix_sum).at(0, 0).v;
    auto weighted = gen_weight == 1.0
                        ? tape.add(g.gen_sum, g.mix_sum)
                        : tape.add(tape.scale(g.gen_sum, gen_weight), g.mix_sum);
    tape.backward(tape.scale(weighted, inv));
    // Gradient tangents carry the curvature along dir.
    for (size_t i = 0; i < hvp.size(); ++i) {
      const DualTensor& gi = tape.grad(g.leaves[i]);
      for (size_t j = 0; j < gi.numel(); ++j) hvp[i].data[j] += gi.data[j].t;
    }
  }
  return {gen * inv + mix * inv, gen * inv, mix * inv};
}

Tensor MixModel::forced_logits(const std::vector<Tensor>& params,
                               const std::vector<int>& src,
                               const std::vector<int>& tgt,
                               int domain) const {
  if (domain < 0 || domain >= cfg_.domains) {
    throw DataError("domain " + std::to_string(domain) + " outside model's " +
                    std::to_string(cfg_.domains) + " domains");
  }
  check_params(params);
  Tape tape;
  Builder<double> b{*this, tape};
  b.track_mix = false;
  b.domain = domain;
  for (const Tensor& p : params) b.pv.push_back(tape.constant(p));

  std::vector<int> src_in = src;
  src_in.push_back(kEos);
  std::vector<int> dec_in{kBos};
  dec_in.insert(dec_in.end(), tgt.begin(), tgt.end());
  auto enc = b.encode(src_in);
  auto dec = b.decode(dec_in, enc, static_cast<int>(src_in.size()));
  return tape.value(tape.matmul_nt(dec, b.P("embed")));
}

Tensor MixModel::next_token_logits(
    const std::vector<Tensor>& params, const std::vector<int>& src, int domain,
    const std::vector<std::vector<int>>& prefixes) const {
  if (prefixes.empty()) throw DataError("no decode prefixes given");
  if (domain < 0 || domain >= cfg_.domains) {
    throw DataError("decode domain " + std::to_string(domain) +
                    " outside model's " + std::to_string(cfg_.domains) +
                    " domains");
  }
  check_params(params);
  Tape tape;
  Builder<double> b{*this, tape};
  b.track_mix = false;
  b.domain = domain;
  for (const Tensor& p : params) b.pv.push_back(tape.constant(p));

  std::vector<int> src_in = src;
  src_in.push_back(kEos);
  auto enc = b.encode(src_in);

  Tape::Val out{};
  for (size_t p = 0; p < prefixes.size(); ++p) {
    std::vector<int> dec_in{kBos};
    dec_in.insert(dec_in.end(), prefixes[p].begin(), prefixes[p].end());
    auto dec = b.decode(dec_in, enc, static_cast<int>(src_in.size()));
    const int t = static_cast<int>(dec_in.size());
    auto last = tape.slice(dec, t - 1, t, 0, cfg_.d_model);
    auto row = tape.matmul_nt(last, b.P("embed"));
    out = p == 0 ? row : tape.concat_rows(out, row);
  }
  return tape.value(out);
}

}  // namespace rml
