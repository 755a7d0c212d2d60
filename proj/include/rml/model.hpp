#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "rml/rng.hpp"
#include "rml/tape.hpp"
#include "rml/tokens.hpp"

// Encoder-decoder transformer whose every linear map is a bank of per-domain
// weight matrices blended word by word. A small routing head Phi turns each
// token vector into a distribution over the domain bank,
//
//   Phi(x) = (1 - epsilon) * softmax(x R^T) + epsilon / k,
//
// and the layer output is sum_j Phi_j(x) * (x W_j). Training couples the
// translation cross-entropy with a routing term that pushes Phi toward the
// sentence's domain label:
//
//   loss = gen + mix,   mix = -mean log Phi_label
//
// averaged over every routed application and position. With k = 1 the model
// collapses exactly to a plain transformer and mix is identically zero.
//
// Pre-norm residual blocks are used throughout so the model trains under
// plain SGD without warmup.

namespace rml {

struct MixConfig {
  int vocab{0};
  int domains{1};  // k
  double epsilon{0.1};
  int d_model{64};
  int n_heads{4};
  int enc_layers{2};
  int dec_layers{2};
  int d_ff{128};
  int max_len{192};
  double ln_eps{1e-5};

  void validate() const;
};

struct SentencePair {
  std::vector<int> src, tgt;
  int domain{0};
};

struct ParamDef {
  std::string name;
  int rows{0}, cols{0};
  char kind{'w'};  // 'e' embedding, 'w' weight, 'r' router, 'g' gain, 'b' bias
};

std::vector<ParamDef> build_schema(const MixConfig& c);
std::vector<Tensor> init_params(const MixConfig& c, uint64_t seed);
long param_count(const MixConfig& c);
Tensor sinusoid_positions(int max_len, int d);
Tensor causal_mask(int t);

void apply_sgd(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               double lr);
double grad_norm(const std::vector<Tensor>& grads);

// Word-level domain proportions for a block of token vectors x [T x d]:
// (1 - epsilon) * softmax(x router^T) + epsilon / k, rows on the simplex.
Tensor domain_proportions(const Tensor& x, const Tensor& router,
                          double epsilon);

// Blend of per-domain linear maps weighted by the proportions:
// out_t = sum_j Phi_j(x_t) * (x_t W_j).
Tensor mixed_transform(const Tensor& x, const std::vector<Tensor>& weights,
                       const Tensor& router, double epsilon);

template <class T>
struct LossGraphT {
  using Val = typename TapeT<T>::Val;
  Val total{}, gen{}, mix{};     // batch means
  Val gen_sum{}, mix_sum{};      // per-pair sums, for chunked accumulation
  std::vector<Val> leaves;       // param handles when gradients are tracked
  int pairs{0};
};

class MixModel {
 public:
  explicit MixModel(MixConfig cfg);

  const MixConfig& config() const { return cfg_; }
  const std::vector<ParamDef>& schema() const { return schema_; }
  int param_index(const std::string& name) const;

  struct LossValue {
    double total{0.0}, gen{0.0}, mix{0.0};
  };

  // Records the full forward pass for a batch of pairs on the caller's
  // tape. With track_grads the parameters become tape inputs whose
  // gradients are read back after backward(); otherwise constants.
  template <class S>
  LossGraphT<S> build_loss_graph(TapeT<S>& tape,
                                 const std::vector<TensorT<S>>& params,
                                 const std::vector<SentencePair>& pairs,
                                 bool track_grads) const;

  LossValue eval_loss(const std::vector<Tensor>& params,
                      const std::vector<SentencePair>& pairs,
                      int chunk_pairs = 8) const;

  // Exact full-batch gradient, accumulated over fixed-size chunks so peak
  // tape memory stays bounded. grads is resized and overwritten. The
  // objective is gen_weight * gen + mix; the returned loss components are
  // unweighted.
  LossValue eval_loss_grad(const std::vector<Tensor>& params,
                           const std::vector<SentencePair>& pairs,
                           std::vector<Tensor>& grads,
                           int chunk_pairs = 8,
                           double gen_weight = 1.0) const;

  // Hessian-vector product of gen_weight * gen + mix with direction dir,
  // exact via a tangent pass through the whole forward+backward sweep.
  // hvp is resized and overwritten.
  LossValue eval_loss_hvp(const std::vector<Tensor>& params,
                          const std::vector<SentencePair>& pairs,
                          const std::vector<Tensor>& dir,
                          std::vector<Tensor>& hvp,
                          int chunk_pairs = 8,
                          double gen_weight = 1.0) const;

  // Next-token logits [prefixes x vocab] with the source encoded once;
  // each prefix is the target so far, without bos.
  Tensor next_token_logits(const std::vector<Tensor>& params,
                           const std::vector<int>& src, int domain,
                           const std::vector<std::vector<int>>& prefixes) const;

  // Teacher-forced logits [len(tgt)+1 x vocab]; row t predicts tgt[t]
  // (the final row predicts eos).
  Tensor forced_logits(const std::vector<Tensor>& params,
                       const std::vector<int>& src,
                       const std::vector<int>& tgt, int domain) const;

  void check_params(const std::vector<Tensor>& params) const;

 private:
  MixConfig cfg_;
  std::vector<ParamDef> schema_;
  std::unordered_map<std::string, int> index_;
  Tensor positions_;

  template <class S>
  struct Builder;
};

// ---------------------------------------------------------------------------
// Template definitions
// ---------------------------------------------------------------------------

template <class S>
struct MixModel::Builder {
  using Val = typename TapeT<S>::Val;

  Builder(const MixModel& model, TapeT<S>& t) : m(model), tape(t) {}

  const MixModel& m;
  TapeT<S>& tape;
  std::vector<Val> pv;
  int domain{0};
  bool track_mix{true};
  Val mix_sum{};
  long mix_positions{0};
  bool has_mix{false};

  Val P(const std::string& name) const { return pv[m.param_index(name)]; }

  static TensorT<S> widen(const Tensor& t) {
    if constexpr (std::is_same_v<S, double>) {
      return t;
    } else {
      return to_dual(t);
    }
  }

  Val cnst(const Tensor& t) { return tape.constant(widen(t)); }

  Val mixed_linear(const std::string& base, Val x, int rows) {
    const MixConfig& c = m.cfg_;
    Val scores = tape.matmul_nt(x, P(base + ".R"));
    Val phi = tape.add(tape.scale(tape.softmax(scores), 1.0 - c.epsilon),
                       cnst(Tensor(rows, c.domains, c.epsilon / c.domains)));
    if (track_mix) {
      Val col = tape.slice(phi, 0, rows, domain, domain + 1);
      Val lg = tape.sum(tape.log(col));
      mix_sum = has_mix ? tape.add(mix_sum, lg) : lg;
      has_mix = true;
      mix_positions += rows;
    }
    Val out{};
    for (int j = 0; j < c.domains; ++j) {
      Val term = tape.row_scale(tape.matmul(x, P(base + ".w" + std::to_string(j))),
                                tape.slice(phi, 0, rows, j, j + 1));
      out = j == 0 ? term : tape.add(out, term);
    }
    return out;
  }

  Val lnorm(const std::string& base, Val x) {
    return tape.layernorm(x, P(base + ".gain"), P(base + ".bias"),
                          m.cfg_.ln_eps);
  }

  Val attention(const std::string& base, Val xq, Val xkv, int tq, int tkv,
                const Tensor* mask) {
    const MixConfig& c = m.cfg_;
    const int dh = c.d_model / c.n_heads;
    Val q = mixed_linear(base + ".q", xq, tq);
    Val k = mixed_linear(base + ".k", xkv, tkv);
    Val v = mixed_linear(base + ".v", xkv, tkv);
    Val heads{};
    for (int h = 0; h < c.n_heads; ++h) {
      Val qh = tape.slice(q, 0, tq, h * dh, (h + 1) * dh);
      Val kh = tape.slice(k, 0, tkv, h * dh, (h + 1) * dh);
      Val vh = tape.slice(v, 0, tkv, h * dh, (h + 1) * dh);
      Val sc = tape.scale(tape.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
      if (mask) sc = tape.add(sc, cnst(*mask));
      Val oh = tape.matmul(tape.softmax(sc), vh);
      heads = h == 0 ? oh : tape.concat_cols(heads, oh);
    }
    return mixed_linear(base + ".o", heads, tq);
  }

  Val embed_seq(const std::vector<int>& ids) {
    const MixConfig& c = m.cfg_;
    if (static_cast<int>(ids.size()) > c.max_len) {
      throw DataError("sequence of " + std::to_string(ids.size()) +
                      " tokens exceeds max_len " + std::to_string(c.max_len));
    }
    Val e = tape.scale(tape.embedding(P("embed"), ids),
                       std::sqrt(double(c.d_model)));
    Tensor pos = kernels::ref::slice(m.positions_, 0,
                                     static_cast<int>(ids.size()), 0,
                                     c.d_model);
    return tape.add(e, cnst(pos));
  }

  Val encode(const std::vector<int>& src_in) {
    const int t = static_cast<int>(src_in.size());
    Val x = embed_seq(src_in);
    for (int l = 0; l < m.cfg_.enc_layers; ++l) {
      const std::string L = "enc.l" + std::to_string(l);
      Val n1 = lnorm(L + ".ln1", x);
      x = tape.add(x, attention(L + ".att", n1, n1, t, t, nullptr));
      Val n2 = lnorm(L + ".ln2", x);
      Val ff = mixed_linear(L + ".ff2",
                            tape.relu(mixed_linear(L + ".ff1", n2, t)), t);
      x = tape.add(x, ff);
    }
    return lnorm("enc.final_ln", x);
  }

  Val decode(const std::vector<int>& dec_in, Val enc_out, int t_enc) {
    const int t = static_cast<int>(dec_in.size());
    Val x = embed_seq(dec_in);
    Tensor mask = causal_mask(t);
    for (int l = 0; l < m.cfg_.dec_layers; ++l) {
      const std::string L = "dec.l" + std::to_string(l);
      Val n1 = lnorm(L + ".ln1", x);
      x = tape.add(x, attention(L + ".self", n1, n1, t, t, &mask));
      Val n2 = lnorm(L + ".ln2", x);
      x = tape.add(x, attention(L + ".cross", n2, enc_out, t, t_enc, nullptr));
      Val n3 = lnorm(L + ".ln3", x);
      Val ff = mixed_linear(L + ".ff2",
                            tape.relu(mixed_linear(L + ".ff1", n3, t)), t);
      x = tape.add(x, ff);
    }
    return lnorm("dec.final_ln", x);
  }
};

template <class S>
LossGraphT<S> MixModel::build_loss_graph(TapeT<S>& tape,
                                         const std::vector<TensorT<S>>& params,
                                         const std::vector<SentencePair>& pairs,
                                         bool track_grads) const {
  if (params.size() != schema_.size()) {
    throw ShapeError("expected " + std::to_string(schema_.size()) +
                     " parameter tensors, got " + std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != schema_[i].rows ||
        params[i].cols() != schema_[i].cols) {
      throw ShapeError("parameter " + schema_[i].name + " expects " +
                       std::to_string(schema_[i].rows) + "x" +
                       std::to_string(schema_[i].cols) + ", got " +
                       params[i].shape_str());
    }
  }
  if (pairs.empty()) {
    throw DataError("loss over an empty batch");
  }

  LossGraphT<S> g;
  Builder<S> b{*this, tape};
  for (size_t i = 0; i < params.size(); ++i) {
    b.pv.push_back(track_grads ? tape.input(params[i])
                               : tape.constant(params[i]));
  }
  if (track_grads) g.leaves = b.pv;

  using Val = typename TapeT<S>::Val;
  Val gen_sum{}, mix_total{};
  bool first = true;
  for (const SentencePair& pr : pairs) {
    if (pr.domain < 0 || pr.domain >= cfg_.domains) {
      throw DataError("pair domain " + std::to_string(pr.domain) +
                      " outside model's " + std::to_string(cfg_.domains) +
                      " domains");
    }
    if (pr.tgt.empty()) {
      throw DataError("pair with empty target side");
    }
    std::vector<int> src_in = pr.src;
    src_in.push_back(kEos);
    std::vector<int> dec_in{kBos};
    dec_in.insert(dec_in.end(), pr.tgt.begin(), pr.tgt.end());
    std::vector<int> labels = pr.tgt;
    labels.push_back(kEos);

    b.domain = pr.domain;
    b.has_mix = false;
    b.mix_positions = 0;
    Val enc = b.encode(src_in);
    Val dec = b.decode(dec_in, enc, static_cast<int>(src_in.size()));
    Val logits = tape.matmul_nt(dec, b.P("embed"));
    Val gen_p = tape.mean(tape.cross_entropy(logits, labels));
    Val mix_p = tape.scale(b.mix_sum, -1.0 / double(b.mix_positions));
    gen_sum = first ? gen_p : tape.add(gen_sum, gen_p);
    mix_total = first ? mix_p : tape.add(mix_total, mix_p);
    first = false;
  }
  const double inv = 1.0 / double(pairs.size());
  g.gen_sum = gen_sum;
  g.mix_sum = mix_total;
  g.gen = tape.scale(gen_sum, inv);
  g.mix = tape.scale(mix_total, inv);
  g.total = tape.add(g.gen, g.mix);
  g.pairs = static_cast<int>(pairs.size());
  return g;
}

}  // namespace rml
