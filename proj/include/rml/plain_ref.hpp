#pragma once

#include <cmath>
#include <vector>

#include "rml/model.hpp"

// Straight-line serial transformer forward pass with plain linear layers,
// kept as an independent reference for the single-domain model. Takes the
// k=1 schema parameters and ignores the routing heads; returns the mean
// next-token cross-entropy for one pair.

namespace rml {
namespace plain_ref {

namespace detail {

using K = Tensor;

inline Tensor linear(const MixModel& m, const std::vector<Tensor>& p,
                     const std::string& base, const Tensor& x) {
  return kernels::ref::matmul(x, p[m.param_index(base + ".w0")]);
}

inline Tensor lnorm(const MixModel& m, const std::vector<Tensor>& p,
                    const std::string& base, const Tensor& x) {
  return kernels::ref::layernorm_rows(x, p[m.param_index(base + ".gain")],
                                      p[m.param_index(base + ".bias")],
                                      m.config().ln_eps);
}

inline Tensor attention(const MixModel& m, const std::vector<Tensor>& p,
                        const std::string& base, const Tensor& xq,
                        const Tensor& xkv, const Tensor* mask) {
  const MixConfig& c = m.config();
  const int dh = c.d_model / c.n_heads;
  Tensor q = linear(m, p, base + ".q", xq);
  Tensor k = linear(m, p, base + ".k", xkv);
  Tensor v = linear(m, p, base + ".v", xkv);
  Tensor heads(1, 1);
  for (int h = 0; h < c.n_heads; ++h) {
    Tensor qh = kernels::ref::slice(q, 0, q.rows(), h * dh, (h + 1) * dh);
    Tensor kh = kernels::ref::slice(k, 0, k.rows(), h * dh, (h + 1) * dh);
    Tensor vh = kernels::ref::slice(v, 0, v.rows(), h * dh, (h + 1) * dh);
    Tensor sc = kernels::ref::scale(kernels::ref::matmul_nt(qh, kh),
                                    1.0 / std::sqrt(double(dh)));
    if (mask) sc = kernels::ref::add(sc, *mask);
    Tensor oh = kernels::ref::matmul(kernels::ref::softmax_rows(sc), vh);
    heads = h == 0 ? oh : kernels::ref::concat_cols(heads, oh);
  }
  return linear(m, p, base + ".o", heads);
}

inline Tensor embed_seq(const MixModel& m, const std::vector<Tensor>& p,
                        const std::vector<int>& ids) {
  const MixConfig& c = m.config();
  Tensor e = kernels::ref::scale(
      kernels::ref::embedding_rows(p[m.param_index("embed")], ids),
      std::sqrt(double(c.d_model)));
  Tensor pos = kernels::ref::slice(sinusoid_positions(c.max_len, c.d_model), 0,
                                   static_cast<int>(ids.size()), 0, c.d_model);
  return kernels::ref::add(e, pos);
}

}  // namespace detail

// Teacher-forced logits [len(tgt)+1 x vocab], same layout as
// MixModel::forced_logits.
inline Tensor pair_logits(const MixModel& m, const std::vector<Tensor>& p,
                          const SentencePair& pair) {
  using namespace detail;
  namespace R = kernels::ref;
  const MixConfig& c = m.config();

  std::vector<int> src_in = pair.src;
  src_in.push_back(kEos);
  std::vector<int> dec_in{kBos};
  dec_in.insert(dec_in.end(), pair.tgt.begin(), pair.tgt.end());

  Tensor x = embed_seq(m, p, src_in);
  for (int l = 0; l < c.enc_layers; ++l) {
    const std::string L = "enc.l" + std::to_string(l);
    Tensor n1 = lnorm(m, p, L + ".ln1", x);
    x = R::add(x, attention(m, p, L + ".att", n1, n1, nullptr));
    Tensor n2 = lnorm(m, p, L + ".ln2", x);
    Tensor ff = linear(m, p, L + ".ff2",
                       R::relu_ew(linear(m, p, L + ".ff1", n2)));
    x = R::add(x, ff);
  }
  Tensor enc = lnorm(m, p, "enc.final_ln", x);

  Tensor mask = causal_mask(static_cast<int>(dec_in.size()));
  Tensor y = embed_seq(m, p, dec_in);
  for (int l = 0; l < c.dec_layers; ++l) {
    const std::string L = "dec.l" + std::to_string(l);
    Tensor n1 = lnorm(m, p, L + ".ln1", y);
    y = R::add(y, attention(m, p, L + ".self", n1, n1, &mask));
    Tensor n2 = lnorm(m, p, L + ".ln2", y);
    y = R::add(y, attention(m, p, L + ".cross", n2, enc, nullptr));
    Tensor n3 = lnorm(m, p, L + ".ln3", y);
    Tensor ff = linear(m, p, L + ".ff2",
                       R::relu_ew(linear(m, p, L + ".ff1", n3)));
    y = R::add(y, ff);
  }
  y = lnorm(m, p, "dec.final_ln", y);

  return R::matmul_nt(y, p[m.param_index("embed")]);
}

inline double pair_loss(const MixModel& m, const std::vector<Tensor>& p,
                        const SentencePair& pair) {
  namespace R = kernels::ref;
  std::vector<int> labels = pair.tgt;
  labels.push_back(kEos);
  Tensor ce = R::cross_entropy_rows(pair_logits(m, p, pair), labels);
  return R::mean_all(ce).at(0, 0);
}

}  // namespace plain_ref
}  // namespace rml
