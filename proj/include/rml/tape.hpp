#pragma once

#include <array>
#include <string>
#include <vector>

#include "rml/kernels.hpp"
#include "rml/tensor.hpp"

// Define-by-run reverse-mode tape. Each op records its inputs, runs the
// forward kernel immediately, and checks the result for non-finite values.
// backward() walks the record once in reverse; afterwards the tape is
// consumed and only grad()/value() reads are allowed until replay() rebuilds
// the forward values and re-arms it.
//
// Templating on the scalar lets the same tape run over plain doubles or
// forward-mode dual numbers; seeding a tangent into the inputs and reading
// tangents out of the gradients yields exact Hessian-vector products.

namespace rml {

template <class T>
class TapeT {
 public:
  struct Val {
    int id{-1};
  };

  enum class Op {
    kInput,
    kConstant,
    kMatmul,
    kMatmulNT,
    kAdd,
    kAddRowvec,
    kMul,
    kScale,
    kRowScale,
    kExp,
    kLog,
    kRelu,
    kTanh,
    kSoftmax,
    kLayernorm,
    kEmbedding,
    kConcatCols,
    kConcatRows,
    kSlice,
    kCrossEntropy,
    kSum,
    kMean,
  };

  Val input(TensorT<T> v) { return push(Op::kInput, {}, std::move(v)); }
  Val constant(TensorT<T> v) { return push(Op::kConstant, {}, std::move(v)); }

  Val matmul(Val a, Val b) {
    return push(Op::kMatmul, {a, b}, kernels::matmul(val(a), val(b)));
  }
  // a * b^T
  Val matmul_nt(Val a, Val b) {
    return push(Op::kMatmulNT, {a, b}, kernels::matmul_nt(val(a), val(b)));
  }
  Val add(Val a, Val b) {
    return push(Op::kAdd, {a, b}, kernels::add(val(a), val(b)));
  }
  Val add_rowvec(Val a, Val b) {
    return push(Op::kAddRowvec, {a, b}, kernels::add_rowvec(val(a), val(b)));
  }
  Val mul(Val a, Val b) {
    return push(Op::kMul, {a, b}, kernels::mul(val(a), val(b)));
  }
  Val scale(Val a, double s) {
    Val v = push(Op::kScale, {a}, kernels::scale(val(a), s));
    node(v).scalar = s;
    return v;
  }
  Val row_scale(Val a, Val s) {
    return push(Op::kRowScale, {a, s}, kernels::row_scale(val(a), val(s)));
  }
  Val exp(Val a) { return push(Op::kExp, {a}, kernels::exp_ew(val(a))); }
  Val log(Val a) { return push(Op::kLog, {a}, kernels::log_ew(val(a))); }
  Val relu(Val a) { return push(Op::kRelu, {a}, kernels::relu_ew(val(a))); }
  Val tanh(Val a) { return push(Op::kTanh, {a}, kernels::tanh_ew(val(a))); }
  Val softmax(Val a) {
    return push(Op::kSoftmax, {a}, kernels::softmax_rows(val(a)));
  }
  Val layernorm(Val x, Val gain, Val bias, double eps = 1e-5) {
    Val v = push(Op::kLayernorm, {x, gain, bias},
                 kernels::layernorm_rows(val(x), val(gain), val(bias), eps));
    node(v).scalar = eps;
    return v;
  }
  Val embedding(Val table, std::vector<int> ids) {
    Val v = push(Op::kEmbedding, {table},
                 kernels::embedding_rows(val(table), ids));
    node(v).aux = std::move(ids);
    return v;
  }
  Val concat_cols(Val a, Val b) {
    return push(Op::kConcatCols, {a, b},
                kernels::concat_cols(val(a), val(b)));
  }
  Val concat_rows(Val a, Val b) {
    return push(Op::kConcatRows, {a, b},
                kernels::concat_rows(val(a), val(b)));
  }
  Val slice(Val a, int r0, int r1, int c0, int c1) {
    Val v = push(Op::kSlice, {a}, kernels::slice(val(a), r0, r1, c0, c1));
    node(v).window = {r0, r1, c0, c1};
    return v;
  }
  // Per-row softmax cross-entropy against integer targets -> [rows x 1].
  Val cross_entropy(Val logits, std::vector<int> targets) {
    Val v = push(Op::kCrossEntropy, {logits},
                 kernels::cross_entropy_rows(val(logits), targets));
    node(v).aux = std::move(targets);
    return v;
  }
  Val sum(Val a) { return push(Op::kSum, {a}, kernels::sum_all(val(a))); }
  Val mean(Val a) { return push(Op::kMean, {a}, kernels::mean_all(val(a))); }

  const TensorT<T>& value(Val v) const { return val(v); }

  int size() const { return static_cast<int>(nodes_.size()); }
  bool consumed() const { return consumed_; }

  // Reverse sweep from a scalar output (or any output with an explicit
  // seed of the same shape). Grads accumulate for every node; read them
  // with grad(). One sweep per forward pass.
  void backward(Val out) {
    const TensorT<T>& o = val(out);
    if (o.rows() != 1 || o.cols() != 1) {
      throw TapeError("backward without seed needs a 1x1 output, got " +
                      o.shape_str());
    }
    TensorT<T> seed(1, 1, T(1.0));
    backward(out, seed);
  }

  void backward(Val out, const TensorT<T>& seed) {
    if (consumed_) {
      throw TapeError("backward on a consumed tape; call replay() first");
    }
    if (!val(out).same_shape(seed)) {
      throw TapeError("backward seed shape " + seed.shape_str() +
                      " does not match output " + val(out).shape_str());
    }
    grads_.clear();
    grads_.reserve(nodes_.size());
    for (const Node& n : nodes_)
      grads_.emplace_back(n.value.rows(), n.value.cols());
    accumulate(out.id, seed);
    for (int i = out.id; i >= 0; --i) step_backward(i);
    consumed_ = true;
  }

  const TensorT<T>& grad(Val v) const {
    check_id(v.id);
    if (grads_.empty()) {
      throw TapeError("grad() before backward()");
    }
    return grads_[v.id];
  }

  // Re-executes every forward kernel from the recorded structure and leaf
  // values, discarding grads and re-arming backward().
  void replay() {
    for (Node& n : nodes_) n.value = forward_of(n);
    grads_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Op op;
    std::array<int, 3> in{-1, -1, -1};
    TensorT<T> value;
    std::vector<int> aux;           // token ids or class targets
    double scalar{0.0};             // scale factor or layernorm eps
    std::array<int, 4> window{};    // slice bounds
  };

  std::vector<Node> nodes_;
  std::vector<TensorT<T>> grads_;
  bool consumed_{false};

  static const char* op_name(Op op) {
    switch (op) {
      case Op::kInput: return "input";
      case Op::kConstant: return "constant";
      case Op::kMatmul: return "matmul";
      case Op::kMatmulNT: return "matmul_nt";
      case Op::kAdd: return "add";
      case Op::kAddRowvec: return "add_rowvec";
      case Op::kMul: return "mul";
      case Op::kScale: return "scale";
      case Op::kRowScale: return "row_scale";
      case Op::kExp: return "exp";
      case Op::kLog: return "log";
      case Op::kRelu: return "relu";
      case Op::kTanh: return "tanh";
      case Op::kSoftmax: return "softmax";
      case Op::kLayernorm: return "layernorm";
      case Op::kEmbedding: return "embedding";
      case Op::kConcatCols: return "concat_cols";
      case Op::kConcatRows: return "concat_rows";
      case Op::kSlice: return "slice";
      case Op::kCrossEntropy: return "cross_entropy";
      case Op::kSum: return "sum";
      case Op::kMean: return "mean";
    }
    return "?";
  }

  void check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
      throw TapeError("bad value handle " + std::to_string(id));
    }
  }

  const TensorT<T>& val(Val v) const {
    check_id(v.id);
    return nodes_[v.id].value;
  }

  Node& node(Val v) { return nodes_[v.id]; }

  Val push(Op op, std::initializer_list<Val> ins, TensorT<T> value) {
    if (consumed_) {
      throw TapeError("recording on a consumed tape; call replay() first");
    }
    if (!all_finite(value)) {
      throw NumericError(std::string(op_name(op)) +
                         " produced non-finite values");
    }
    Node n;
    n.op = op;
    int slot = 0;
    for (Val v : ins) {
      check_id(v.id);
      n.in[slot++] = v.id;
    }
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Val{static_cast<int>(nodes_.size()) - 1};
  }

  void accumulate(int id, const TensorT<T>& g) {
    TensorT<T>& dst = grads_[id];
    for (size_t i = 0; i < dst.numel(); ++i) dst.data[i] += g.data[i];
  }

  TensorT<T> forward_of(const Node& n) const {
    auto a = [&]() -> const TensorT<T>& { return nodes_[n.in[0]].value; };
    auto b = [&]() -> const TensorT<T>& { return nodes_[n.in[1]].value; };
    auto c = [&]() -> const TensorT<T>& { return nodes_[n.in[2]].value; };
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant: return n.value;
      case Op::kMatmul: return kernels::matmul(a(), b());
      case Op::kMatmulNT: return kernels::matmul_nt(a(), b());
      case Op::kAdd: return kernels::add(a(), b());
      case Op::kAddRowvec: return kernels::add_rowvec(a(), b());
      case Op::kMul: return kernels::mul(a(), b());
      case Op::kScale: return kernels::scale(a(), n.scalar);
      case Op::kRowScale: return kernels::row_scale(a(), b());
      case Op::kExp: return kernels::exp_ew(a());
      case Op::kLog: return kernels::log_ew(a());
      case Op::kRelu: return kernels::relu_ew(a());
      case Op::kTanh: return kernels::tanh_ew(a());
      case Op::kSoftmax: return kernels::softmax_rows(a());
      case Op::kLayernorm:
        return kernels::layernorm_rows(a(), b(), c(), n.scalar);
      case Op::kEmbedding: return kernels::embedding_rows(a(), n.aux);
      case Op::kConcatCols: return kernels::concat_cols(a(), b());
      case Op::kConcatRows: return kernels::concat_rows(a(), b());
      case Op::kSlice:
        return kernels::slice(a(), n.window[0], n.window[1], n.window[2],
                              n.window[3]);
      case Op::kCrossEntropy: return kernels::cross_entropy_rows(a(), n.aux);
      case Op::kSum: return kernels::sum_all(a());
      case Op::kMean: return kernels::mean_all(a());
    }
    throw TapeError("unknown op in replay");
  }

  void step_backward(int id) {
    const Node& n = nodes_[id];
    const TensorT<T>& gy = grads_[id];
    const int ia = n.in[0], ib = n.in[1], ic = n.in[2];
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant:
        return;
      case Op::kMatmul: {
        const TensorT<T>& a = nodes_[ia].value;
        const TensorT<T>& b = nodes_[ib].value;
        accumulate(ia, kernels::matmul_nt(gy, b));
        accumulate(ib, kernels::matmul_tn(a, gy));
        return;
      }
      case Op::kMatmulNT: {
        const TensorT<T>& a = nodes_[ia].value;
        const TensorT<T>& b = nodes_[ib].value;
        accumulate(ia, kernels::matmul(gy, b));
        accumulate(ib, kernels::matmul_tn(gy, a));
        return;
      }
      case Op::kAdd:
        accumulate(ia, gy);
        accumulate(ib, gy);
        return;
      case Op::kAddRowvec:
        accumulate(ia, gy);
        accumulate(ib, kernels::colsum(gy));
        return;
      case Op::kMul:
        accumulate(ia, kernels::mul(gy, nodes_[ib].value));
        accumulate(ib, kernels::mul(gy, nodes_[ia].value));
        return;
      case Op::kScale:
        accumulate(ia, kernels::scale(gy, n.scalar));
        return;
      case Op::kRowScale:
        accumulate(ia, kernels::row_scale(gy, nodes_[ib].value));
        accumulate(ib, kernels::rowdot(gy, nodes_[ia].value));
        return;
      case Op::kExp:
        accumulate(ia, kernels::mul(gy, n.value));
        return;
      case Op::kLog:
        accumulate(ia, kernels::mul(gy, kernels::recip_ew(nodes_[ia].value)));
        return;
      case Op::kRelu:
        accumulate(ia, kernels::relu_backward(nodes_[ia].value, gy));
        return;
      case Op::kTanh:
        accumulate(ia, kernels::tanh_backward(n.value, gy));
        return;
      case Op::kSoftmax:
        accumulate(ia, kernels::softmax_rows_backward(n.value, gy));
        return;
      case Op::kLayernorm: {
        auto g = kernels::layernorm_rows_backward(nodes_[ia].value,
                                                  nodes_[ib].value, n.scalar,
                                                  gy);
        accumulate(ia, g.gx);
        accumulate(ib, g.ggain);
        accumulate(ic, g.gbias);
        return;
      }
      case Op::kEmbedding:
        accumulate(ia, kernels::embedding_backward(n.aux, gy,
                                                   nodes_[ia].value.rows()));
        return;
      case Op::kConcatCols: {
        const int ca = nodes_[ia].value.cols();
        accumulate(ia, kernels::slice(gy, 0, gy.rows(), 0, ca));
        accumulate(ib, kernels::slice(gy, 0, gy.rows(), ca, gy.cols()));
        return;
      }
      case Op::kConcatRows: {
        const int ra = nodes_[ia].value.rows();
        accumulate(ia, kernels::slice(gy, 0, ra, 0, gy.cols()));
        accumulate(ib, kernels::slice(gy, ra, gy.rows(), 0, gy.cols()));
        return;
      }
      case Op::kSlice: {
        TensorT<T>& dst = grads_[ia];
        for (int i = n.window[0]; i < n.window[1]; ++i)
          for (int j = n.window[2]; j < n.window[3]; ++j)
            dst.at(i, j) += gy.at(i - n.window[0], j - n.window[2]);
        return;
      }
      case Op::kCrossEntropy:
        accumulate(ia, kernels::cross_entropy_rows_backward(nodes_[ia].value,
                                                            n.aux, gy));
        return;
      case Op::kSum: {
        const T g = gy.at(0, 0);
        TensorT<T>& dst = grads_[ia];
        for (auto& x : dst.data) x += g;
        return;
      }
      case Op::kMean: {
        const T g = gy.at(0, 0) *
                    T(1.0 / static_cast<double>(nodes_[ia].value.numel()));
        TensorT<T>& dst = grads_[ia];
        for (auto& x : dst.data) x += g;
        return;
      }
    }
  }
};

using Tape = TapeT<double>;
using DualTape = TapeT<Dual>;

}  // namespace rml
