#include "doctest.h"

#include <array>
#include <cmath>
#include <vector>

#include "rml/gradcheck.hpp"
#include "rml/rng.hpp"
#include "rml/tape.hpp"

using rml::Dual;
using rml::DualTape;
using rml::DualTensor;
using rml::Rng;
using rml::Tape;
using rml::Tensor;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (size_t i = 0; i < a.numel(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("softmax forward matches frozen values") {
  Tape t;
  auto x = t.input(Tensor::from(1, 2, {1.0, 2.0}));
  auto y = t.softmax(x);
  CHECK(t.value(y).at(0, 0) == doctest::Approx(0.2689414214).epsilon(1e-5));
  CHECK(t.value(y).at(0, 1) == doctest::Approx(0.7310585786).epsilon(1e-5));

  auto z = t.softmax(t.input(Tensor::from(1, 3, {0.0, 0.0, 0.0})));
  for (int j = 0; j < 3; ++j)
    CHECK(t.value(z).at(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("gradient of half theta squared at one is one") {
  Tape t;
  auto x = t.input(Tensor(1, 1, 1.0));
  auto loss = t.scale(t.mul(x, x), 0.5);
  t.backward(loss);
  CHECK(t.grad(x).at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
  Tensor logits = Tensor::from(1, 3, {1.0, 2.0, 0.5});
  Tape t;
  auto l = t.input(logits);
  auto ce = t.cross_entropy(l, {1});
  t.backward(ce);
  double z = 0.0;
  for (int j = 0; j < 3; ++j) z += std::exp(logits.at(0, j));
  for (int j = 0; j < 3; ++j) {
    const double p = std::exp(logits.at(0, j)) / z;
    const double expect = p - (j == 1 ? 1.0 : 0.0);
    CHECK(t.grad(l).at(0, j) == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("gradients through linear combinations are exact") {
  Tape t;
  auto x = t.input(Tensor::from(2, 2, {1.0, -2.0, 0.5, 4.0}));
  auto c = t.constant(Tensor(2, 2, 2.0));
  auto y = t.sum(t.add(t.scale(x, 3.0), t.mul(c, x)));
  t.backward(y);
  for (size_t i = 0; i < 4; ++i) CHECK(t.grad(x).data[i] == 5.0);
}

TEST_CASE("replay reproduces forward values bit-identically and re-arms backward") {
  Rng rng(99);
  Tensor xv(4, 5);
  for (auto& v : xv.data) v = rng.uniform(-1.0, 1.0);
  Tape t;
  auto x = t.input(xv);
  auto y = t.softmax(t.tanh(t.scale(x, 1.3)));
  auto loss = t.mean(t.mul(y, y));
  Tensor v0 = t.value(loss);
  t.backward(loss);
  Tensor g0 = t.grad(x);
  CHECK(t.consumed());

  t.replay();
  CHECK(!t.consumed());
  CHECK(bit_equal(t.value(loss), v0));
  t.backward(loss);
  CHECK(bit_equal(t.grad(x), g0));
}

TEST_CASE("consumed tape rejects recording and a second backward") {
  Tape t;
  auto x = t.input(Tensor(1, 1, 2.0));
  auto y = t.mul(x, x);
  t.backward(y);
  CHECK_THROWS_AS(t.mul(x, x), rml::TapeError);
  CHECK_THROWS_AS(t.backward(y), rml::TapeError);
}

TEST_CASE("backward validates output and seed shapes") {
  Tape t;
  auto x = t.input(Tensor(2, 3, 1.0));
  auto y = t.tanh(x);
  CHECK_THROWS_AS(t.backward(y), rml::TapeError);  // not 1x1, no seed
  CHECK_THROWS_AS(t.backward(y, Tensor(1, 1, 1.0)), rml::TapeError);
  CHECK_THROWS_AS(t.grad(x), rml::TapeError);      // before any backward
  t.backward(y, Tensor(2, 3, 1.0));
  CHECK(t.grad(x).same_shape(Tensor(2, 3)));
}

TEST_CASE("non-finite results are reported with the op name") {
  Tape t;
  auto x = t.input(Tensor(1, 1, -1.0));
  CHECK_THROWS_AS(t.log(x), rml::NumericError);
  auto big = t.input(Tensor(1, 1, 1000.0));
  try {
    t.exp(big);
    FAIL("expected NumericError");
  } catch (const rml::NumericError& e) {
    CHECK(std::string(e.what()).find("exp") != std::string::npos);
  }
}

TEST_CASE("layernorm gradients match finite differences") {
  Rng rng(17);
  std::vector<Tensor> params{Tensor(3, 4), Tensor(1, 4), Tensor(1, 4)};
  for (auto& p : params)
    for (auto& v : p.data) v = rng.uniform(-1.0, 1.0);
  params[1].data.assign(4, 1.0);

  auto loss_fn = [](const std::vector<Tensor>& ps) {
    Tape t;
    auto x = t.input(ps[0]);
    auto g = t.input(ps[1]);
    auto b = t.input(ps[2]);
    auto y = t.layernorm(x, g, b, 1e-5);
    Tape::Val l = t.mean(t.mul(y, y));
    return t.value(l).at(0, 0);
  };

  Tape t;
  auto x = t.input(params[0]);
  auto g = t.input(params[1]);
  auto b = t.input(params[2]);
  auto loss = t.mean(t.mul(t.layernorm(x, g, b, 1e-5), t.layernorm(x, g, b, 1e-5)));
  t.backward(loss);
  std::vector<Tensor> analytic{t.grad(x), t.grad(g), t.grad(b)};

  auto report = rml::finite_diff_compare(loss_fn, params, analytic);
  INFO(report.str());
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("embedding and cross entropy gradients match finite differences") {
  Rng rng(23);
  std::vector<Tensor> params{Tensor(5, 3), Tensor(3, 6)};
  for (auto& p : params)
    for (auto& v : p.data) v = rng.uniform(-1.0, 1.0);
  const std::vector<int> ids{1, 3, 1};
  const std::vector<int> targets{0, 5, 2};

  auto loss_fn = [&](const std::vector<Tensor>& ps) {
    Tape t;
    auto table = t.input(ps[0]);
    auto w = t.input(ps[1]);
    auto e = t.embedding(table, ids);
    auto logits = t.matmul(e, w);
    Tape::Val l = t.mean(t.cross_entropy(logits, targets));
    return t.value(l).at(0, 0);
  };

  Tape t;
  auto table = t.input(params[0]);
  auto w = t.input(params[1]);
  auto loss =
      t.mean(t.cross_entropy(t.matmul(t.embedding(table, ids), w), targets));
  t.backward(loss);
  std::vector<Tensor> analytic{t.grad(table), t.grad(w)};

  auto report = rml::finite_diff_compare(loss_fn, params, analytic);
  INFO(report.str());
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("attention-shaped composite gradients match finite differences") {
  Rng rng(31);
  // X, Wq, Wk, Wv with a scaled dot-product attention pattern.
  std::vector<Tensor> params{Tensor(4, 6), Tensor(6, 6), Tensor(6, 6),
                             Tensor(6, 6)};
  for (auto& p : params)
    for (auto& v : p.data) v = rng.uniform(-0.7, 0.7);

  auto build = [](Tape& t, const std::vector<Tensor>& ps) {
    auto x = t.input(ps[0]);
    auto wq = t.input(ps[1]);
    auto wk = t.input(ps[2]);
    auto wv = t.input(ps[3]);
    auto q = t.matmul(x, wq);
    auto k = t.matmul(x, wk);
    auto v = t.matmul(x, wv);
    auto att = t.softmax(t.scale(t.matmul_nt(q, k), 1.0 / std::sqrt(6.0)));
    auto out = t.matmul(att, v);
    std::array<Tape::Val, 5> vals{x, wq, wk, wv, t.mean(t.mul(out, out))};
    return vals;
  };

  auto loss_fn = [&](const std::vector<Tensor>& ps) {
    Tape t;
    auto vals = build(t, ps);
    return t.value(vals[4]).at(0, 0);
  };

  Tape t;
  auto vals = build(t, params);
  t.backward(vals[4]);
  std::vector<Tensor> analytic{t.grad(vals[0]), t.grad(vals[1]),
                               t.grad(vals[2]), t.grad(vals[3])};
  auto report = rml::finite_diff_compare(loss_fn, params, analytic);
  INFO(report.str());
  CHECK(report.max_rel_err < 1e-4);
}

// ---------------------------------------------------------------------------
// Randomized expression property: build random op DAGs, compare every leaf
// gradient against central differences.
// ---------------------------------------------------------------------------

namespace {

struct Instr {
  int op;                    // index into the op pool below
  int a{-1}, b{-1};          // operand positions in the value sequence
  double s{0.0};             // scale factor
  std::array<int, 4> w{};    // slice window
};

struct Program {
  std::vector<Tensor> leaves;
  std::vector<Instr> instrs;
};

enum OpCode {
  kOpAdd,
  kOpMul,
  kOpMatmul,
  kOpMatmulNT,
  kOpScale,
  kOpTanh,
  kOpRelu,
  kOpExp,
  kOpLog,
  kOpSoftmax,
  kOpAddRowvec,
  kOpRowScale,
  kOpSlice,
  kOpConcatCols,
  kOpConcatRows,
  kOpCount,
};

double run_program(const Program& prog, const std::vector<Tensor>& leaves,
                   std::vector<Tensor>* grads_out) {
  Tape t;
  std::vector<Tape::Val> seq;
  std::vector<Tape::Val> leaf_vals;
  for (const Tensor& l : leaves) {
    auto v = t.input(l);
    seq.push_back(v);
    leaf_vals.push_back(v);
  }
  for (const Instr& in : prog.instrs) {
    Tape::Val r;
    switch (in.op) {
      case kOpAdd: r = t.add(seq[in.a], seq[in.b]); break;
      case kOpMul: r = t.mul(seq[in.a], seq[in.b]); break;
      case kOpMatmul: r = t.matmul(seq[in.a], seq[in.b]); break;
      case kOpMatmulNT: r = t.matmul_nt(seq[in.a], seq[in.b]); break;
      case kOpScale: r = t.scale(seq[in.a], in.s); break;
      case kOpTanh: r = t.tanh(seq[in.a]); break;
      case kOpRelu: r = t.relu(seq[in.a]); break;
      case kOpExp: r = t.exp(seq[in.a]); break;
      case kOpLog: r = t.log(seq[in.a]); break;
      case kOpSoftmax: r = t.softmax(seq[in.a]); break;
      case kOpAddRowvec: r = t.add_rowvec(seq[in.a], seq[in.b]); break;
      case kOpRowScale: r = t.row_scale(seq[in.a], seq[in.b]); break;
      case kOpSlice:
        r = t.slice(seq[in.a], in.w[0], in.w[1], in.w[2], in.w[3]);
        break;
      case kOpConcatCols: r = t.concat_cols(seq[in.a], seq[in.b]); break;
      case kOpConcatRows: r = t.concat_rows(seq[in.a], seq[in.b]); break;
      default: throw std::logic_error("bad op");
    }
    seq.push_back(r);
  }
  Tape::Val loss = t.mean(seq[0]);
  for (size_t i = 1; i < seq.size(); ++i)
    loss = t.add(loss, t.mean(seq[i]));
  const double out = t.value(loss).at(0, 0);
  if (grads_out) {
    t.backward(loss);
    grads_out->clear();
    for (auto v : leaf_vals) grads_out->push_back(t.grad(v));
  }
  return out;
}

// Chooses ops whose operands exist with compatible shapes, using the live
// values to keep relu inputs away from the kink and exp/log in range.
Program random_program(Rng& rng) {
  Program prog;
  const std::array<std::pair<int, int>, 6> shape_pool{
      {{1, 1}, {2, 3}, {3, 2}, {3, 3}, {1, 3}, {3, 1}}};
  const int n_leaves = rng.uniform_int(2, 4);
  std::vector<Tensor> vals;
  for (int i = 0; i < n_leaves; ++i) {
    auto [r, c] = shape_pool[rng.uniform_int(0, shape_pool.size() - 1)];
    Tensor t(r, c);
    for (auto& v : t.data) v = rng.uniform(-1.2, 1.2);
    prog.leaves.push_back(t);
    vals.push_back(t);
  }

  auto min_abs = [](const Tensor& t) {
    double m = 1e30;
    for (double v : t.data) m = std::min(m, std::fabs(v));
    return m;
  };
  auto max_val = [](const Tensor& t) {
    double m = -1e30;
    for (double v : t.data) m = std::max(m, v);
    return m;
  };
  auto min_val = [](const Tensor& t) {
    double m = 1e30;
    for (double v : t.data) m = std::min(m, v);
    return m;
  };

  const int steps = rng.uniform_int(4, 10);
  for (int s = 0; s < steps; ++s) {
    bool placed = false;
    for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
      const int op = rng.uniform_int(0, kOpCount - 1);
      const int n = static_cast<int>(vals.size());
      Instr in;
      in.op = op;
      Tensor result;
      auto pick = [&](auto pred) {
        std::vector<int> ok;
        for (int i = 0; i < n; ++i)
          if (pred(vals[i])) ok.push_back(i);
        if (ok.empty()) return -1;
        return ok[rng.uniform_int(0, static_cast<int>(ok.size()) - 1)];
      };
      switch (op) {
        case kOpAdd:
        case kOpMul: {
          in.a = rng.uniform_int(0, n - 1);
          in.b = pick([&](const Tensor& t) {
            return t.same_shape(vals[in.a]);
          });
          if (in.b < 0) continue;
          result = op == kOpAdd ? rml::kernels::add(vals[in.a], vals[in.b])
                                : rml::kernels::mul(vals[in.a], vals[in.b]);
          break;
        }
        case kOpMatmul: {
          in.a = rng.uniform_int(0, n - 1);
          in.b = pick([&](const Tensor& t) {
            return t.rows() == vals[in.a].cols() && t.cols() <= 4;
          });
          if (in.b < 0) continue;
          result = rml::kernels::matmul(vals[in.a], vals[in.b]);
          break;
        }
        case kOpMatmulNT: {
          in.a = rng.uniform_int(0, n - 1);
          in.b = pick([&](const Tensor& t) {
            return t.cols() == vals[in.a].cols() && t.rows() <= 4;
          });
          if (in.b < 0) continue;
          result = rml::kernels::matmul_nt(vals[in.a], vals[in.b]);
          break;
        }
        case kOpScale: {
          in.a = rng.uniform_int(0, n - 1);
          in.s = rng.uniform(-1.5, 1.5);
          result = rml::kernels::scale(vals[in.a], in.s);
          break;
        }
        case kOpTanh: {
          in.a = rng.uniform_int(0, n - 1);
          result = rml::kernels::tanh_ew(vals[in.a]);
          break;
        }
        case kOpRelu: {
          in.a = pick([&](const Tensor& t) { return min_abs(t) > 1e-3; });
          if (in.a < 0) continue;
          result = rml::kernels::relu_ew(vals[in.a]);
          break;
        }
        case kOpExp: {
          in.a = pick([&](const Tensor& t) { return max_val(t) < 2.0; });
          if (in.a < 0) continue;
          result = rml::kernels::exp_ew(vals[in.a]);
          break;
        }
        case kOpLog: {
          in.a = pick([&](const Tensor& t) { return min_val(t) > 0.1; });
          if (in.a < 0) continue;
          result = rml::kernels::log_ew(vals[in.a]);
          break;
        }
        case kOpSoftmax: {
          in.a = rng.uniform_int(0, n - 1);
          result = rml::kernels::softmax_rows(vals[in.a]);
          break;
        }
        case kOpAddRowvec: {
          in.a = pick([&](const Tensor& t) { return t.rows() > 1; });
          if (in.a < 0) continue;
          in.b = pick([&](const Tensor& t) {
            return t.rows() == 1 && t.cols() == vals[in.a].cols();
          });
          if (in.b < 0) continue;
          result = rml::kernels::add_rowvec(vals[in.a], vals[in.b]);
          break;
        }
        case kOpRowScale: {
          in.a = rng.uniform_int(0, n - 1);
          in.b = pick([&](const Tensor& t) {
            return t.cols() == 1 && t.rows() == vals[in.a].rows();
          });
          if (in.b < 0) continue;
          result = rml::kernels::row_scale(vals[in.a], vals[in.b]);
          break;
        }
        case kOpSlice: {
          in.a = pick([&](const Tensor& t) { return t.numel() > 1; });
          if (in.a < 0) continue;
          const Tensor& t = vals[in.a];
          const int r0 = rng.uniform_int(0, t.rows() - 1);
          const int r1 = rng.uniform_int(r0 + 1, t.rows());
          const int c0 = rng.uniform_int(0, t.cols() - 1);
          const int c1 = rng.uniform_int(c0 + 1, t.cols());
          in.w = {r0, r1, c0, c1};
          result = rml::kernels::slice(t, r0, r1, c0, c1);
          break;
        }
        case kOpConcatCols: {
          in.a = rng.uniform_int(0, n - 1);
          in.b = pick([&](const Tensor& t) {
            return t.rows() == vals[in.a].rows() &&
                   t.cols() + vals[in.a].cols() <= 8;
          });
          if (in.b < 0) continue;
          result = rml::kernels::concat_cols(vals[in.a], vals[in.b]);
          break;
        }
        case kOpConcatRows: {
          in.a = rng.uniform_int(0, n - 1);
          in.b = pick([&](const Tensor& t) {
            return t.cols() == vals[in.a].cols() &&
                   t.rows() + vals[in.a].rows() <= 8;
          });
          if (in.b < 0) continue;
          result = rml::kernels::concat_rows(vals[in.a], vals[in.b]);
          break;
        }
        default: continue;
      }
      // Keep magnitudes bounded so deep compositions stay well-conditioned.
      bool ok = true;
      for (double v : result.data)
        if (!std::isfinite(v) || std::fabs(v) > 50.0) ok = false;
      if (!ok) continue;
      prog.instrs.push_back(in);
      vals.push_back(result);
      placed = true;
    }
    if (!placed) break;
  }
  return prog;
}

}  // namespace

TEST_CASE("random expression gradients match finite differences") {
  Rng rng(20240817);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Program prog = random_program(rng);
    if (prog.instrs.empty()) continue;
    std::vector<Tensor> analytic;
    run_program(prog, prog.leaves, &analytic);
    auto loss_fn = [&](const std::vector<Tensor>& leaves) {
      return run_program(prog, leaves, nullptr);
    };
    auto report = rml::finite_diff_compare(loss_fn, prog.leaves, analytic);
    INFO("trial " << trial << ": " << report.str());
    CHECK(report.max_rel_err < 1e-4);
    ++checked;
  }
  // The generator must actually produce expressions.
  CHECK(checked > 190);
}

// ---------------------------------------------------------------------------
// Forward-over-reverse: the tape runs on dual numbers, so seeding tangents
// into the inputs makes backward() emit exact Hessian-vector products.
// ---------------------------------------------------------------------------

TEST_CASE("dual tape yields exact second derivative of theta cubed") {
  DualTape t;
  DualTensor x0(1, 1);
  x0.at(0, 0) = Dual(1.5, 1.0);  // value 1.5, probe direction 1
  auto x = t.input(x0);
  auto y = t.mul(t.mul(x, x), x);
  t.backward(y);
  // d/dx x^3 = 3x^2 = 6.75; d2/dx2 x^3 = 6x = 9
  CHECK(t.grad(x).at(0, 0).v == doctest::Approx(6.75).epsilon(1e-12));
  CHECK(t.grad(x).at(0, 0).t == doctest::Approx(9.0).epsilon(1e-12));
}

TEST_CASE("dual tape Hessian-vector product of a quadratic form is A times v") {
  // f(x) = 0.5 * x A x^T with symmetric A; Hessian is exactly A.
  Tensor a_sym = Tensor::from(2, 2, {2.0, 0.7, 0.7, 1.3});
  Tensor xv = Tensor::from(1, 2, {0.4, -1.1});
  Tensor v = Tensor::from(1, 2, {0.9, 0.3});

  DualTape t;
  DualTensor x0(1, 2);
  for (int j = 0; j < 2; ++j) x0.at(0, j) = Dual(xv.at(0, j), v.at(0, j));
  auto x = t.input(x0);
  auto a = t.constant(rml::to_dual(a_sym));
  auto f = t.scale(t.matmul_nt(t.matmul(x, a), x), 0.5);
  t.backward(f);

  for (int j = 0; j < 2; ++j) {
    double hv = a_sym.at(j, 0) * v.at(0, 0) + a_sym.at(j, 1) * v.at(0, 1);
    double gr = a_sym.at(j, 0) * xv.at(0, 0) + a_sym.at(j, 1) * xv.at(0, 1);
    CHECK(t.grad(x).at(0, j).v == doctest::Approx(gr).epsilon(1e-12));
    CHECK(t.grad(x).at(0, j).t == doctest::Approx(hv).epsilon(1e-12));
  }
}

TEST_CASE("dual tape matches double tape when tangents are zero") {
  Rng rng(55);
  Tensor xv(3, 4);
  for (auto& v : xv.data) v = rng.uniform(-1.0, 1.0);

  Tape td;
  auto xd = td.input(xv);
  auto ld = td.mean(td.softmax(td.tanh(xd)));
  td.backward(ld);

  DualTape tq;
  auto xq = tq.input(rml::to_dual(xv));
  auto lq = tq.mean(tq.softmax(tq.tanh(xq)));
  tq.backward(lq);

  CHECK(bit_equal(rml::values_of(tq.value(lq)), td.value(ld)));
  CHECK(bit_equal(rml::values_of(tq.grad(xq)), td.grad(xd)));
  Tensor zero_t = rml::tangents_of(tq.grad(xq));
  for (double v : zero_t.data) CHECK(v == 0.0);
}
