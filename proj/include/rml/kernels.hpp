#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <vector>

#include "rml/tensor.hpp"

// Dense kernels behind every tensor op. Each kernel comes in two forms:
//
//   kernels::ref::*  straightforward serial loops, kept as the reference
//                    implementation for tests and benchmarks
//   kernels::*       OpenMP-parallel over independent output elements
//
// The parallel form partitions work across outputs but never reorders the
// per-element arithmetic, so both forms produce bit-identical results for
// any thread count. Reductions accumulate fixed per-row partials combined
// in row order in both forms.

namespace rml::kernels {

inline std::atomic<bool> g_parallel{true};

inline void set_parallel(bool on) { g_parallel.store(on); }
inline bool parallel_enabled() { return g_parallel.load(); }

// Minimum number of output-element units before a kernel goes parallel;
// below this the OpenMP fork overhead dominates.
constexpr int64_t kGrain = 1 << 13;

inline void check_same_shape(const char* op, int ar, int ac, int br, int bc) {
  if (ar != br || ac != bc) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     std::to_string(ar) + "x" + std::to_string(ac) + " vs " +
                     std::to_string(br) + "x" + std::to_string(bc));
  }
}

namespace ref {

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims differ, " + a.shape_str() + " * " +
                     b.shape_str());
  }
  TensorT<T> c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      T acc{};
      for (int k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

// a * b^T
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dims differ, " + a.shape_str() +
                     " * " + b.shape_str() + "^T");
  }
  TensorT<T> c(a.rows(), b.rows());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.rows(); ++j) {
      T acc{};
      for (int k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(j, k);
      c.at(i, j) = acc;
    }
  }
  return c;
}

// a^T * b
template <class T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dims differ, " + a.shape_str() +
                     "^T * " + b.shape_str());
  }
  TensorT<T> c(a.cols(), b.cols());
  for (int i = 0; i < a.cols(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      T acc{};
      for (int k = 0; k < a.rows(); ++k) acc += a.at(k, i) * b.at(k, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("add", a.rows(), a.cols(), b.rows(), b.cols());
  TensorT<T> c(a.rows(), a.cols());
  for (size_t i = 0; i < a.numel(); ++i) c.data[i] = a.data[i] + b.data[i];
  return c;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("mul", a.rows(), a.cols(), b.rows(), b.cols());
  TensorT<T> c(a.rows(), a.cols());
  for (size_t i = 0; i < a.numel(); ++i) c.data[i] = a.data[i] * b.data[i];
  return c;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, double s) {
  TensorT<T> c(a.rows(), a.cols());
  for (size_t i = 0; i < a.numel(); ++i) c.data[i] = a.data[i] * T(s);
  return c;
}

// a[m x n] + row vector b[1 x n], broadcast over the leading axis.
template <class T>
TensorT<T> add_rowvec(const TensorT<T>& a, const TensorT<T>& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw ShapeError("add_rowvec: " + a.shape_str() + " + " + b.shape_str());
  }
  TensorT<T> c(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) c.at(i, j) = a.at(i, j) + b.at(0, j);
  return c;
}

// Row i of a scaled by s[i].
template <class T>
TensorT<T> row_scale(const TensorT<T>& a, const TensorT<T>& s) {
  if (s.cols() != 1 || s.rows() != a.rows()) {
    throw ShapeError("row_scale: " + a.shape_str() + " by " + s.shape_str());
  }
  TensorT<T> c(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) c.at(i, j) = a.at(i, j) * s.at(i, 0);
  return c;
}

// Per-row dot product of same-shaped a and b -> [m x 1].
template <class T>
TensorT<T> rowdot(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("rowdot", a.rows(), a.cols(), b.rows(), b.cols());
  TensorT<T> c(a.rows(), 1);
  for (int i = 0; i < a.rows(); ++i) {
    T acc{};
    for (int j = 0; j < a.cols(); ++j) acc += a.at(i, j) * b.at(i, j);
    c.at(i, 0) = acc;
  }
  return c;
}

template <class T>
TensorT<T> colsum(const TensorT<T>& a) {
  TensorT<T> c(1, a.cols());
  for (int j = 0; j < a.cols(); ++j) {
    T acc{};
    for (int i = 0; i < a.rows(); ++i) acc += a.at(i, j);
    c.at(0, j) = acc;
  }
  return c;
}

template <class T>
TensorT<T> exp_ew(const TensorT<T>& a) {
  using std::exp;
  TensorT<T> c(a.rows(), a.cols());
  for (size_t i = 0; i < a.numel(); ++i) c.data[i] = exp(a.data[i]);
  return c;
}

template <class T>
TensorT<T> log_ew(const TensorT<T>& a) {
  using std::log;
  TensorT<T> c(a.rows(), a.cols());
  for (size_t i = 0; i < a.numel(); ++i) c.data[i] = log(a.data[i]);
  return c;
}

template <class T>
TensorT<T> relu_ew(const TensorT<T>& a) {
  TensorT<T> c(a.rows(), a.cols());
  for (size_t i = 0; i < a.numel(); ++i)
    c.data[i] = a.data[i] > T(0.0) ? a.data[i] : T(0.0);
  return c;
}

template <class T>
TensorT<T> tanh_ew(const TensorT<T>& a) {
  using std::tanh;
  TensorT<T> c(a.rows(), a.cols());
  for (size_t i = 0; i < a.numel(); ++i) c.data[i] = tanh(a.data[i]);
  return c;
}

template <class T>
TensorT<T> recip_ew(const TensorT<T>& a) {
  TensorT<T> c(a.rows(), a.cols());
  for (size_t i = 0; i < a.numel(); ++i) c.data[i] = T(1.0) / a.data[i];
  return c;
}

// gx for y = relu(x), given x.
template <class T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& gy) {
  check_same_shape("relu_backward", x.rows(), x.cols(), gy.rows(), gy.cols());
  TensorT<T> gx(x.rows(), x.cols());
  for (size_t i = 0; i < x.numel(); ++i)
    gx.data[i] = x.data[i] > T(0.0) ? gy.data[i] : T(0.0);
  return gx;
}

// gx for y = tanh(x), given y.
template <class T>
TensorT<T> tanh_backward(const TensorT<T>& y, const TensorT<T>& gy) {
  check_same_shape("tanh_backward", y.rows(), y.cols(), gy.rows(), gy.cols());
  TensorT<T> gx(y.rows(), y.cols());
  for (size_t i = 0; i < y.numel(); ++i)
    gx.data[i] = gy.data[i] * (T(1.0) - y.data[i] * y.data[i]);
  return gx;
}

// Row-wise softmax with max subtraction.
template <class T>
TensorT<T> softmax_rows(const TensorT<T>& a) {
  using std::exp;
  TensorT<T> c(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i) {
    T m = a.at(i, 0);
    for (int j = 1; j < a.cols(); ++j)
      if (a.at(i, j) > m) m = a.at(i, j);
    T z{};
    for (int j = 0; j < a.cols(); ++j) {
      c.at(i, j) = exp(a.at(i, j) - m);
      z += c.at(i, j);
    }
    const T inv = T(1.0) / z;
    for (int j = 0; j < a.cols(); ++j) c.at(i, j) = c.at(i, j) * inv;
  }
  return c;
}

// gx for y = softmax_rows(x): gx = y * (gy - rowdot(gy, y)).
template <class T>
TensorT<T> softmax_rows_backward(const TensorT<T>& y, const TensorT<T>& gy) {
  check_same_shape("softmax_backward", y.rows(), y.cols(), gy.rows(),
                   gy.cols());
  TensorT<T> gx(y.rows(), y.cols());
  for (int i = 0; i < y.rows(); ++i) {
    T dot{};
    for (int j = 0; j < y.cols(); ++j) dot += gy.at(i, j) * y.at(i, j);
    for (int j = 0; j < y.cols(); ++j)
      gx.at(i, j) = y.at(i, j) * (gy.at(i, j) - dot);
  }
  return gx;
}

template <class T>
TensorT<T> layernorm_rows(const TensorT<T>& x, const TensorT<T>& gain,
                          const TensorT<T>& bias, double eps) {
  using std::sqrt;
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 ||
      bias.cols() != x.cols()) {
    throw ShapeError("layernorm: x " + x.shape_str() + ", gain " +
                     gain.shape_str() + ", bias " + bias.shape_str());
  }
  TensorT<T> y(x.rows(), x.cols());
  const double invn = 1.0 / x.cols();
  for (int i = 0; i < x.rows(); ++i) {
    T mean{};
    for (int j = 0; j < x.cols(); ++j) mean += x.at(i, j);
    mean = mean * T(invn);
    T var{};
    for (int j = 0; j < x.cols(); ++j) {
      const T d = x.at(i, j) - mean;
      var += d * d;
    }
    var = var * T(invn);
    const T inv = T(1.0) / sqrt(var + T(eps));
    for (int j = 0; j < x.cols(); ++j)
      y.at(i, j) = (x.at(i, j) - mean) * inv * gain.at(0, j) + bias.at(0, j);
  }
  return y;
}

template <class T>
struct LayernormGrads {
  TensorT<T> gx, ggain, gbias;
};

template <class T>
LayernormGrads<T> layernorm_rows_backward(const TensorT<T>& x,
                                          const TensorT<T>& gain, double eps,
                                          const TensorT<T>& gy) {
  using std::sqrt;
  const int n = x.cols();
  LayernormGrads<T> g{TensorT<T>(x.rows(), n), TensorT<T>(1, n),
                      TensorT<T>(1, n)};
  const double invn = 1.0 / n;
  for (int i = 0; i < x.rows(); ++i) {
    T mean{};
    for (int j = 0; j < n; ++j) mean += x.at(i, j);
    mean = mean * T(invn);
    T var{};
    for (int j = 0; j < n; ++j) {
      const T d = x.at(i, j) - mean;
      var += d * d;
    }
    var = var * T(invn);
    const T inv = T(1.0) / sqrt(var + T(eps));
    // ghat = gy*gain; gx = inv*(ghat - mean(ghat) - xhat*mean(ghat*xhat))
    T mg{}, mgx{};
    for (int j = 0; j < n; ++j) {
      const T xhat = (x.at(i, j) - mean) * inv;
      const T ghat = gy.at(i, j) * gain.at(0, j);
      mg += ghat;
      mgx += ghat * xhat;
    }
    mg = mg * T(invn);
    mgx = mgx * T(invn);
    for (int j = 0; j < n; ++j) {
      const T xhat = (x.at(i, j) - mean) * inv;
      const T ghat = gy.at(i, j) * gain.at(0, j);
      g.gx.at(i, j) = inv * (ghat - mg - xhat * mgx);
    }
  }
  // Column reductions over rows, fixed row order.
  for (int j = 0; j < n; ++j) {
    T sg{}, sb{};
    for (int i = 0; i < x.rows(); ++i) {
      T mean{};
      for (int jj = 0; jj < n; ++jj) mean += x.at(i, jj);
      mean = mean * T(invn);
      T var{};
      for (int jj = 0; jj < n; ++jj) {
        const T d = x.at(i, jj) - mean;
        var += d * d;
      }
      var = var * T(invn);
      const T inv = T(1.0) / sqrt(var + T(eps));
      sg += gy.at(i, j) * (x.at(i, j) - mean) * inv;
      sb += gy.at(i, j);
    }
    g.ggain.at(0, j) = sg;
    g.gbias.at(0, j) = sb;
  }
  return g;
}

template <class T>
TensorT<T> embedding_rows(const TensorT<T>& table, const std::vector<int>& ids) {
  TensorT<T> out(static_cast<int>(ids.size()), table.cols());
  for (size_t t = 0; t < ids.size(); ++t) {
    const int id = ids[t];
    if (id < 0 || id >= table.rows()) {
      throw ShapeError("embedding: id " + std::to_string(id) +
                       " outside table with " + std::to_string(table.rows()) +
                       " rows");
    }
    for (int j = 0; j < table.cols(); ++j)
      out.at(static_cast<int>(t), j) = table.at(id, j);
  }
  return out;
}

template <class T>
TensorT<T> embedding_backward(const std::vector<int>& ids,
                              const TensorT<T>& gy, int vocab) {
  TensorT<T> g(vocab, gy.cols());
  for (int j = 0; j < gy.cols(); ++j)
    for (size_t t = 0; t < ids.size(); ++t)
      g.at(ids[t], j) += gy.at(static_cast<int>(t), j);
  return g;
}

template <class T>
TensorT<T> concat_cols(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: " + a.shape_str() + " | " + b.shape_str());
  }
  TensorT<T> c(a.rows(), a.cols() + b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < a.cols(); ++j) c.at(i, j) = a.at(i, j);
    for (int j = 0; j < b.cols(); ++j) c.at(i, a.cols() + j) = b.at(i, j);
  }
  return c;
}

template <class T>
TensorT<T> concat_rows(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows: " + a.shape_str() + " / " + b.shape_str());
  }
  TensorT<T> c(a.rows() + b.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) c.at(i, j) = a.at(i, j);
  for (int i = 0; i < b.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) c.at(a.rows() + i, j) = b.at(i, j);
  return c;
}

template <class T>
TensorT<T> slice(const TensorT<T>& a, int r0, int r1, int c0, int c1) {
  if (r0 < 0 || r1 > a.rows() || c0 < 0 || c1 > a.cols() || r0 >= r1 ||
      c0 >= c1) {
    throw ShapeError("slice: [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ")x[" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") of " + a.shape_str());
  }
  TensorT<T> c(r1 - r0, c1 - c0);
  for (int i = r0; i < r1; ++i)
    for (int j = c0; j < c1; ++j) c.at(i - r0, j - c0) = a.at(i, j);
  return c;
}

// Per-row softmax cross-entropy against integer targets -> [rows x 1].
template <class T>
TensorT<T> cross_entropy_rows(const TensorT<T>& logits,
                              const std::vector<int>& targets) {
  using std::exp;
  using std::log;
  if (static_cast<int>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + logits.shape_str());
  }
  TensorT<T> out(logits.rows(), 1);
  for (int i = 0; i < logits.rows(); ++i) {
    const int tgt = targets[i];
    if (tgt < 0 || tgt >= logits.cols()) {
      throw ShapeError("cross_entropy: target " + std::to_string(tgt) +
                       " outside vocab of " + std::to_string(logits.cols()));
    }
    T m = logits.at(i, 0);
    for (int j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > m) m = logits.at(i, j);
    T z{};
    for (int j = 0; j < logits.cols(); ++j) z += exp(logits.at(i, j) - m);
    out.at(i, 0) = log(z) - (logits.at(i, tgt) - m);
  }
  return out;
}

template <class T>
TensorT<T> cross_entropy_rows_backward(const TensorT<T>& logits,
                                       const std::vector<int>& targets,
                                       const TensorT<T>& gy) {
  using std::exp;
  TensorT<T> g(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    T m = logits.at(i, 0);
    for (int j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > m) m = logits.at(i, j);
    T z{};
    for (int j = 0; j < logits.cols(); ++j) z += exp(logits.at(i, j) - m);
    const T inv = T(1.0) / z;
    for (int j = 0; j < logits.cols(); ++j) {
      T p = exp(logits.at(i, j) - m) * inv;
      if (j == targets[i]) p = p - T(1.0);
      g.at(i, j) = p * gy.at(i, 0);
    }
  }
  return g;
}

// Whole-tensor sum as per-row partials combined in row order.
template <class T>
TensorT<T> sum_all(const TensorT<T>& a) {
  TensorT<T> c(1, 1);
  T acc{};
  for (int i = 0; i < a.rows(); ++i) {
    T part{};
    for (int j = 0; j < a.cols(); ++j) part += a.at(i, j);
    acc += part;
  }
  c.at(0, 0) = acc;
  return c;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& a) {
  TensorT<T> c = sum_all(a);
  c.at(0, 0) = c.at(0, 0) * T(1.0 / static_cast<double>(a.numel()));
  return c;
}

}  // namespace ref

// ---------------------------------------------------------------------------
// OpenMP-parallel forms. Work is split across output rows (or elements);
// inner accumulation order matches ref:: exactly.
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims differ, " + a.shape_str() + " * " +
                     b.shape_str());
  }
  TensorT<T> c(a.rows(), b.cols());
  const int64_t work =
      int64_t(a.rows()) * b.cols() * a.cols();
  const bool par = parallel_enabled() && work > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      T acc{};
      for (int k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dims differ, " + a.shape_str() +
                     " * " + b.shape_str() + "^T");
  }
  TensorT<T> c(a.rows(), b.rows());
  const int64_t work = int64_t(a.rows()) * b.rows() * a.cols();
  const bool par = parallel_enabled() && work > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.rows(); ++j) {
      T acc{};
      for (int k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(j, k);
      c.at(i, j) = acc;
    }
  }
  return c;
}

template <class T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dims differ, " + a.shape_str() +
                     "^T * " + b.shape_str());
  }
  TensorT<T> c(a.cols(), b.cols());
  const int64_t work = int64_t(a.cols()) * b.cols() * a.rows();
  const bool par = parallel_enabled() && work > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < a.cols(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      T acc{};
      for (int k = 0; k < a.rows(); ++k) acc += a.at(k, i) * b.at(k, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("add", a.rows(), a.cols(), b.rows(), b.cols());
  TensorT<T> c(a.rows(), a.cols());
  const int64_t n = static_cast<int64_t>(a.numel());
  const bool par = parallel_enabled() && n > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i) c.data[i] = a.data[i] + b.data[i];
  return c;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("mul", a.rows(), a.cols(), b.rows(), b.cols());
  TensorT<T> c(a.rows(), a.cols());
  const int64_t n = static_cast<int64_t>(a.numel());
  const bool par = parallel_enabled() && n > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i) c.data[i] = a.data[i] * b.data[i];
  return c;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, double s) {
  TensorT<T> c(a.rows(), a.cols());
  const int64_t n = static_cast<int64_t>(a.numel());
  const bool par = parallel_enabled() && n > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i) c.data[i] = a.data[i] * T(s);
  return c;
}

template <class T>
TensorT<T> add_rowvec(const TensorT<T>& a, const TensorT<T>& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw ShapeError("add_rowvec: " + a.shape_str() + " + " + b.shape_str());
  }
  TensorT<T> c(a.rows(), a.cols());
  const bool par = parallel_enabled() && a.numel() > size_t(kGrain);
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) c.at(i, j) = a.at(i, j) + b.at(0, j);
  return c;
}

template <class T>
TensorT<T> row_scale(const TensorT<T>& a, const TensorT<T>& s) {
  if (s.cols() != 1 || s.rows() != a.rows()) {
    throw ShapeError("row_scale: " + a.shape_str() + " by " + s.shape_str());
  }
  TensorT<T> c(a.rows(), a.cols());
  const bool par = parallel_enabled() && a.numel() > size_t(kGrain);
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) c.at(i, j) = a.at(i, j) * s.at(i, 0);
  return c;
}

template <class T>
TensorT<T> rowdot(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("rowdot", a.rows(), a.cols(), b.rows(), b.cols());
  TensorT<T> c(a.rows(), 1);
  const bool par = parallel_enabled() && a.numel() > size_t(kGrain);
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < a.rows(); ++i) {
    T acc{};
    for (int j = 0; j < a.cols(); ++j) acc += a.at(i, j) * b.at(i, j);
    c.at(i, 0) = acc;
  }
  return c;
}

template <class T>
TensorT<T> colsum(const TensorT<T>& a) {
  TensorT<T> c(1, a.cols());
  const bool par = parallel_enabled() && a.numel() > size_t(kGrain);
#pragma omp parallel for if (par) schedule(static)
  for (int j = 0; j < a.cols(); ++j) {
    T acc{};
    for (int i = 0; i < a.rows(); ++i) acc += a.at(i, j);
    c.at(0, j) = acc;
  }
  return c;
}

template <class T>
TensorT<T> exp_ew(const TensorT<T>& a) {
  using std::exp;
  TensorT<T> c(a.rows(), a.cols());
  const int64_t n = static_cast<int64_t>(a.numel());
  const bool par = parallel_enabled() && n > kGrain / 4;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i) c.data[i] = exp(a.data[i]);
  return c;
}

template <class T>
TensorT<T> log_ew(const TensorT<T>& a) {
  using std::log;
  TensorT<T> c(a.rows(), a.cols());
  const int64_t n = static_cast<int64_t>(a.numel());
  const bool par = parallel_enabled() && n > kGrain / 4;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i) c.data[i] = log(a.data[i]);
  return c;
}

template <class T>
TensorT<T> relu_ew(const TensorT<T>& a) {
  TensorT<T> c(a.rows(), a.cols());
  const int64_t n = static_cast<int64_t>(a.numel());
  const bool par = parallel_enabled() && n > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i)
    c.data[i] = a.data[i] > T(0.0) ? a.data[i] : T(0.0);
  return c;
}

template <class T>
TensorT<T> tanh_ew(const TensorT<T>& a) {
  using std::tanh;
  TensorT<T> c(a.rows(), a.cols());
  const int64_t n = static_cast<int64_t>(a.numel());
  const bool par = parallel_enabled() && n > kGrain / 4;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i) c.data[i] = tanh(a.data[i]);
  return c;
}

template <class T>
TensorT<T> recip_ew(const TensorT<T>& a) {
  TensorT<T> c(a.rows(), a.cols());
  const int64_t n = static_cast<int64_t>(a.numel());
  const bool par = parallel_enabled() && n > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i) c.data[i] = T(1.0) / a.data[i];
  return c;
}

template <class T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& gy) {
  check_same_shape("relu_backward", x.rows(), x.cols(), gy.rows(), gy.cols());
  TensorT<T> gx(x.rows(), x.cols());
  const int64_t n = static_cast<int64_t>(x.numel());
  const bool par = parallel_enabled() && n > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i)
    gx.data[i] = x.data[i] > T(0.0) ? gy.data[i] : T(0.0);
  return gx;
}

template <class T>
TensorT<T> tanh_backward(const TensorT<T>& y, const TensorT<T>& gy) {
  check_same_shape("tanh_backward", y.rows(), y.cols(), gy.rows(), gy.cols());
  TensorT<T> gx(y.rows(), y.cols());
  const int64_t n = static_cast<int64_t>(y.numel());
  const bool par = parallel_enabled() && n > kGrain;
#pragma omp parallel for if (par) schedule(static)
  for (int64_t i = 0; i < n; ++i)
    gx.data[i] = gy.data[i] * (T(1.0) - y.data[i] * y.data[i]);
  return gx;
}

template <class T>
TensorT<T> softmax_rows(const TensorT<T>& a) {
  using std::exp;
  TensorT<T> c(a.rows(), a.cols());
  const bool par = parallel_enabled() && a.numel() > size_t(kGrain / 4);
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < a.rows(); ++i) {
    T m = a.at(i, 0);
    for (int j = 1; j < a.cols(); ++j)
      if (a.at(i, j) > m) m = a.at(i, j);
    T z{};
    for (int j = 0; j < a.cols(); ++j) {
      c.at(i, j) = exp(a.at(i, j) - m);
      z += c.at(i, j);
    }
    const T inv = T(1.0) / z;
    for (int j = 0; j < a.cols(); ++j) c.at(i, j) = c.at(i, j) * inv;
  }
  return c;
}

template <class T>
TensorT<T> softmax_rows_backward(const TensorT<T>& y, const TensorT<T>& gy) {
  check_same_shape("softmax_backward", y.rows(), y.cols(), gy.rows(),
                   gy.cols());
  TensorT<T> gx(y.rows(), y.cols());
  const bool par = parallel_enabled() && y.numel() > size_t(kGrain / 2);
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < y.rows(); ++i) {
    T dot{};
    for (int j = 0; j < y.cols(); ++j) dot += gy.at(i, j) * y.at(i, j);
    for (int j = 0; j < y.cols(); ++j)
      gx.at(i, j) = y.at(i, j) * (gy.at(i, j) - dot);
  }
  return gx;
}

template <class T>
TensorT<T> layernorm_rows(const TensorT<T>& x, const TensorT<T>& gain,
                          const TensorT<T>& bias, double eps) {
  using std::sqrt;
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 ||
      bias.cols() != x.cols()) {
    throw ShapeError("layernorm: x " + x.shape_str() + ", gain " +
                     gain.shape_str() + ", bias " + bias.shape_str());
  }
  TensorT<T> y(x.rows(), x.cols());
  const double invn = 1.0 / x.cols();
  const bool par = parallel_enabled() && x.numel() > size_t(kGrain / 2);
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < x.rows(); ++i) {
    T mean{};
    for (int j = 0; j < x.cols(); ++j) mean += x.at(i, j);
    mean = mean * T(invn);
    T var{};
    for (int j = 0; j < x.cols(); ++j) {
      const T d = x.at(i, j) - mean;
      var += d * d;
    }
    var = var * T(invn);
    const T inv = T(1.0) / sqrt(var + T(eps));
    for (int j = 0; j < x.cols(); ++j)
      y.at(i, j) = (x.at(i, j) - mean) * inv * gain.at(0, j) + bias.at(0, j);
  }
  return y;
}

template <class T>
ref::LayernormGrads<T> layernorm_rows_backward(const TensorT<T>& x,
                                               const TensorT<T>& gain,
                                               double eps,
                                               const TensorT<T>& gy) {
  using std::sqrt;
  const int n = x.cols();
  ref::LayernormGrads<T> g{TensorT<T>(x.rows(), n), TensorT<T>(1, n),
                           TensorT<T>(1, n)};
  const double invn = 1.0 / n;
  const bool par = parallel_enabled() && x.numel() > size_t(kGrain / 2);
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < x.rows(); ++i) {
    T mean{};
    for (int j = 0; j < n; ++j) mean += x.at(i, j);
    mean = mean * T(invn);
    T var{};
    for (int j = 0; j < n; ++j) {
      const T d = x.at(i, j) - mean;
      var += d * d;
    }
    var = var * T(invn);
    const T inv = T(1.0) / sqrt(var + T(eps));
    T mg{}, mgx{};
    for (int j = 0; j < n; ++j) {
      const T xhat = (x.at(i, j) - mean) * inv;
      const T ghat = gy.at(i, j) * gain.at(0, j);
      mg += ghat;
      mgx += ghat * xhat;
    }
    mg = mg * T(invn);
    mgx = mgx * T(invn);
    for (int j = 0; j < n; ++j) {
      const T xhat = (x.at(i, j) - mean) * inv;
      const T ghat = gy.at(i, j) * gain.at(0, j);
      g.gx.at(i, j) = inv * (ghat - mg - xhat * mgx);
    }
  }
#pragma omp parallel for if (par) schedule(static)
  for (int j = 0; j < n; ++j) {
    T sg{}, sb{};
    for (int i = 0; i < x.rows(); ++i) {
      T mean{};
      for (int jj = 0; jj < n; ++jj) mean += x.at(i, jj);
      mean = mean * T(invn);
      T var{};
      for (int jj = 0; jj < n; ++jj) {
        const T d = x.at(i, jj) - mean;
        var += d * d;
      }
      var = var * T(invn);
      const T inv = T(1.0) / sqrt(var + T(eps));
      sg += gy.at(i, j) * (x.at(i, j) - mean) * inv;
      sb += gy.at(i, j);
    }
    g.ggain.at(0, j) = sg;
    g.gbias.at(0, j) = sb;
  }
  return g;
}

template <class T>
TensorT<T> embedding_rows(const TensorT<T>& table, const std::vector<int>& ids) {
  return ref::embedding_rows(table, ids);
}

template <class T>
TensorT<T> embedding_backward(const std::vector<int>& ids,
                              const TensorT<T>& gy, int vocab) {
  TensorT<T> g(vocab, gy.cols());
  const bool par = parallel_enabled() && gy.numel() > size_t(kGrain);
  // Columns are independent; each scatters rows in order.
#pragma omp parallel for if (par) schedule(static)
  for (int j = 0; j < gy.cols(); ++j)
    for (size_t t = 0; t < ids.size(); ++t)
      g.at(ids[t], j) += gy.at(static_cast<int>(t), j);
  return g;
}

template <class T>
TensorT<T> concat_cols(const TensorT<T>& a, const TensorT<T>& b) {
  return ref::concat_cols(a, b);
}

template <class T>
TensorT<T> concat_rows(const TensorT<T>& a, const TensorT<T>& b) {
  return ref::concat_rows(a, b);
}

template <class T>
TensorT<T> slice(const TensorT<T>& a, int r0, int r1, int c0, int c1) {
  return ref::slice(a, r0, r1, c0, c1);
}

template <class T>
TensorT<T> cross_entropy_rows(const TensorT<T>& logits,
                              const std::vector<int>& targets) {
  using std::exp;
  using std::log;
  if (static_cast<int>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + logits.shape_str());
  }
  // Validate before the parallel region; a throw inside it would terminate.
  for (int tgt : targets) {
    if (tgt < 0 || tgt >= logits.cols()) {
      throw ShapeError("cross_entropy: target " + std::to_string(tgt) +
                       " outside vocab of " + std::to_string(logits.cols()));
    }
  }
  TensorT<T> out(logits.rows(), 1);
  const bool par = parallel_enabled() && logits.numel() > size_t(kGrain / 4);
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < logits.rows(); ++i) {
    const int tgt = targets[i];
    T m = logits.at(i, 0);
    for (int j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > m) m = logits.at(i, j);
    T z{};
    for (int j = 0; j < logits.cols(); ++j) z += exp(logits.at(i, j) - m);
    out.at(i, 0) = log(z) - (logits.at(i, tgt) - m);
  }
  return out;
}

template <class T>
TensorT<T> cross_entropy_rows_backward(const TensorT<T>& logits,
                                       const std::vector<int>& targets,
                                       const TensorT<T>& gy) {
  using std::exp;
  TensorT<T> g(logits.rows(), logits.cols());
  const bool par = parallel_enabled() && logits.numel() > size_t(kGrain / 4);
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < logits.rows(); ++i) {
    T m = logits.at(i, 0);
    for (int j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > m) m = logits.at(i, j);
    T z{};
    for (int j = 0; j < logits.cols(); ++j) z += exp(logits.at(i, j) - m);
    const T inv = T(1.0) / z;
    for (int j = 0; j < logits.cols(); ++j) {
      T p = exp(logits.at(i, j) - m) * inv;
      if (j == targets[i]) p = p - T(1.0);
      g.at(i, j) = p * gy.at(i, 0);
    }
  }
  return g;
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& a) {
  TensorT<T> c(1, 1);
  const bool par = parallel_enabled() && a.numel() > size_t(kGrain) &&
                   a.rows() > 1;
  std::vector<T> parts(a.rows());
#pragma omp parallel for if (par) schedule(static)
  for (int i = 0; i < a.rows(); ++i) {
    T part{};
    for (int j = 0; j < a.cols(); ++j) part += a.at(i, j);
    parts[i] = part;
  }
  T acc{};
  for (int i = 0; i < a.rows(); ++i) acc += parts[i];
  c.at(0, 0) = acc;
  return c;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& a) {
  TensorT<T> c = sum_all(a);
  c.at(0, 0) = c.at(0, 0) * T(1.0 / static_cast<double>(a.numel()));
  return c;
}

}  // namespace rml::kernels
