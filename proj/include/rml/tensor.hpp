#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "rml/dual.hpp"
#include "rml/errors.hpp"

namespace rml {

// Dense row-major matrix of T. Every tensor in the project is rank 2;
// scalars are 1x1 and vectors are 1xN or Mx1.
template <class T>
struct TensorT {
  int rows_{0};
  int cols_{0};
  std::vector<T> data;

  TensorT() = default;
  TensorT(int rows, int cols, T fill = T{}) : rows_(rows), cols_(cols) {
    if (rows <= 0 || cols <= 0) {
      throw ShapeError("tensor shape must be positive, got " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
    data.assign(static_cast<size_t>(rows) * cols, fill);
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t numel() const { return data.size(); }

  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols_ + c]; }
  const T& at(int r, int c) const {
    return data[static_cast<size_t>(r) * cols_ + c];
  }

  bool same_shape(const TensorT& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  static TensorT from(int rows, int cols, std::vector<T> values) {
    TensorT t(rows, cols);
    if (values.size() != t.numel()) {
      throw ShapeError("tensor init: " + std::to_string(values.size()) +
                       " values for shape " + t.shape_str());
    }
    t.data = std::move(values);
    return t;
  }
};

using Tensor = TensorT<double>;
using DualTensor = TensorT<Dual>;

template <class T>
bool all_finite(const TensorT<T>& t) {
  for (const T& x : t.data) {
    if (!is_finite(x)) return false;
  }
  return true;
}

// Widening double -> Dual with zero tangents.
inline DualTensor to_dual(const Tensor& t) {
  DualTensor d(t.rows(), t.cols());
  for (size_t i = 0; i < t.numel(); ++i) d.data[i] = Dual(t.data[i]);
  return d;
}

inline Tensor values_of(const DualTensor& d) {
  Tensor t(d.rows(), d.cols());
  for (size_t i = 0; i < d.numel(); ++i) t.data[i] = d.data[i].v;
  return t;
}

inline Tensor tangents_of(const DualTensor& d) {
  Tensor t(d.rows(), d.cols());
  for (size_t i = 0; i < d.numel(); ++i) t.data[i] = d.data[i].t;
  return t;
}

}  // namespace rml
