#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rml/tensor.hpp"

// Central-difference gradient checking. The loss function is re-evaluated
// from scratch for each probe, so anything built on the tape gets its whole
// forward pass exercised.

namespace rml {

struct GradCheckReport {
  double max_rel_err{0.0};
  int worst_param{-1};
  size_t worst_elem{0};
  double analytic{0.0};
  double numeric{0.0};

  std::string str() const {
    return "max_rel_err=" + std::to_string(max_rel_err) + " at param " +
           std::to_string(worst_param) + "[" + std::to_string(worst_elem) +
           "] analytic=" + std::to_string(analytic) +
           " numeric=" + std::to_string(numeric);
  }
};

// rel err of a vs b with an absolute floor so near-zero gradients compare
// on an absolute scale.
inline double rel_err(double a, double b, double floor = 1e-7) {
  const double denom = std::max(std::max(std::fabs(a), std::fabs(b)), floor);
  return std::fabs(a - b) / denom;
}

// Probes a random subset of coordinates instead of every element.
template <class RngT>
GradCheckReport finite_diff_spot_check(
    const std::function<double(const std::vector<Tensor>&)>& loss,
    std::vector<Tensor> params, const std::vector<Tensor>& analytic,
    int n_probes, RngT& rng, double step = 1e-5) {
  GradCheckReport report;
  for (int probe = 0; probe < n_probes; ++probe) {
    const int p = rng.uniform_int(0, static_cast<int>(params.size()) - 1);
    const size_t i =
        static_cast<size_t>(rng.uniform_int(0, static_cast<int>(params[p].numel()) - 1));
    const double keep = params[p].data[i];
    params[p].data[i] = keep + step;
    const double up = loss(params);
    params[p].data[i] = keep - step;
    const double down = loss(params);
    params[p].data[i] = keep;
    const double numeric = (up - down) / (2.0 * step);
    const double err = rel_err(analytic[p].data[i], numeric);
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_param = p;
      report.worst_elem = i;
      report.analytic = analytic[p].data[i];
      report.numeric = numeric;
    }
  }
  return report;
}

inline GradCheckReport finite_diff_compare(
    const std::function<double(const std::vector<Tensor>&)>& loss,
    std::vector<Tensor> params, const std::vector<Tensor>& analytic,
    double step = 1e-5) {
  GradCheckReport report;
  for (size_t p = 0; p < params.size(); ++p) {
    for (size_t i = 0; i < params[p].numel(); ++i) {
      const double keep = params[p].data[i];
      params[p].data[i] = keep + step;
      const double up = loss(params);
      params[p].data[i] = keep - step;
      const double down = loss(params);
      params[p].data[i] = keep;
      const double numeric = (up - down) / (2.0 * step);
      const double err = rel_err(analytic[p].data[i], numeric);
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_param = static_cast<int>(p);
        report.worst_elem = i;
        report.analytic = analytic[p].data[i];
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace rml
