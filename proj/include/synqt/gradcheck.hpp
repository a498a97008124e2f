#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "synqt/ops.hpp"

namespace synqt {

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;     // worst single element
  double max_abs_error = 0.0;
  double tensor_rel_error = 0.0;  // |a - n| / (|a| + |n|) over the checked elements as one vector
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double max_tensor_rel_error = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

// Compares reverse-mode gradients of `loss` with central differences for
// every element of every tensor in `params` (or, when `per_tensor` is
// nonzero, for that many evenly strided elements of each). Each parameter is
// perturbed in place and restored bitwise afterwards.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                  double eps = 1e-5, std::size_t per_tensor = 0) {
  if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
  GradMap grads;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor l = loss();
    grads = tape.backward(l);
  }
  auto eval = [&] {
    NoGradScope ng;
    return loss().item();
  };
  GradCheckReport report;
  for (Tensor& p : params) {
    if (!p.is_parameter()) throw ContractError("grad_check: '" + p.name() + "' is not a parameter");
    const std::size_t n = p.numel();
    const std::size_t checked = per_tensor == 0 ? n : std::min(n, per_tensor);
    GradCheckEntry e{p.name(), checked, 0.0, 0.0, 0.0};
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    const Tensor analytic = grads.contains(p) ? grads.at(p) : Tensor::zeros(p.shape());
    auto buf = p.mutable_data();
    for (std::size_t s = 0; s < checked; ++s) {
      const std::size_t i = s * n / checked;
      const double orig = buf[i];
      buf[i] = orig + eps;
      const double up = eval();
      buf[i] = orig - eps;
      const double down = eval();
      buf[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      e.max_rel_error = std::max(e.max_rel_error, relative_error(analytic[i], numeric));
      e.max_abs_error = std::max(e.max_abs_error, std::abs(analytic[i] - numeric));
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    e.tensor_rel_error = std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2) + 1e-12);
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.max_abs_error = std::max(report.max_abs_error, e.max_abs_error);
    report.max_tensor_rel_error = std::max(report.max_tensor_rel_error, e.tensor_rel_error);
    report.entries.push_back(std::move(e));
  }
  return report;
}

// Single-tensor form: f maps a parameter tensor to a scalar.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
  return grad_check([&] { return f(x); }, {x}, eps).max_rel_error;
}

}  // namespace synqt
