#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "synqt/tensor.hpp"

namespace synqt {

struct AdamWState {
  std::vector<double> m, v;
  std::uint64_t step = 0;
};

struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // One decoupled-weight-decay Adam update of `param` in place.
  void step(Tensor param, const Tensor& grad, AdamWState& s, double lr, double weight_decay) const {
    if (grad.shape() != param.shape())
      throw DimensionError("adamw: gradient " + shape_str(grad.shape()) + " for parameter " + shape_str(param.shape()));
    const std::size_t n = param.numel();
    if (s.m.empty()) {
      s.m.assign(n, 0.0);
      s.v.assign(n, 0.0);
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.step));
    auto p = param.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i];
      s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
      s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
      p[i] -= lr * weight_decay * p[i];
      p[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
    }
  }
};

// Linear warmup over `warmup` steps, then cosine decay to 0 at `total`.
inline double cosine_lr(std::size_t step, std::size_t total, double base_lr, std::size_t warmup = 0) {
  if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup || step >= total) return step >= total ? 0.0 : base_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace synqt
