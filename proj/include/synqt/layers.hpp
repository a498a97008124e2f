#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "synqt/ops.hpp"
#include "synqt/rng.hpp"

namespace synqt {

// Parameter factories. Values are drawn in row-major order from `rng`.
inline Tensor trunc_normal_param(Rng& rng, std::string name, Shape shape, double stddev, bool trainable) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.trunc_normal(stddev);
  return Tensor::parameter(std::move(name), std::move(shape), std::move(v), trainable);
}

inline Tensor constant_param(std::string name, Shape shape, double value, bool trainable) {
  const auto n = shape_numel(shape);
  return Tensor::parameter(std::move(name), std::move(shape), std::vector<double>(n, value), trainable);
}

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out], may be undefined

  Tensor operator()(const Tensor& x) const { return bias.defined() ? linear(x, weight, bias) : matmul(x, weight); }
  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  static Linear make(Rng& rng, const std::string& name, std::size_t in, std::size_t out, double stddev,
                     bool trainable, bool with_bias = true) {
    Linear l{trunc_normal_param(rng, name + ".weight", {in, out}, stddev, trainable), {}};
    if (with_bias) l.bias = constant_param(name + ".bias", {out}, 0.0, trainable);
    return l;
  }
  void collect(std::vector<Tensor>& out) const {
    out.push_back(weight);
    if (bias.defined()) out.push_back(bias);
  }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  Tensor operator()(const Tensor& x) const { return layernorm(x, gamma, beta); }

  static LayerNormParams make(const std::string& name, std::size_t d, bool trainable) {
    return {constant_param(name + ".gamma", {d}, 1.0, trainable), constant_param(name + ".beta", {d}, 0.0, trainable)};
  }
  void collect(std::vector<Tensor>& out) const {
    out.push_back(gamma);
    out.push_back(beta);
  }
};

// Down-projection to a narrow width followed by an up-projection.
struct Bottleneck {
  Linear down;
  Linear up;

  // Linear form: up(down(x)).
  Tensor linear_path(const Tensor& x) const { return up(down(x)); }
  // With GELU between the two projections.
  Tensor gelu_path(const Tensor& x) const { return up(gelu(down(x))); }

  std::size_t hidden() const { return down.out_features(); }

  static Bottleneck make(Rng& rng, const std::string& name, std::size_t d, std::size_t hidden, double stddev,
                         bool trainable, bool up_bias = true) {
    Linear dn = Linear::make(rng, name + ".down", d, hidden, stddev, trainable);
    Linear up = Linear::make(rng, name + ".up", hidden, d, stddev, trainable, up_bias);
    return {std::move(dn), std::move(up)};
  }
  void collect(std::vector<Tensor>& out) const {
    down.collect(out);
    up.collect(out);
  }
};

// Scaled dot-product attention split over `heads` column groups of width
// d/heads; queries [n x d], keys and values [m x d].
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d)
    throw DimensionError("attention: width mismatch " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
  if (k.rows() != v.rows()) throw DimensionError("attention: key/value token counts differ");
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by head count");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    outs.push_back(matmul(weights, vh));
  }
  return heads == 1 ? outs.front() : concat(outs, 1);
}

}  // namespace synqt
