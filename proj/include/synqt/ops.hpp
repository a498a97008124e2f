#pragma once

// Differentiable primitives. Every primitive that records a node declares the
// tensors it retains for backward in the `saved` list; nothing else is read
// during the reverse sweep. Retention rules (a slot is left empty when the
// corresponding gradient is not needed):
//
//   matmul(a, b)        a if b needs grad, b if a needs grad
//   mul(a, b)           a if b needs grad, b if a needs grad
//   scale_by(x, s)      x if s needs grad, s if x needs grad
//   gelu(x)             x
//   sigmoid(x)          output
//   softmax_rows(x)     output
//   layernorm(x, g, b)  xhat if x or g needs grad; rstd and g if x needs grad
//   cross_entropy       class probabilities
//   add, scale, transpose, mean_rows, sum, concat, slice, reshape: nothing
//
// Parameters in a saved slot are not counted as stored activations.

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numbers>
#include <string>
#include <vector>

#include "synqt/tensor.hpp"

namespace synqt {

namespace detail {

inline Tape* recording(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return tape;
  return nullptr;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

#ifndef NDEBUG
inline void check_finite(const char* op, const Tensor& out, std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    for (double v : t->data())
      if (!std::isfinite(v)) return;
  for (double v : out.data())
    if (!std::isfinite(v)) throw ContractError(std::string(op) + " produced a non-finite value from finite inputs");
}
#else
inline void check_finite(const char*, const Tensor&, std::initializer_list<const Tensor*>) {}
#endif

// c[m,n] += a[m,k] * b[k,n] with optional transposes on the operands.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                     bool trans_a, bool trans_b) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

inline double phi(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
inline double Phi(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n, false, false);
  Tensor y = Tensor::matrix(m, n, std::move(out));
  detail::check_finite("matmul", y, {&a, &b});
  if (Tape* tape = detail::recording({&a, &b})) {
    std::vector<Tensor> saved{b.requires_grad() ? a : Tensor(), a.requires_grad() ? b : Tensor()};
    tape->record("matmul", y, {a, b}, std::move(saved), [m, k, n](const BackwardContext& c) {
      const double* g = c.grad_out.data();
      if (double* ga = c.grad(0)) detail::gemm_acc(g, c.saved[1].data().data(), ga, m, n, k, false, true);
      if (double* gb = c.grad(1)) detail::gemm_acc(c.saved[0].data().data(), g, gb, k, m, n, true, false);
    });
  }
  return y;
}

inline Tensor transpose(const Tensor& x) {
  detail::require_matrix(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  Tensor y = Tensor::matrix(n, m, std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    tape->record("transpose", y, {x}, {}, [m, n](const BackwardContext& c) {
      double* gx = c.grad(0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += c.grad_out[j * m + i];
    });
  }
  return y;
}

// Elementwise sum. `b` may also be a rank-1 bias of length cols(a), which is
// broadcast over the rows of `a`.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = b.rank() == 1 && a.rank() >= 1 && b.numel() == a.cols() && a.shape() != b.shape();
  if (!bias && a.shape() != b.shape())
    throw DimensionError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = b.numel();
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[bias ? i % n : i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  detail::check_finite("add", y, {&a, &b});
  if (Tape* tape = detail::recording({&a, &b})) {
    tape->record("add", y, {a, b}, {}, [bias, n](const BackwardContext& c) {
      const auto& g = c.grad_out;
      if (double* ga = c.grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (double* gb = c.grad(1))
        for (std::size_t i = 0; i < g.size(); ++i) gb[bias ? i % n : i] += g[i];
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  detail::check_finite("mul", y, {&a, &b});
  if (Tape* tape = detail::recording({&a, &b})) {
    std::vector<Tensor> saved{b.requires_grad() ? a : Tensor(), a.requires_grad() ? b : Tensor()};
    tape->record("mul", y, {a, b}, std::move(saved), [](const BackwardContext& c) {
      const auto& g = c.grad_out;
      if (double* ga = c.grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c.saved[1][i];
      if (double* gb = c.grad(1))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * c.saved[0][i];
    });
  }
  return y;
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.values());
  for (double& v : out) v *= s;
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    tape->record("scale", y, {x}, {}, [s](const BackwardContext& c) {
      double* gx = c.grad(0);
      for (std::size_t i = 0; i < c.grad_out.size(); ++i) gx[i] += s * c.grad_out[i];
    });
  }
  return y;
}

// x * s for a one-element tensor s.
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: factor must have one element, got " + shape_str(s.shape()));
  const double sv = s[0];
  std::vector<double> out(x.values());
  for (double& v : out) v *= sv;
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  detail::check_finite("scale_by", y, {&x, &s});
  if (Tape* tape = detail::recording({&x, &s})) {
    std::vector<Tensor> saved{s.requires_grad() ? x : Tensor(), x.requires_grad() ? s : Tensor()};
    tape->record("scale_by", y, {x, s}, std::move(saved), [](const BackwardContext& c) {
      const auto& g = c.grad_out;
      if (double* gx = c.grad(0)) {
        const double f = c.saved[1][0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += f * g[i];
      }
      if (double* gs = c.grad(1)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * c.saved[0][i];
        gs[0] += acc;
      }
    });
  }
  return y;
}

// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * detail::Phi(x[i]);
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    tape->record("gelu", y, {x}, {x}, [](const BackwardContext& c) {
      double* gx = c.grad(0);
      const Tensor& in = c.saved[0];
      for (std::size_t i = 0; i < c.grad_out.size(); ++i) {
        const double v = in[i];
        gx[i] += c.grad_out[i] * (detail::Phi(v) + v * detail::phi(v));
      }
    });
  }
  return y;
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    tape->record("sigmoid", y, {x}, {y}, [](const BackwardContext& c) {
      double* gx = c.grad(0);
      const Tensor& s = c.saved[0];
      for (std::size_t i = 0; i < c.grad_out.size(); ++i) gx[i] += c.grad_out[i] * s[i] * (1.0 - s[i]);
    });
  }
  return y;
}

// Row-wise softmax, stabilized by subtracting the row max.
inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.cols(), m = x.numel() / n;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    tape->record("softmax_rows", y, {x}, {y}, [m, n](const BackwardContext& c) {
      double* gx = c.grad(0);
      const Tensor& s = c.saved[0];
      for (std::size_t r = 0; r < m; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += c.grad_out[r * n + j] * s[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += s[r * n + j] * (c.grad_out[r * n + j] - dot);
      }
    });
  }
  return y;
}

// Normalizes over the last axis, then applies gamma/beta.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6) {
  const std::size_t d = x.cols(), m = x.numel() / d;
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layernorm: affine width " + shape_str(gamma.shape()) + " vs input " + shape_str(x.shape()));
  std::vector<double> xhat(x.numel()), rstd(m), out(x.numel());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mean) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  detail::check_finite("layernorm", y, {&x, &gamma, &beta});
  if (Tape* tape = detail::recording({&x, &gamma, &beta})) {
    const bool need_xhat = x.requires_grad() || gamma.requires_grad();
    std::vector<Tensor> saved{need_xhat ? Tensor::from_data(x.shape(), std::move(xhat)) : Tensor(),
                              x.requires_grad() ? Tensor::from_data({m}, std::move(rstd)) : Tensor(),
                              x.requires_grad() ? gamma : Tensor()};
    tape->record("layernorm", y, {x, gamma, beta}, std::move(saved), [m, d](const BackwardContext& c) {
      const auto& g = c.grad_out;
      const Tensor& xh = c.saved[0];
      if (double* gg = c.grad(1))
        for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xh[i];
      if (double* gb = c.grad(2))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
      if (double* gx = c.grad(0)) {
        const Tensor& rs = c.saved[1];
        const Tensor& gm = c.saved[2];
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < m; ++r) {
          double sum_gh = 0.0, sum_ghx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g[r * d + j] * gm[j];
            sum_gh += gh;
            sum_ghx += gh * xh[r * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g[r * d + j] * gm[j];
            gx[r * d + j] += rs[r] * inv_d * (static_cast<double>(d) * gh - sum_gh - xh[r * d + j] * sum_ghx);
          }
        }
      }
    });
  }
  return y;
}

// Mean over rows: [m x d] -> [1 x d].
inline Tensor mean_rows(const Tensor& x) {
  detail::require_matrix(x, "mean_rows");
  const std::size_t m = x.rows(), d = x.cols();
  if (m == 0) throw DimensionError("mean_rows: no rows");
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < d; ++j) out[j] += x[r * d + j];
  for (double& v : out) v /= static_cast<double>(m);
  Tensor y = Tensor::matrix(1, d, std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    tape->record("mean_rows", y, {x}, {}, [m, d](const BackwardContext& c) {
      double* gx = c.grad(0);
      const double inv = 1.0 / static_cast<double>(m);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += c.grad_out[j] * inv;
    });
  }
  return y;
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor y = Tensor::scalar(s);
  if (Tape* tape = detail::recording({&x})) {
    const std::size_t n = x.numel();
    tape->record("sum", y, {x}, {}, [n](const BackwardContext& c) {
      double* gx = c.grad(0);
      for (std::size_t i = 0; i < n; ++i) gx[i] += c.grad_out[0];
    });
  }
  return y;
}

// Concatenation of matrices along axis 0 (rows) or 1 (columns).
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
  for (const auto& p : parts) detail::require_matrix(p, "concat");
  const std::size_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if ((axis == 0 ? p.cols() : p.rows()) != fixed)
      throw DimensionError("concat: mismatched " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()));
    total += axis == 0 ? p.rows() : p.cols();
  }
  const std::size_t rows = axis == 0 ? total : fixed, cols = axis == 0 ? fixed : total;
  std::vector<double> out(rows * cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t j = 0; j < p.cols(); ++j) {
        const std::size_t dst = axis == 0 ? (off + r) * cols + j : r * cols + off + j;
        out[dst] = p[r * p.cols() + j];
      }
    off += axis == 0 ? p.rows() : p.cols();
  }
  Tensor y = Tensor::matrix(rows, cols, std::move(out));
  Tape* tape = active_tape();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape != nullptr && any) {
    std::vector<Shape> shapes;
    for (const auto& p : parts) shapes.push_back(p.shape());
    tape->record("concat", y, parts, {}, [shapes, offsets, axis, cols](const BackwardContext& c) {
      for (std::size_t k = 0; k < shapes.size(); ++k) {
        double* gp = c.grad(k);
        if (gp == nullptr) continue;
        const std::size_t pr = shapes[k][0], pc = shapes[k][1];
        for (std::size_t r = 0; r < pr; ++r)
          for (std::size_t j = 0; j < pc; ++j) {
            const std::size_t src = axis == 0 ? (offsets[k] + r) * cols + j : r * cols + offsets[k] + j;
            gp[r * pc + j] += c.grad_out[src];
          }
      }
    });
  }
  return y;
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  if (start + count > x.rows())
    throw IndexError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_str(x.shape()));
  const std::size_t d = x.cols();
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(start * d),
                          x.data().begin() + static_cast<std::ptrdiff_t>((start + count) * d));
  Tensor y = Tensor::matrix(count, d, std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    tape->record("slice_rows", y, {x}, {}, [start, d](const BackwardContext& c) {
      double* gx = c.grad(0) + start * d;
      for (std::size_t i = 0; i < c.grad_out.size(); ++i) gx[i] += c.grad_out[i];
    });
  }
  return y;
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  if (start + count > x.cols())
    throw IndexError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * count);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < count; ++j) out[r * count + j] = x[r * n + start + j];
  Tensor y = Tensor::matrix(m, count, std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    tape->record("slice_cols", y, {x}, {}, [m, n, start, count](const BackwardContext& c) {
      double* gx = c.grad(0);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < count; ++j) gx[r * n + start + j] += c.grad_out[r * count + j];
    });
  }
  return y;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor y = Tensor::from_data(std::move(shape), x.values());
  if (Tape* tape = detail::recording({&x})) {
    tape->record("reshape", y, {x}, {}, [](const BackwardContext& c) {
      double* gx = c.grad(0);
      for (std::size_t i = 0; i < c.grad_out.size(); ++i) gx[i] += c.grad_out[i];
    });
  }
  return y;
}

// -log softmax(logits)[label]; logits is a vector or a single-row matrix.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t n = logits.numel();
  if (logits.rows() != 1) throw DimensionError("cross_entropy: expected one row, got " + shape_str(logits.shape()));
  if (label >= n)
    throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " + std::to_string(n) +
                     " classes");
  const double mx = *std::max_element(logits.data().begin(), logits.data().end());
  std::vector<double> p(n);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += (p[j] = std::exp(logits[j] - mx));
  for (double& v : p) v /= z;
  Tensor y = Tensor::scalar(std::log(z) + mx - logits[label]);
  if (Tape* tape = detail::recording({&logits})) {
    tape->record("cross_entropy", y, {logits}, {Tensor::from_data({n}, std::move(p))},
                 [label](const BackwardContext& c) {
                   double* gx = c.grad(0);
                   const Tensor& probs = c.saved[0];
                   for (std::size_t j = 0; j < probs.numel(); ++j)
                     gx[j] += c.grad_out[0] * (probs[j] - (j == label ? 1.0 : 0.0));
                 });
  }
  return y;
}

// x W + b for a row-major weight [in x out] and a rank-1 bias [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

}  // namespace synqt
