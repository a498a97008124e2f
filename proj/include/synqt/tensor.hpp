#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace synqt {

// ---------------------------------------------------------------------------
// Errors

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool is_parameter = false;
  bool produced_by_tape = false;
  std::string name;
};
}  // namespace detail

// Dense row-major array of doubles, rank <= 4. Copies share storage; values
// produced by operations are never mutated afterwards. Parameters are the only
// tensors whose storage is updated in place (by the optimizer and by
// finite-difference probes).
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data) {
    if (shape.size() > 4) throw DimensionError("tensor rank > 4: " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                           " values");
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }
  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return from_data({1}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return from_data({rows, cols}, std::move(data));
  }
  // Named model parameter. Trainable parameters are the leaves that receive
  // gradients; frozen ones never do.
  static Tensor parameter(std::string name, Shape shape, std::vector<double> data, bool trainable) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.impl_->name = std::move(name);
    t.impl_->is_parameter = true;
    t.impl_->requires_grad = trainable;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : impl_->shape[rank() - 2]; }
  std::size_t cols() const { return impl_->shape.back(); }
  bool requires_grad() const { return impl_->requires_grad; }
  bool is_parameter() const { return impl_->is_parameter; }
  bool is_leaf() const { return !impl_->produced_by_tape; }
  const std::string& name() const { return impl_->name; }
  const detail::TensorImpl* id() const { return impl_.get(); }

  std::span<const double> data() const { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  // In-place access, restricted to parameters.
  std::span<double> mutable_data() {
    if (!impl_->is_parameter) throw ContractError("in-place write to non-parameter tensor");
    return impl_->data;
  }
  void set_trainable(bool on) {
    if (!impl_->is_parameter) throw ContractError("set_trainable on non-parameter tensor");
    impl_->requires_grad = on;
  }

  // Deep copy with fresh identity; keeps name and parameter flags.
  Tensor clone() const {
    Tensor t = from_data(shape(), impl_->data);
    t.impl_->name = impl_->name;
    t.impl_->is_parameter = impl_->is_parameter;
    t.impl_->requires_grad = impl_->is_parameter && impl_->requires_grad;
    return t;
  }

  bool bitwise_equal(const Tensor& o) const {
    return shape() == o.shape() &&
           std::equal(impl_->data.begin(), impl_->data.end(), o.impl_->data.begin(), [](double a, double b) {
             return std::memcmp(&a, &b, sizeof(double)) == 0;
           });
  }

 private:
  friend class Tape;
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Gradient tape

// Per-node backward context. grad(i) is null for inputs that do not require a
// gradient; no buffer is ever allocated for them.
struct BackwardContext {
  std::span<const double> grad_out;
  const std::vector<Tensor>& saved;
  std::vector<double*> grad_in;
  double* grad(std::size_t i) const { return grad_in[i]; }
};

using BackwardFn = std::function<void(const BackwardContext&)>;

// Scalar count a node retains for backward. Parameters are resident model
// state rather than activations, so retaining one costs nothing here.
inline std::size_t retained_scalars(const std::vector<Tensor>& saved) {
  std::size_t n = 0;
  for (const auto& t : saved)
    if (t.defined() && !t.is_parameter()) n += t.numel();
  return n;
}

class GradMap {
 public:
  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }
  const Tensor& at(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) throw IndexError("no gradient for tensor '" + t.name() + "'");
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

  void insert(const detail::TensorImpl* key, Tensor g) { grads_.emplace(key, std::move(g)); }
  // Adds another map's gradients into this one (shard-ordered reduction).
  void accumulate(const GradMap& other) {
    for (const auto& [k, g] : other.grads_) {
      auto it = grads_.find(k);
      if (it == grads_.end()) {
        grads_.emplace(k, Tensor::from_data(g.shape(), g.values()));
      } else {
        std::vector<double> sum = it->second.values();
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g[i];
        it->second = Tensor::from_data(g.shape(), std::move(sum));
      }
    }
  }

 private:
  std::unordered_map<const detail::TensorImpl*, Tensor> grads_;
};

class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::vector<Tensor> saved;
    std::size_t saved_scalars = 0;
    BackwardFn backward;
  };

  std::size_t saved_scalar_count() const { return saved_scalar_count_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  // Marks `output` as requiring grad and appends a node. `saved` holds exactly
  // the tensors the backward function reads; undefined slots are not retained.
  void record(std::string op, Tensor& output, std::vector<Tensor> inputs, std::vector<Tensor> saved,
              BackwardFn backward) {
    output.impl_->requires_grad = true;
    output.impl_->produced_by_tape = true;
    Node n{std::move(op), std::move(inputs), output, std::move(saved), 0, std::move(backward)};
    n.saved_scalars = retained_scalars(n.saved);
    saved_scalar_count_ += n.saved_scalars;
    nodes_.push_back(std::move(n));
  }

  // Reverse sweep from a scalar loss; returns gradients of trainable leaves.
  GradMap backward(const Tensor& loss) const {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward() requires a scalar loss, got " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (!loss.requires_grad()) throw ContractError("backward() on a loss that was not recorded on a tape");
    std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads;
    grads[loss.id()] = {1.0};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto g = grads.find(it->output.id());
      if (g == grads.end()) continue;
      BackwardContext ctx{g->second, it->saved, {}};
      ctx.grad_in.reserve(it->inputs.size());
      for (const auto& in : it->inputs) {
        if (!in.requires_grad()) {
          ctx.grad_in.push_back(nullptr);
          continue;
        }
        auto& buf = grads[in.id()];
        if (buf.empty()) buf.assign(in.numel(), 0.0);
        ctx.grad_in.push_back(buf.data());
      }
      it->backward(ctx);
    }
    GradMap out;
    for (const auto& node : nodes_)
      for (const auto& in : node.inputs)
        if (in.requires_grad() && in.is_leaf() && !out.contains(in)) {
          auto g = grads.find(in.id());
          if (g != grads.end()) out.insert(in.id(), Tensor::from_data(in.shape(), g->second));
        }
    return out;
  }

 private:
  std::vector<Node> nodes_;
  std::size_t saved_scalar_count_ = 0;
};

namespace detail {
inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

// Makes `tape` the recording tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape()) { detail::active_tape() = &tape; }
  ~TapeScope() { detail::active_tape() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Suspends recording; operations inside produce constants.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape()) { detail::active_tape() = nullptr; }
  ~NoGradScope() { detail::active_tape() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

inline Tape* active_tape() { return detail::active_tape(); }

}  // namespace synqt
