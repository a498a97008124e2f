#pragma once

// Analytic census of trainable parameters, activation scalars retained for
// backward, and inference FLOPs, for a tuning scheme on a ViT geometry.
//
// The activation model walks the same operation sequence as the executable
// models, tracking only shapes and which values require gradients, and
// applies the per-primitive retention rules documented in ops.hpp. For every
// configuration that can be instantiated the result equals the tape's
// saved_scalar_count exactly.
//
// FLOP convention: one multiply-add is 2 FLOPs; the `macs` counter holds the
// matmul multiply-adds alone. Elementwise costs per output element:
// layernorm 5, softmax 5, gelu 8, sigmoid 4, add/scale/mean 1.

#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "synqt/scheme.hpp"

namespace synqt {

enum class Counter { params, activations, flops, macs };

inline std::string to_string(Counter c) {
  switch (c) {
    case Counter::params: return "params";
    case Counter::activations: return "activations";
    case Counter::flops: return "flops";
    case Counter::macs: return "macs";
  }
  return "?";
}

struct LedgerItem {
  std::string name;
  std::string category;
  Counter counter = Counter::params;
  std::uint64_t count = 0;
};

struct Ledger {
  std::string scheme;
  std::vector<LedgerItem> items;

  std::uint64_t total(Counter c) const {
    std::uint64_t s = 0;
    for (const auto& i : items)
      if (i.counter == c) s += i.count;
    return s;
  }
  std::uint64_t total(Counter c, const std::string& category) const {
    std::uint64_t s = 0;
    for (const auto& i : items)
      if (i.counter == c && i.category == category) s += i.count;
    return s;
  }
  std::uint64_t trainable_params() const { return total(Counter::params); }
  std::uint64_t stored_activation_scalars() const { return total(Counter::activations); }
  std::uint64_t flops() const { return total(Counter::flops); }
  std::uint64_t macs() const { return total(Counter::macs); }
  // Bytes under 32-bit storage.
  std::uint64_t activation_bytes() const { return 4 * stored_activation_scalars(); }

  void add(std::string name, std::string category, Counter c, std::uint64_t n) {
    items.push_back({std::move(name), std::move(category), c, n});
  }
  void merge(const Ledger& o) { items.insert(items.end(), o.items.begin(), o.items.end()); }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& i : items)
      arr.push_back({{"name", i.name}, {"category", i.category}, {"counter", to_string(i.counter)}, {"count", i.count}});
    return {{"scheme", scheme},
            {"trainable_params", trainable_params()},
            {"stored_activation_scalars", stored_activation_scalars()},
            {"activation_bytes_fp32", activation_bytes()},
            {"flops", flops()},
            {"macs", macs()},
            {"items", arr}};
  }
};

// ---------------------------------------------------------------------------
// Parameter census

inline std::uint64_t vit_block_params(const BackboneConfig& a) {
  const std::uint64_t d = a.width, h = a.mlp_hidden();
  return 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
}

inline std::uint64_t vit_params(const BackboneConfig& a) {
  const std::uint64_t d = a.width;
  return a.patch_dim() * d + d + a.num_register_tokens * d + a.num_tokens() * d + a.depth * vit_block_params(a) +
         2 * d;
}

inline std::uint64_t vit_bias_params(const BackboneConfig& a) {
  const std::uint64_t d = a.width, h = a.mlp_hidden();
  // patch bias, per block (ln1 beta, q/k/v/o biases, ln2 beta, fc1/fc2 biases), final beta
  return d + a.depth * (d + 4 * d + d + h + d) + d;
}

inline Ledger count_params(const Scheme& s) {
  s.validate();
  Ledger g;
  g.scheme = s.label();
  const std::uint64_t d = s.arch.width, l = s.arch.depth, c = s.num_classes;
  const std::uint64_t linear_head = d * c + c;
  switch (s.kind) {
    case SchemeKind::full_finetune:
      g.add("backbone", "backbone-side", Counter::params, vit_params(s.arch));
      g.add("classifier", "head", Counter::params, linear_head);
      break;
    case SchemeKind::linear_probe:
      g.add("classifier", "head", Counter::params, linear_head);
      break;
    case SchemeKind::bitfit:
      g.add("biases", "backbone-side", Counter::params, vit_bias_params(s.arch));
      g.add("classifier", "head", Counter::params, linear_head);
      break;
    case SchemeKind::vpt_deep:
      g.add("prompts", "backbone-side", Counter::params, s.tokens * d * l);
      g.add("classifier", "head", Counter::params, linear_head);
      break;
    case SchemeKind::lora: {
      const std::uint64_t layers = s.lora_layer == 0 ? l : 1;
      g.add("lora_qv", "backbone-side", Counter::params, layers * 2 * (2 * d * s.rank));
      g.add("classifier", "head", Counter::params, linear_head);
      break;
    }
    case SchemeKind::adapter:
      g.add("adapters", "backbone-side", Counter::params, l * 2 * (2 * d * s.adapter_hidden + s.adapter_hidden + d));
      g.add("classifier", "head", Counter::params, linear_head);
      break;
    case SchemeKind::synqt:
      for (std::uint64_t i = 1; i <= l; ++i)
        g.add("qsm." + std::to_string(i), "backbone-side", Counter::params, qsm_param_count(d, s.synqt));
      g.add("head", "head", Counter::params, head_param_count(d, s.head_config()));
      break;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activation retention model

namespace detail {

struct Act {
  std::uint64_t rows = 0, cols = 0;
  bool rg = false;
  std::uint64_t n() const { return rows * cols; }
};

// Mirrors the retention rules of the primitives in ops.hpp.
class RetentionWalker {
 public:
  std::uint64_t retained = 0;

  // x W (+ b), W a parameter
  Act linear(Act x, bool w_rg, bool b_rg, std::uint64_t out, bool has_bias = true) {
    const bool rec = x.rg || w_rg;
    if (rec && w_rg) retained += x.n();
    return {x.rows, out, rec || (has_bias && b_rg)};
  }
  // Product of two activations, b being the [k x n] operand.
  Act matmul(Act a, Act b) {
    if (a.rg || b.rg) retained += (b.rg ? a.n() : 0) + (a.rg ? b.n() : 0);
    return {a.rows, b.cols, a.rg || b.rg};
  }
  Act layernorm(Act x, bool g_rg, bool b_rg) {
    if (x.rg || g_rg || b_rg) retained += (x.rg || g_rg ? x.n() : 0) + (x.rg ? x.rows : 0);
    return {x.rows, x.cols, x.rg || g_rg || b_rg};
  }
  Act gelu(Act x) { return keep_output(x); }
  Act softmax(Act x) { return keep_output(x); }
  Act sigmoid(Act x) { return keep_output(x); }
  Act scale_by(Act x, Act s) {
    if (x.rg || s.rg) retained += (s.rg ? x.n() : 0) + (x.rg ? s.n() : 0);
    return {x.rows, x.cols, x.rg || s.rg};
  }
  static Act add(Act a, Act b) { return {a.rows, a.cols, a.rg || b.rg}; }
  static Act mean_rows(Act x) { return {1, x.cols, x.rg}; }
  void cross_entropy(Act logits) {
    if (logits.rg) retained += logits.n();
  }

  Act attention(Act q, Act k, Act v, std::uint64_t heads) {
    const std::uint64_t dh = q.cols / heads;
    Act out{q.rows, 0, false};
    for (std::uint64_t h = 0; h < heads; ++h) {
      Act qh{q.rows, dh, q.rg}, kt{dh, k.rows, k.rg}, vh{v.rows, dh, v.rg};
      Act w = softmax(matmul(qh, kt));
      Act o = matmul(w, vh);
      out.cols += o.cols;
      out.rg = out.rg || o.rg;
    }
    return out;
  }

 private:
  Act keep_output(Act x) {
    if (x.rg) retained += x.n();
    return x;
  }
};

struct VitFlags {
  bool weights = false;   // linear weights, LN gammas, cls, pos
  bool biases = false;    // linear biases, LN betas
  bool lora = false;
  bool adapter = false;
};

inline Act walk_vit_block(RetentionWalker& w, Act x, const BackboneConfig& a, const VitFlags& f, std::uint64_t rank,
                          std::uint64_t adapter_hidden) {
  const std::uint64_t d = a.width;
  auto lora_delta = [&](Act h) {
    Act t = w.linear(h, true, false, rank, false);
    return w.linear(t, true, false, d, false);
  };
  auto adapter = [&](Act y) {
    return RetentionWalker::add(y, w.linear(w.gelu(w.linear(y, true, true, adapter_hidden)), true, true, d));
  };
  Act h = w.layernorm(x, f.weights, f.biases);
  Act q = w.linear(h, f.weights, f.biases, d);
  if (f.lora) q = RetentionWalker::add(q, lora_delta(h));
  Act k = w.linear(h, f.weights, f.biases, d);
  Act v = w.linear(h, f.weights, f.biases, d);
  if (f.lora) v = RetentionWalker::add(v, lora_delta(h));
  Act o = w.linear(w.attention(q, k, v, a.heads), f.weights, f.biases, d);
  if (f.adapter) o = adapter(o);
  Act e = RetentionWalker::add(x, o);
  Act m = w.gelu(w.linear(w.layernorm(e, f.weights, f.biases), f.weights, f.biases, a.mlp_hidden()));
  Act y = w.linear(m, f.weights, f.biases, d);
  if (f.adapter) y = adapter(y);
  return RetentionWalker::add(e, y);
}

inline Act walk_qsm(RetentionWalker& w, Act h_prev, std::uint64_t d, const SynqtConfig& c, bool trainable) {
  const bool t = trainable;
  Act u = RetentionWalker::add(h_prev, {c.n, d, t});
  Act z1 = w.linear(w.linear(u, t, t, c.hidden), t, t, d);
  Act n1 = w.layernorm(z1, t, t);
  auto branch = [&](Act x) { return w.linear(w.gelu(w.linear(x, t, t, c.qkv_hidden)), t, t, d); };
  Act q = branch(n1);
  Act k = branch(n1);
  Act v = branch(n1);
  Act z2 = RetentionWalker::add(w.attention(q, k, v, 1), z1);
  Act f = w.linear(w.gelu(w.linear(w.layernorm(z2, t, t), t, t, c.hidden)), t, t, d);
  return RetentionWalker::add(f, z2);
}

struct KemActs {
  Act H, F_att, F_ffn;
};

inline KemActs walk_kem(RetentionWalker& w, Act query, const BackboneConfig& a) {
  const std::uint64_t d = a.width, m = a.num_tokens();
  Act q = w.linear(w.layernorm(query, false, false), false, false, d);
  Act kv{m, d, false};
  Act f_att = w.linear(w.attention(q, kv, kv, a.heads), false, false, d);
  Act e = RetentionWalker::add(f_att, query);
  Act f_ffn =
      w.linear(w.gelu(w.linear(w.layernorm(e, false, false), false, false, a.mlp_hidden())), false, false, d);
  return {RetentionWalker::add(f_ffn, e), f_att, f_ffn};
}

inline void walk_head(RetentionWalker& w, const std::vector<Act>& feats, std::uint64_t d, const HeadConfig& cfg,
                      const std::vector<bool>& keep) {
  const auto& v = cfg.variant;
  const std::size_t count = feats.size();
  std::vector<Act> pooled;
  for (const auto& f : feats) pooled.push_back(RetentionWalker::mean_rows(f));
  auto project = [&](std::size_t j) {
    if (v.projection == Projection::none) return pooled[j];
    return w.linear(w.linear(pooled[j], true, true, cfg.hidden), true, true, d);
  };
  Act gates{1, cfg.num_gated(), false};
  if (v.aggregation == Aggregation::conditional) gates = w.sigmoid(w.linear(pooled.back(), true, true, cfg.num_gated()));
  if (v.aggregation == Aggregation::fixed) gates = w.sigmoid({1, cfg.num_gated(), true});
  Act agg = project(count - 1);
  for (std::size_t j = 0; j + 1 < count; ++j) {
    if (!feature_included(v, j, count)) continue;
    if (v.dropfeat && !keep[j]) continue;
    Act p = project(j);
    Act contrib = v.aggregation == Aggregation::simple_average ? p : w.scale_by(p, {1, 1, gates.rg});
    agg = RetentionWalker::add(agg, contrib);
  }
  Act z = w.gelu(w.linear(w.layernorm(agg, true, true), true, true, cfg.hidden));
  w.cross_entropy(w.linear(z, true, true, cfg.num_classes));
}

}  // namespace detail

// Per-sample activation items, scaled by batch size. For synqt every head
// feature is counted as kept (DropFeat disabled or an all-keep mask).
inline Ledger activation_ledger(const Scheme& s, std::uint64_t batch_size = 1, const StackOptions& stack = {}) {
  s.validate();
  using detail::Act;
  Ledger g;
  g.scheme = s.label();
  const auto& a = s.arch;
  const std::uint64_t d = a.width, l = a.depth;
  auto item = [&](const std::string& name, const std::string& cat, detail::RetentionWalker& w) {
    g.add(name, cat, Counter::activations, batch_size * w.retained);
    w.retained = 0;
  };
  detail::RetentionWalker w;

  if (s.kind == SchemeKind::synqt) {
    g.add("backbone (no-grad feature pass)", "backbone", Counter::activations, 0);
    const bool qsm_trainable = stack.query == QueryMode::synthesized;
    Act h_prev{s.synqt.n, d, false};
    std::vector<Act> feats;
    for (std::uint64_t i = 1; i <= l; ++i) {
      Act input = stack.use_last_output ? h_prev : Act{s.synqt.n, d, false};
      Act query = qsm_trainable ? detail::walk_qsm(w, input, d, s.synqt, true) : Act{s.synqt.n, d, false};
      item("qsm." + std::to_string(i), "qsm", w);
      auto k = detail::walk_kem(w, query, a);
      item("kem." + std::to_string(i), "kem", w);
      feats.push_back(k.F_att);
      feats.push_back(k.F_ffn);
      feats.push_back(k.H);
      h_prev = query;
    }
    const HeadConfig hc = s.head_config();
    detail::walk_head(w, feats, d, hc, std::vector<bool>(hc.num_features(), true));
    item("head+loss", "head", w);
    return g;
  }

  detail::VitFlags base;
  base.weights = s.kind == SchemeKind::full_finetune;
  base.biases = s.kind == SchemeKind::full_finetune || s.kind == SchemeKind::bitfit;
  const std::uint64_t m = a.num_tokens();
  Act patches{a.num_patches(), a.patch_dim(), false};
  Act x = w.linear(patches, base.weights, base.biases, d);
  x = Act{m, d, x.rg || base.weights};  // [cls; patches] + pos
  item("embed", "backbone", w);
  for (std::uint64_t i = 1; i <= l; ++i) {
    detail::VitFlags f = base;
    f.lora = s.kind == SchemeKind::lora && (s.lora_layer == 0 || s.lora_layer == i);
    f.adapter = s.kind == SchemeKind::adapter;
    if (s.kind == SchemeKind::vpt_deep) x = Act{m + s.tokens, d, true};
    x = detail::walk_vit_block(w, x, a, f, s.rank, s.adapter_hidden);
    item("block." + std::to_string(i), "backbone", w);
  }
  Act cls = w.layernorm({1, d, x.rg}, base.weights, base.biases);
  w.cross_entropy(w.linear(cls, true, true, s.num_classes));
  item("norm+classifier+loss", "head", w);
  return g;
}

// Stored activations when LoRA tunes only layer k, for k = 1..l.
inline std::vector<std::pair<std::size_t, std::uint64_t>> entanglement_sweep(const BackboneConfig& arch,
                                                                            std::size_t rank,
                                                                            std::size_t num_classes = 8) {
  std::vector<std::pair<std::size_t, std::uint64_t>> out;
  for (std::size_t k = 1; k <= arch.depth; ++k) {
    Scheme s;
    s.kind = SchemeKind::lora;
    s.arch = arch;
    s.rank = rank;
    s.lora_layer = k;
    s.num_classes = num_classes;
    out.emplace_back(k, activation_ledger(s).stored_activation_scalars());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference FLOPs for one image

namespace detail {

constexpr std::uint64_t kLayerNormFlops = 5;
constexpr std::uint64_t kSoftmaxFlops = 5;
constexpr std::uint64_t kGeluFlops = 8;
constexpr std::uint64_t kSigmoidFlops = 4;

class FlopWalker {
 public:
  std::uint64_t macs = 0, elementwise = 0;

  void linear(std::uint64_t rows, std::uint64_t in, std::uint64_t out, bool bias = true) {
    macs += rows * in * out;
    if (bias) elementwise += rows * out;
  }
  void layernorm(std::uint64_t n) { elementwise += kLayerNormFlops * n; }
  void gelu(std::uint64_t n) { elementwise += kGeluFlops * n; }
  void sigmoid(std::uint64_t n) { elementwise += kSigmoidFlops * n; }
  void pointwise(std::uint64_t n) { elementwise += n; }

  // Queries [nq x d] against keys/values [nk x d], projections excluded.
  void attention_core(std::uint64_t nq, std::uint64_t nk, std::uint64_t d, std::uint64_t heads) {
    macs += 2 * nq * nk * d;
    elementwise += heads * nq * nk * (1 + kSoftmaxFlops);
  }
  void bottleneck(std::uint64_t rows, std::uint64_t d, std::uint64_t hidden, bool with_gelu, bool up_bias = true) {
    linear(rows, d, hidden);
    if (with_gelu) gelu(rows * hidden);
    linear(rows, hidden, d, up_bias);
  }
};

inline void flop_vit_block(FlopWalker& f, const BackboneConfig& a, std::uint64_t m, const Scheme& s,
                           bool lora_here) {
  const std::uint64_t d = a.width, h = a.mlp_hidden();
  f.layernorm(m * d);
  f.linear(m, d, 3 * d);
  if (lora_here) {
    f.linear(m, d, s.rank, false);
    f.linear(m, s.rank, d, false);
    f.linear(m, d, s.rank, false);
    f.linear(m, s.rank, d, false);
    f.pointwise(2 * 2 * m * d);
  }
  f.attention_core(m, m, d, a.heads);
  f.linear(m, d, d);
  if (s.kind == SchemeKind::adapter) {
    f.bottleneck(m, d, s.adapter_hidden, true);
    f.pointwise(m * d);
  }
  f.pointwise(m * d);
  f.layernorm(m * d);
  f.linear(m, d, h);
  f.gelu(m * h);
  f.linear(m, h, d);
  if (s.kind == SchemeKind::adapter) {
    f.bottleneck(m, d, s.adapter_hidden, true);
    f.pointwise(m * d);
  }
  f.pointwise(m * d);
}

}  // namespace detail

inline Ledger flop_count(const Scheme& s) {
  s.validate();
  Ledger g;
  g.scheme = s.label();
  const auto& a = s.arch;
  const std::uint64_t d = a.width, l = a.depth, m = a.num_tokens();
  detail::FlopWalker f;
  auto item = [&](const std::string& name, const std::string& cat) {
    g.add(name, cat, Counter::macs, f.macs);
    g.add(name, cat, Counter::flops, 2 * f.macs + f.elementwise);
    f = {};
  };

  f.linear(a.num_patches(), a.patch_dim(), d);
  f.pointwise(m * d);
  item("patch_embed", "backbone");
  const std::uint64_t tokens = s.kind == SchemeKind::vpt_deep ? m + s.tokens : m;
  for (std::uint64_t i = 1; i <= l; ++i) {
    const bool lora_here = s.kind == SchemeKind::lora && (s.lora_layer == 0 || s.lora_layer == i);
    detail::flop_vit_block(f, a, tokens, s, lora_here);
    item("block." + std::to_string(i), "backbone");
  }

  if (s.kind != SchemeKind::synqt) {
    f.layernorm(d);
    f.linear(1, d, s.num_classes);
    item("norm+classifier", "head");
    return g;
  }

  // Knowledge extraction reuses the key/value projections already computed
  // by each backbone block during the feature pass.
  const auto& c = s.synqt;
  const std::uint64_t n = c.n;
  for (std::uint64_t i = 1; i <= l; ++i) {
    f.pointwise(n * d);
    f.bottleneck(n, d, c.hidden, false);
    f.layernorm(n * d);
    for (int b = 0; b < 3; ++b) f.bottleneck(n, d, c.qkv_hidden, true, /*up_bias=*/b != 1);
    f.attention_core(n, n, d, 1);
    f.pointwise(2 * n * d);
    f.layernorm(n * d);
    f.bottleneck(n, d, c.hidden, true);
    f.pointwise(2 * n * d);
    item("qsm." + std::to_string(i), "qsm");

    f.layernorm(n * d);
    f.linear(n, d, d);
    f.attention_core(n, m, d, a.heads);
    f.linear(n, d, d);
    f.pointwise(n * d);
    f.layernorm(n * d);
    f.linear(n, d, a.mlp_hidden());
    f.gelu(n * a.mlp_hidden());
    f.linear(n, a.mlp_hidden(), d);
    f.pointwise(n * d);
    item("kem." + std::to_string(i), "kem");
  }
  const HeadConfig hc = s.head_config();
  const std::uint64_t feats = hc.num_features();
  f.pointwise(feats * n * d);
  if (hc.variant.projection != Projection::none) f.bottleneck(feats, d, hc.hidden, false);
  if (hc.variant.aggregation == Aggregation::conditional) {
    f.linear(1, d, hc.num_gated());
    f.sigmoid(hc.num_gated());
  }
  f.pointwise(2 * feats * d);
  f.layernorm(d);
  f.linear(1, d, hc.hidden);
  f.gelu(hc.hidden);
  f.linear(1, hc.hidden, s.num_classes);
  item("head", "head");
  return g;
}

}  // namespace synqt
