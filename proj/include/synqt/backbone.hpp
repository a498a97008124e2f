#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "synqt/checkpoint.hpp"
#include "synqt/layers.hpp"

namespace synqt {

struct BackboneConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t depth = 4;
  std::size_t width = 32;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_register_tokens = 1;
  double init_std = 0.02;  // truncated-normal std of every weight matrix and embedding

  static BackboneConfig toy() { return {}; }
  static BackboneConfig vit_b16() { return {224, 16, 3, 12, 768, 12, 4.0, 1}; }

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t num_tokens() const { return num_patches() + num_register_tokens; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::llround(mlp_ratio * width)); }
  std::size_t head_dim() const { return width / heads; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                        std::to_string(patch_size));
    if (heads == 0 || width % heads != 0)
      throw ConfigError("width " + std::to_string(width) + " is not divisible by heads " + std::to_string(heads));
    if (depth == 0) throw ConfigError("depth must be at least 1");
    if (channels == 0) throw ConfigError("channels must be at least 1");
    if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw ConfigError("mlp_ratio must be positive");
    if (num_register_tokens == 0) throw ConfigError("num_register_tokens must be at least 1");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  }

  bool operator==(const BackboneConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
       {"depth", c.depth},           {"width", c.width},           {"heads", c.heads},
       {"mlp_ratio", c.mlp_ratio},   {"num_register_tokens", c.num_register_tokens}, {"init_std", c.init_std}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  BackboneConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  c.depth = j.value("depth", d.depth);
  c.width = j.value("width", d.width);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.num_register_tokens = j.value("num_register_tokens", d.num_register_tokens);
  c.init_std = j.value("init_std", d.init_std);
}

struct BlockWeights {
  LayerNormParams ln1;
  Linear q, k, v, o;
  LayerNormParams ln2;
  Linear fc1, fc2;

  void collect(std::vector<Tensor>& out) const {
    ln1.collect(out);
    q.collect(out);
    k.collect(out);
    v.collect(out);
    o.collect(out);
    ln2.collect(out);
    fc1.collect(out);
    fc2.collect(out);
  }
};

// Complete ViT parameter set. Trainability is per tensor.
struct VitWeights {
  BackboneConfig config;
  Linear patch_embed;
  Tensor cls;  // [num_register_tokens x d]
  Tensor pos;  // [num_tokens x d]
  std::vector<BlockWeights> blocks;
  LayerNormParams norm;

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    patch_embed.collect(out);
    out.push_back(cls);
    out.push_back(pos);
    for (const auto& b : blocks) b.collect(out);
    norm.collect(out);
    return out;
  }

  static VitWeights init(const BackboneConfig& cfg, Rng& rng, bool trainable) {
    cfg.validate();
    const double sd = cfg.init_std;
    const std::size_t d = cfg.width;
    VitWeights w;
    w.config = cfg;
    w.patch_embed = Linear::make(rng, "patch_embed", cfg.patch_dim(), d, sd, trainable);
    w.cls = trunc_normal_param(rng, "cls_token", {cfg.num_register_tokens, d}, sd, trainable);
    w.pos = trunc_normal_param(rng, "pos_embed", {cfg.num_tokens(), d}, sd, trainable);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      const std::string p = "blocks." + std::to_string(i + 1);
      BlockWeights b;
      b.ln1 = LayerNormParams::make(p + ".ln1", d, trainable);
      b.q = Linear::make(rng, p + ".attn.q", d, d, sd, trainable);
      b.k = Linear::make(rng, p + ".attn.k", d, d, sd, trainable);
      b.v = Linear::make(rng, p + ".attn.v", d, d, sd, trainable);
      b.o = Linear::make(rng, p + ".attn.o", d, d, sd, trainable);
      b.ln2 = LayerNormParams::make(p + ".ln2", d, trainable);
      b.fc1 = Linear::make(rng, p + ".mlp.fc1", d, cfg.mlp_hidden(), sd, trainable);
      b.fc2 = Linear::make(rng, p + ".mlp.fc2", cfg.mlp_hidden(), d, sd, trainable);
      w.blocks.push_back(std::move(b));
    }
    w.norm = LayerNormParams::make("norm", d, trainable);
    return w;
  }

  // Deep copy; `trainable(name)` decides each tensor's flag.
  VitWeights copy(const std::function<bool(const std::string&)>& trainable) const {
    VitWeights w = *this;
    auto fix = [&](Tensor& t) {
      t = t.clone();
      t.set_trainable(trainable(t.name()));
    };
    auto fix_lin = [&](Linear& l) {
      fix(l.weight);
      fix(l.bias);
    };
    auto fix_ln = [&](LayerNormParams& l) {
      fix(l.gamma);
      fix(l.beta);
    };
    fix_lin(w.patch_embed);
    fix(w.cls);
    fix(w.pos);
    for (auto& b : w.blocks) {
      fix_ln(b.ln1);
      fix_lin(b.q);
      fix_lin(b.k);
      fix_lin(b.v);
      fix_lin(b.o);
      fix_ln(b.ln2);
      fix_lin(b.fc1);
      fix_lin(b.fc2);
    }
    fix_ln(w.norm);
    return w;
  }
};

// Low-rank update scale * (x A) B added to a frozen projection.
struct LoraPair {
  Tensor a;  // [d x r]
  Tensor b;  // [r x d]
  double scale = 1.0;

  Tensor delta(const Tensor& x) const { return synqt::scale(matmul(matmul(x, a), b), scale); }
  void collect(std::vector<Tensor>& out) const {
    out.push_back(a);
    out.push_back(b);
  }
};

// Optional trainable insertions into one block (used by tuning baselines).
struct BlockHooks {
  const LoraPair* lora_q = nullptr;
  const LoraPair* lora_v = nullptr;
  const Bottleneck* adapter_attn = nullptr;  // after the attention output projection
  const Bottleneck* adapter_ffn = nullptr;   // after the second FFN projection
};

struct KeyValue {
  Tensor keys;
  Tensor values;
};

// Pre-LN transformer block. When `kv_out` is given it receives the block's
// key and value projections.
inline Tensor block_forward(const BlockWeights& w, const Tensor& x, std::size_t heads, const BlockHooks& hooks = {},
                            KeyValue* kv_out = nullptr) {
  Tensor h = w.ln1(x);
  Tensor q = w.q(h);
  if (hooks.lora_q) q = add(q, hooks.lora_q->delta(h));
  Tensor k = w.k(h);
  Tensor v = w.v(h);
  if (hooks.lora_v) v = add(v, hooks.lora_v->delta(h));
  if (kv_out) *kv_out = {k, v};
  Tensor attn = w.o(multi_head_attention(q, k, v, heads));
  if (hooks.adapter_attn) attn = add(attn, hooks.adapter_attn->gelu_path(attn));
  Tensor e = add(x, attn);
  Tensor f = w.fc2(gelu(w.fc1(w.ln2(e))));
  if (hooks.adapter_ffn) f = add(f, hooks.adapter_ffn->gelu_path(f));
  return add(e, f);
}

// image [C x H x W] -> [num_patches x C*p*p], patches in raster order, each
// flattened channel-major.
inline Tensor patchify(const Tensor& image, const BackboneConfig& cfg) {
  const Shape expect{cfg.channels, cfg.image_size, cfg.image_size};
  if (image.shape() != expect)
    throw DimensionError("image shape " + shape_str(image.shape()) + " does not match config " + shape_str(expect));
  const std::size_t p = cfg.patch_size, g = cfg.grid(), s = cfg.image_size;
  std::vector<double> out(cfg.num_patches() * cfg.patch_dim());
  std::size_t idx = 0;
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) out[idx++] = image[(c * s + gy * p + y) * s + gx * p + x];
  return Tensor::matrix(cfg.num_patches(), cfg.patch_dim(), std::move(out));
}

// Token sequence entering block 1: [cls; patch embeddings] + positions.
inline Tensor embed(const VitWeights& w, const Tensor& image) {
  Tensor patches = w.patch_embed(patchify(image, w.config));
  return add(concat({w.cls, patches}, 0), w.pos);
}

struct FeatureStack {
  std::vector<Tensor> X;  // X[i-1] is the input to block i
  std::vector<KeyValue> kv;  // key/value projections computed by block i
  Tensor X_final;
};

// Read-only handle onto one frozen block, as reused by knowledge extraction.
class KemView {
 public:
  KemView(const BlockWeights& block, std::size_t heads, std::size_t index)
      : block_(&block), heads_(heads), index_(index) {}
  const BlockWeights& block() const { return *block_; }
  std::size_t heads() const { return heads_; }
  std::size_t index() const { return index_; }
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    block_->collect(out);
    return out;
  }

 private:
  const BlockWeights* block_;
  std::size_t heads_;
  std::size_t index_;
};

// Frozen pre-trained ViT. Every tensor has requires_grad == false and values
// never change after construction.
class FrozenBackbone {
 public:
  static FrozenBackbone build(const BackboneConfig& cfg, Rng& rng) {
    return FrozenBackbone(VitWeights::init(cfg, rng, /*trainable=*/false));
  }

  static FrozenBackbone load(const BackboneConfig& cfg, const std::string& prefix) {
    Rng scratch(0);
    VitWeights w = VitWeights::init(cfg, scratch, false);
    auto ts = w.tensors();
    load_checkpoint_into(prefix, ts);
    return FrozenBackbone(std::move(w));
  }

  void save(const std::string& prefix) const { save_checkpoint(prefix, weights_.tensors()); }

  const BackboneConfig& config() const { return weights_.config; }
  const VitWeights& weights() const { return weights_; }
  std::vector<Tensor> tensors() const { return weights_.tensors(); }

  KemView kem_view(std::size_t i) const {
    if (i < 1 || i > weights_.blocks.size())
      throw IndexError("kem_view: block index " + std::to_string(i) + " outside 1.." +
                       std::to_string(weights_.blocks.size()));
    return KemView(weights_.blocks[i - 1], config().heads, i);
  }

  // Gradient-free pass collecting each block's input and its key/value
  // projections.
  FeatureStack forward_collect(const Tensor& image) const {
    NoGradScope no_grad;
    FeatureStack s;
    Tensor x = embed(weights_, image);
    for (const auto& b : weights_.blocks) {
      s.X.push_back(x);
      KeyValue kv;
      x = block_forward(b, x, config().heads, {}, &kv);
      s.kv.push_back(std::move(kv));
    }
    s.X_final = x;
    return s;
  }

  // Recomputes key/value projections for an externally supplied feature list.
  FeatureStack stack_from_features(std::vector<Tensor> X) const {
    if (X.size() != weights_.blocks.size())
      throw DimensionError("feature list has " + std::to_string(X.size()) + " entries for " +
                           std::to_string(weights_.blocks.size()) + " blocks");
    NoGradScope no_grad;
    FeatureStack s;
    for (std::size_t i = 0; i < X.size(); ++i) {
      const auto& b = weights_.blocks[i];
      Tensor h = b.ln1(X[i]);
      s.kv.push_back({b.k(h), b.v(h)});
    }
    s.X_final = block_forward(weights_.blocks.back(), X.back(), config().heads);
    s.X = std::move(X);
    return s;
  }

 private:
  explicit FrozenBackbone(VitWeights w) : weights_(std::move(w)) {}
  VitWeights weights_;
};

}  // namespace synqt
