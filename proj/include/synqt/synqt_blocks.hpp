#pragma once

// Query synthesis (trainable, per block) and knowledge extraction (frozen,
// reusing the backbone block's weights).
//
// For block i with the previous block's synthesized query Hbar = Hhat_{i-1}
// (zeros for i = 1):
//   Z'   = up(down(Hbar + P_i))
//   N    = LN(Z')
//   Q,K,V= up_x(gelu(down_x(N)))              x in {q, k, v}
//   Z''  = s' * Attn(Q, K, V) + Z'             (single head)
//   Hhat = s'' * up(gelu(down(LN(Z'')))) + Z''
// then, against the frozen features X_i of block i:
//   F_att = W_o(Attn(ln1(Hhat) W_q, ln1(X_i) W_k, ln1(X_i) W_v))
//   E     = F_att + Hhat
//   F_ffn = fc2(gelu(fc1(ln2(E))))
//   H     = F_ffn + E

#include <string>
#include <vector>

#include <json.hpp>

#include "synqt/backbone.hpp"

namespace synqt {

struct SynqtConfig {
  std::size_t n = 4;           // query tokens
  std::size_t hidden = 48;     // bottleneck width of the input, FFN and head projections
  std::size_t qkv_hidden = 8;  // bottleneck width of the QSM q/k/v projections
  double s_prime = 1.0;        // attention branch scale
  double s_double_prime = 1.0; // FFN branch scale
  double dropfeat_p = 0.1;
  double init_std = 0.02;      // truncated-normal std of QSM weights and prompts

  void validate(std::size_t width) const {
    if (n < 1) throw ConfigError("n must be at least 1");
    if (hidden < 1 || hidden >= width)
      throw ConfigError("hidden " + std::to_string(hidden) + " must lie in [1, width)");
    if (qkv_hidden < 1 || qkv_hidden >= width)
      throw ConfigError("qkv_hidden " + std::to_string(qkv_hidden) + " must lie in [1, width)");
    if (!(s_prime > 0.0) || !(s_double_prime > 0.0)) throw ConfigError("scale factors must be positive");
    if (!(dropfeat_p >= 0.0 && dropfeat_p < 1.0)) throw ConfigError("dropfeat_p must lie in [0, 1)");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  }

  bool operator==(const SynqtConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const SynqtConfig& c) {
  j = {{"n", c.n},
       {"hidden", c.hidden},
       {"qkv_hidden", c.qkv_hidden},
       {"s_prime", c.s_prime},
       {"s_double_prime", c.s_double_prime},
       {"dropfeat_p", c.dropfeat_p},
       {"init_std", c.init_std}};
}

inline void from_json(const nlohmann::json& j, SynqtConfig& c) {
  SynqtConfig d;
  c.n = j.value("n", d.n);
  c.hidden = j.value("hidden", d.hidden);
  c.qkv_hidden = j.value("qkv_hidden", d.qkv_hidden);
  c.s_prime = j.value("s_prime", d.s_prime);
  c.s_double_prime = j.value("s_double_prime", d.s_double_prime);
  c.dropfeat_p = j.value("dropfeat_p", d.dropfeat_p);
  c.init_std = j.value("init_std", d.init_std);
}

// Trainable parameters of one query synthesis block.
struct QsmParams {
  Tensor prompt;  // [n x d]
  Bottleneck input;
  LayerNormParams ln_attn;
  Bottleneck q, k, v;
  LayerNormParams ln_ffn;
  Bottleneck ffn;

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out{prompt};
    input.collect(out);
    ln_attn.collect(out);
    q.collect(out);
    k.collect(out);
    v.collect(out);
    ln_ffn.collect(out);
    ffn.collect(out);
    return out;
  }

  static QsmParams init(Rng& rng, std::size_t block, std::size_t d, const SynqtConfig& cfg, bool trainable = true) {
    const std::string p = "qsm." + std::to_string(block);
    QsmParams q;
    q.prompt = trunc_normal_param(rng, p + ".prompt", {cfg.n, d}, cfg.init_std, trainable);
    q.input = Bottleneck::make(rng, p + ".input", d, cfg.hidden, cfg.init_std, trainable);
    q.ln_attn = LayerNormParams::make(p + ".ln_attn", d, trainable);
    q.q = Bottleneck::make(rng, p + ".q", d, cfg.qkv_hidden, cfg.init_std, trainable);
    // A bias added to every key shifts each score row uniformly, which the
    // softmax ignores, so the key up-projection has none.
    q.k = Bottleneck::make(rng, p + ".k", d, cfg.qkv_hidden, cfg.init_std, trainable, /*up_bias=*/false);
    q.v = Bottleneck::make(rng, p + ".v", d, cfg.qkv_hidden, cfg.init_std, trainable);
    q.ln_ffn = LayerNormParams::make(p + ".ln_ffn", d, trainable);
    q.ffn = Bottleneck::make(rng, p + ".ffn", d, cfg.hidden, cfg.init_std, trainable);
    return q;
  }
};

// Closed-form parameter count of one QSM block.
inline std::size_t qsm_param_count(std::size_t d, const SynqtConfig& cfg) {
  auto bottleneck = [d](std::size_t h) { return d * h + h + h * d + d; };
  return cfg.n * d + bottleneck(cfg.hidden) * 2 + bottleneck(cfg.qkv_hidden) * 3 - d + 4 * d;
}

inline Tensor qsm_forward(const QsmParams& p, const Tensor& h_prev, const SynqtConfig& cfg) {
  if (h_prev.shape() != p.prompt.shape())
    throw DimensionError("qsm_forward: previous output " + shape_str(h_prev.shape()) + " vs prompt " +
                         shape_str(p.prompt.shape()));
  Tensor z1 = p.input.linear_path(add(h_prev, p.prompt));
  Tensor n1 = p.ln_attn(z1);
  Tensor attn = multi_head_attention(p.q.gelu_path(n1), p.k.gelu_path(n1), p.v.gelu_path(n1), 1);
  Tensor z2 = add(scale(attn, cfg.s_prime), z1);
  return add(scale(p.ffn.gelu_path(p.ln_ffn(z2)), cfg.s_double_prime), z2);
}

struct KemOutput {
  Tensor H;
  Tensor F_att;
  Tensor F_ffn;
};

// Knowledge extraction with precomputed key/value projections of X_i.
inline KemOutput kem_forward(const KemView& view, const Tensor& query, const KeyValue& kv) {
  const BlockWeights& b = view.block();
  if (query.cols() != b.q.in_features())
    throw DimensionError("kem_forward: query width " + std::to_string(query.cols()) + " vs block width " +
                         std::to_string(b.q.in_features()));
  Tensor f_att = b.o(multi_head_attention(b.q(b.ln1(query)), kv.keys, kv.values, view.heads()));
  Tensor e = add(f_att, query);
  Tensor f_ffn = b.fc2(gelu(b.fc1(b.ln2(e))));
  return {add(f_ffn, e), f_att, f_ffn};
}

inline KemOutput kem_forward(const KemView& view, const Tensor& query, const Tensor& X) {
  if (X.cols() != query.cols())
    throw DimensionError("kem_forward: query " + shape_str(query.shape()) + " and features " + shape_str(X.shape()) +
                         " differ in width");
  KeyValue kv;
  {
    NoGradScope no_grad;
    Tensor h = view.block().ln1(X);
    kv = {view.block().k(h), view.block().v(h)};
  }
  return kem_forward(view, query, kv);
}

// Ordered per layer as (F_att_i, F_ffn_i, H_i), so the conditioning feature
// H_l is the last of the 3l entries.
struct FeatureBundle {
  std::vector<Tensor> H, F_att, F_ffn;
  std::vector<Tensor> queries;  // Hhat_i, kept for inspection

  std::size_t layers() const { return H.size(); }
  std::vector<Tensor> ordered() const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < H.size(); ++i) {
      out.push_back(F_att[i]);
      out.push_back(F_ffn[i]);
      out.push_back(H[i]);
    }
    return out;
  }
};

enum class QueryMode {
  synthesized,    // full QSM
  random_prompt,  // Hhat_i = P_i, bypassing the QSM transform
};

struct StackOptions {
  bool use_last_output = true;  // feed Hhat_{i-1} into QSM i (otherwise zeros)
  QueryMode query = QueryMode::synthesized;
};

inline FeatureBundle stack_forward(const FrozenBackbone& backbone, const std::vector<QsmParams>& qsm,
                                   const FeatureStack& features, const SynqtConfig& cfg,
                                   const StackOptions& opts = {}) {
  const std::size_t l = backbone.config().depth;
  if (qsm.size() != l)
    throw DimensionError("stack_forward: " + std::to_string(qsm.size()) + " QSM blocks for depth " +
                         std::to_string(l));
  if (features.kv.size() != l) throw DimensionError("stack_forward: feature stack depth mismatch");
  FeatureBundle out;
  Tensor h_prev = Tensor::zeros({cfg.n, backbone.config().width});
  for (std::size_t i = 0; i < l; ++i) {
    const Tensor input = opts.use_last_output ? h_prev : Tensor::zeros({cfg.n, backbone.config().width});
    Tensor query = opts.query == QueryMode::synthesized ? qsm_forward(qsm[i], input, cfg) : qsm[i].prompt;
    KemOutput k = kem_forward(backbone.kem_view(i + 1), query, features.kv[i]);
    out.queries.push_back(query);
    out.H.push_back(k.H);
    out.F_att.push_back(k.F_att);
    out.F_ffn.push_back(k.F_ffn);
    h_prev = query;
  }
  return out;
}

inline FeatureBundle stack_forward(const FrozenBackbone& backbone, const std::vector<QsmParams>& qsm,
                                   const Tensor& image, const SynqtConfig& cfg, const StackOptions& opts = {}) {
  return stack_forward(backbone, qsm, backbone.forward_collect(image), cfg, opts);
}

}  // namespace synqt
