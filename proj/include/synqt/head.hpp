#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "synqt/synqt_blocks.hpp"

namespace synqt {

enum class Aggregation { conditional, fixed, simple_average };
enum class Projection { shared, none, independent };

// Ablation switches. The defaults are the full head.
struct HeadVariant {
  bool use_h = true;    // H_i for i < l (H_l is always used as the condition)
  bool use_att = true;  // F_att_i
  bool use_ffn = true;  // F_ffn_i
  Aggregation aggregation = Aggregation::conditional;
  Projection projection = Projection::shared;
  bool dropfeat = true;

  bool operator==(const HeadVariant&) const = default;
};

struct HeadConfig {
  std::size_t num_classes = 8;
  std::size_t hidden = 48;
  std::size_t layers = 4;  // backbone depth; the head sees 3 * layers features
  HeadVariant variant;

  std::size_t num_features() const { return 3 * layers; }
  std::size_t num_gated() const { return 3 * layers - 1; }
};

struct HeadParams {
  Bottleneck proj;                  // shared projection
  std::vector<Bottleneck> indep;    // one per feature, Projection::independent only
  Linear generator;                 // d -> 3l - 1
  Tensor fixed_logits;              // [1 x (3l - 1)], Aggregation::fixed only
  LayerNormParams cls_ln;
  Linear cls_fc1;                   // d -> hidden
  Linear cls_fc2;                   // hidden -> classes

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    if (proj.down.weight.defined()) proj.collect(out);
    for (const auto& b : indep) b.collect(out);
    if (generator.weight.defined()) generator.collect(out);
    if (fixed_logits.defined()) out.push_back(fixed_logits);
    cls_ln.collect(out);
    cls_fc1.collect(out);
    cls_fc2.collect(out);
    return out;
  }

  static HeadParams init(Rng& rng, std::size_t d, const HeadConfig& cfg, bool trainable = true) {
    constexpr double kStd = 0.02;
    HeadParams h;
    const auto& v = cfg.variant;
    if (v.projection == Projection::shared) h.proj = Bottleneck::make(rng, "head.proj", d, cfg.hidden, 0.2, trainable);
    if (v.projection == Projection::independent)
      for (std::size_t j = 0; j < cfg.num_features(); ++j)
        h.indep.push_back(Bottleneck::make(rng, "head.proj." + std::to_string(j), d, cfg.hidden, 0.2, trainable));
    if (v.aggregation == Aggregation::conditional)
      h.generator = Linear::make(rng, "head.generator", d, cfg.num_gated(), kStd, trainable);
    if (v.aggregation == Aggregation::fixed)
      h.fixed_logits = constant_param("head.fixed_logits", {1, cfg.num_gated()}, 0.0, trainable);
    h.cls_ln = LayerNormParams::make("head.cls.ln", d, trainable);
    h.cls_fc1 = Linear::make(rng, "head.cls.fc1", d, cfg.hidden, 0.2, trainable);
    h.cls_fc2 = Linear::make(rng, "head.cls.fc2", cfg.hidden, cfg.num_classes, 0.2, trainable);
    return h;
  }
};

// Closed-form parameter count of the head.
inline std::size_t head_param_count(std::size_t d, const HeadConfig& cfg) {
  const std::size_t bn = 2 * d * cfg.hidden + cfg.hidden + d;
  std::size_t n = 0;
  if (cfg.variant.projection == Projection::shared) n += bn;
  if (cfg.variant.projection == Projection::independent) n += bn * cfg.num_features();
  if (cfg.variant.aggregation == Aggregation::conditional) n += d * cfg.num_gated() + cfg.num_gated();
  if (cfg.variant.aggregation == Aggregation::fixed) n += cfg.num_gated();
  n += 2 * d + d * cfg.hidden + cfg.hidden + cfg.hidden * cfg.num_classes + cfg.num_classes;
  return n;
}

// Mean over the n query tokens.
inline Tensor condition_vector(const Tensor& h_last) {
  if (h_last.rows() < 1) throw DimensionError("condition_vector: no tokens");
  return mean_rows(h_last);
}

// One gate in (0, 1) per non-conditioning feature.
inline Tensor conditional_weights(const HeadParams& p, const Tensor& c) {
  if (!p.generator.weight.defined()) throw ContractError("conditional_weights: head has no weight generator");
  if (c.cols() != p.generator.in_features())
    throw DimensionError("conditional_weights: condition width " + std::to_string(c.cols()) + " vs " +
                         std::to_string(p.generator.in_features()));
  return sigmoid(p.generator(c));
}

struct DropMask {
  std::vector<bool> keep;  // 3l entries; the last (H_l) is always true
  double p = 0.0;
  bool train_mode = false;

  double rescale() const { return train_mode && p > 0.0 ? 1.0 / (1.0 - p) : 1.0; }
  static DropMask all(std::size_t layers) { return {std::vector<bool>(3 * layers, true), 0.0, false}; }
};

// Draws one Bernoulli(1 - p) keep flag per non-conditioning feature, in
// feature order.
inline DropMask dropfeat(Rng& rng, double p, std::size_t layers, bool train_mode) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropfeat: p must lie in [0, 1), got " + std::to_string(p));
  DropMask m{std::vector<bool>(3 * layers, true), p, train_mode};
  if (!train_mode || p == 0.0) return m;
  for (std::size_t j = 0; j + 1 < m.keep.size(); ++j) m.keep[j] = !rng.bernoulli(p);
  return m;
}

inline bool feature_included(const HeadVariant& v, std::size_t j, std::size_t count) {
  if (j + 1 == count) return true;
  switch (j % 3) {
    case 0: return v.use_att;
    case 1: return v.use_ffn;
    default: return v.use_h;
  }
}

// Pre-classifier aggregate: sum_j w_j * keep_j * rescale * proj(pool(f_j)) + proj(pool(H_l)).
inline Tensor head_aggregate(const HeadParams& p, const HeadConfig& cfg, const FeatureBundle& bundle,
                             const DropMask& mask) {
  const auto feats = bundle.ordered();
  const std::size_t count = feats.size();
  if (count != cfg.num_features())
    throw DimensionError("head: bundle has " + std::to_string(count) + " features, head expects " +
                         std::to_string(cfg.num_features()));
  if (mask.keep.size() != count) throw DimensionError("head: mask length does not match the feature count");
  const auto& v = cfg.variant;
  std::vector<Tensor> pooled(count);
  for (std::size_t j = 0; j < count; ++j) pooled[j] = mean_rows(feats[j]);
  auto project = [&](std::size_t j) -> Tensor {
    switch (v.projection) {
      case Projection::shared: return p.proj.linear_path(pooled[j]);
      case Projection::independent: return p.indep[j].linear_path(pooled[j]);
      case Projection::none: break;
    }
    return pooled[j];
  };

  std::size_t included = 0;
  for (std::size_t j = 0; j < count; ++j) included += feature_included(v, j, count) ? 1 : 0;
  const double uniform = 1.0 / static_cast<double>(included);

  Tensor gates;
  if (v.aggregation == Aggregation::conditional) gates = conditional_weights(p, pooled.back());
  if (v.aggregation == Aggregation::fixed) gates = sigmoid(p.fixed_logits);

  Tensor agg = project(count - 1);
  if (v.aggregation == Aggregation::simple_average) agg = scale(agg, uniform);
  const double rescale = v.dropfeat ? mask.rescale() : 1.0;
  for (std::size_t j = 0; j + 1 < count; ++j) {
    if (!feature_included(v, j, count)) continue;
    if (v.dropfeat && !mask.keep[j]) continue;
    Tensor contrib = v.aggregation == Aggregation::simple_average ? scale(project(j), uniform)
                                                                   : scale_by(project(j), slice_cols(gates, j, 1));
    if (rescale != 1.0) contrib = scale(contrib, rescale);
    agg = add(agg, contrib);
  }
  return agg;
}

inline Tensor head_classify(const HeadParams& p, const Tensor& agg) {
  return p.cls_fc2(gelu(p.cls_fc1(p.cls_ln(agg))));
}

// Logits [1 x num_classes].
inline Tensor head_forward(const HeadParams& p, const HeadConfig& cfg, const FeatureBundle& bundle,
                           const DropMask& mask) {
  return head_classify(p, head_aggregate(p, cfg, bundle, mask));
}

struct FeatureWeight {
  std::string name;
  std::string group;  // "H", "F_att" or "F_ffn"
  std::size_t layer = 0;
  double value = 0.0;
};

// Per-sample gates grouped H, F_att, F_ffn and ordered by layer; H_l is
// reported with its constant weight 1.
inline std::vector<FeatureWeight> dump_feature_weights(const HeadParams& p, const FeatureBundle& bundle) {
  NoGradScope no_grad;
  const std::size_t l = bundle.layers();
  Tensor gates = conditional_weights(p, condition_vector(bundle.H.back()));
  if (gates.numel() != 3 * l - 1) throw DimensionError("dump_feature_weights: generator width mismatch");
  std::vector<FeatureWeight> out;
  const char* groups[] = {"H", "F_att", "F_ffn"};
  const std::size_t offset[] = {2, 0, 1};
  for (int g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < l; ++i) {
      const std::size_t j = 3 * i + offset[g];
      const double w = j + 1 == 3 * l ? 1.0 : gates[j];
      out.push_back({std::string(groups[g]) + "_" + std::to_string(i + 1), groups[g], i + 1, w});
    }
  return out;
}

inline nlohmann::json feature_weights_json(std::size_t sample_id, const std::vector<FeatureWeight>& ws) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& w : ws) arr.push_back({{"name", w.name}, {"group", w.group}, {"layer", w.layer}, {"value", w.value}});
  return {{"sample_id", sample_id}, {"weights", arr}};
}

}  // namespace synqt
