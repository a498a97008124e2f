#pragma once

#include <string>
#include <vector>

#include "synqt/scheme.hpp"

namespace synqt {

// QSM stack + classification head over a frozen backbone.
struct SynqtModel {
  SynqtConfig cfg;
  HeadConfig head_cfg;
  StackOptions stack;
  std::vector<QsmParams> qsm;
  HeadParams head;

  static SynqtModel init(const BackboneConfig& arch, const SynqtConfig& cfg, const HeadConfig& head_cfg,
                         const StackOptions& stack, Rng& rng) {
    cfg.validate(arch.width);
    SynqtModel m{cfg, head_cfg, stack, {}, {}};
    const bool qsm_trainable = stack.query == QueryMode::synthesized;
    for (std::size_t i = 0; i < arch.depth; ++i)
      m.qsm.push_back(QsmParams::init(rng, i + 1, arch.width, cfg, qsm_trainable));
    m.head = HeadParams::init(rng, arch.width, head_cfg, true);
    return m;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& q : qsm)
      for (auto& t : q.tensors()) out.push_back(t);
    for (auto& t : head.tensors()) out.push_back(t);
    return out;
  }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (auto& t : parameters())
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  FeatureBundle features(const FrozenBackbone& backbone, const FeatureStack& x) const {
    return stack_forward(backbone, qsm, x, cfg, stack);
  }

  Tensor logits(const FrozenBackbone& backbone, const FeatureStack& x, const DropMask& mask) const {
    return head_forward(head, head_cfg, features(backbone, x), mask);
  }
};

// Frozen-backbone tuning baselines, instantiable at toy scale so their
// activation accounting can be checked against the tape. All use a linear
// classifier on the final-normed first token.
struct TunedVit {
  Scheme scheme;
  VitWeights vit;
  std::vector<Tensor> prompts;  // vpt_deep: one [tokens x d] per block
  std::vector<LoraPair> lora_q, lora_v;
  std::vector<Bottleneck> adapter_attn, adapter_ffn;
  Linear classifier;

  static TunedVit from_backbone(const FrozenBackbone& backbone, const Scheme& s, Rng& rng) {
    s.validate();
    if (s.kind == SchemeKind::synqt) throw ConfigError("TunedVit does not implement the synqt scheme");
    if (!(backbone.config() == s.arch)) throw ConfigError("scheme architecture differs from the backbone");
    TunedVit t;
    t.scheme = s;
    auto is_bias = [](const std::string& n) {
      return n.ends_with(".bias") || n.ends_with(".beta");
    };
    t.vit = backbone.weights().copy([&](const std::string& n) {
      if (s.kind == SchemeKind::full_finetune) return true;
      if (s.kind == SchemeKind::bitfit) return is_bias(n);
      return false;
    });
    const std::size_t d = s.arch.width, l = s.arch.depth;
    for (std::size_t i = 0; i < l; ++i) {
      const std::string p = "block." + std::to_string(i + 1);
      if (s.kind == SchemeKind::vpt_deep)
        t.prompts.push_back(trunc_normal_param(rng, p + ".prompt", {s.tokens, d}, 0.02, true));
      if (s.kind == SchemeKind::lora && (s.lora_layer == 0 || s.lora_layer == i + 1)) {
        auto pair = [&](const std::string& name) {
          return LoraPair{trunc_normal_param(rng, name + ".a", {d, s.rank}, 0.02, true),
                          constant_param(name + ".b", {s.rank, d}, 0.0, true), 1.0};
        };
        t.lora_q.push_back(pair(p + ".lora_q"));
        t.lora_v.push_back(pair(p + ".lora_v"));
      } else if (s.kind == SchemeKind::lora) {
        t.lora_q.emplace_back();
        t.lora_v.emplace_back();
      }
      if (s.kind == SchemeKind::adapter) {
        t.adapter_attn.push_back(Bottleneck::make(rng, p + ".adapter_attn", d, s.adapter_hidden, 0.02, true));
        t.adapter_ffn.push_back(Bottleneck::make(rng, p + ".adapter_ffn", d, s.adapter_hidden, 0.02, true));
      }
    }
    t.classifier = Linear::make(rng, "classifier", d, s.num_classes, 0.02, true);
    return t;
  }

  Tensor logits(const Tensor& image) const {
    const std::size_t m = scheme.arch.num_tokens();
    Tensor x = embed(vit, image);
    for (std::size_t i = 0; i < vit.blocks.size(); ++i) {
      if (!prompts.empty()) x = concat({i == 0 ? x : slice_rows(x, 0, m), prompts[i]}, 0);
      BlockHooks hooks;
      if (!lora_q.empty() && lora_q[i].a.defined()) {
        hooks.lora_q = &lora_q[i];
        hooks.lora_v = &lora_v[i];
      }
      if (!adapter_attn.empty()) {
        hooks.adapter_attn = &adapter_attn[i];
        hooks.adapter_ffn = &adapter_ffn[i];
      }
      x = block_forward(vit.blocks[i], x, scheme.arch.heads, hooks);
    }
    return classifier(vit.norm(slice_rows(x, 0, 1)));
  }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (auto& t : vit.tensors())
      if (t.requires_grad()) out.push_back(t);
    for (const auto& p : prompts) out.push_back(p);
    for (const auto& l : lora_q)
      if (l.a.defined()) l.collect(out);
    for (const auto& l : lora_v)
      if (l.a.defined()) l.collect(out);
    for (const auto& a : adapter_attn) a.collect(out);
    for (const auto& a : adapter_ffn) a.collect(out);
    classifier.collect(out);
    return out;
  }
};

}  // namespace synqt
