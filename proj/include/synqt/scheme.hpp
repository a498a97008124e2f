#pragma once

#include <string>

#include <json.hpp>

#include "synqt/head.hpp"

namespace synqt {

enum class SchemeKind { full_finetune, linear_probe, bitfit, vpt_deep, lora, adapter, synqt };

inline std::string to_string(SchemeKind k) {
  switch (k) {
    case SchemeKind::full_finetune: return "full_finetune";
    case SchemeKind::linear_probe: return "linear_probe";
    case SchemeKind::bitfit: return "bitfit";
    case SchemeKind::vpt_deep: return "vpt_deep";
    case SchemeKind::lora: return "lora";
    case SchemeKind::adapter: return "adapter";
    case SchemeKind::synqt: return "synqt";
  }
  return "?";
}

inline SchemeKind scheme_kind_from_string(const std::string& s) {
  for (auto k : {SchemeKind::full_finetune, SchemeKind::linear_probe, SchemeKind::bitfit, SchemeKind::vpt_deep,
                 SchemeKind::lora, SchemeKind::adapter, SchemeKind::synqt})
    if (to_string(k) == s) return k;
  if (s == "full") return SchemeKind::full_finetune;
  if (s == "linear") return SchemeKind::linear_probe;
  if (s == "vpt") return SchemeKind::vpt_deep;
  throw ConfigError("unknown scheme '" + s + "'");
}

// A tuning scheme applied to an architecture.
struct Scheme {
  SchemeKind kind = SchemeKind::synqt;
  BackboneConfig arch;
  std::size_t num_classes = 8;
  std::size_t tokens = 10;         // vpt_deep prompt tokens per layer
  std::size_t rank = 8;            // lora rank
  std::size_t lora_layer = 0;      // 1..l for a single layer, 0 for all layers
  std::size_t adapter_hidden = 8;  // adapter bottleneck width
  SynqtConfig synqt;
  HeadVariant head;

  void validate() const {
    arch.validate();
    if (num_classes < 1) throw ConfigError("num_classes must be at least 1");
    switch (kind) {
      case SchemeKind::vpt_deep:
        if (tokens < 1) throw ConfigError("vpt_deep needs at least one token");
        break;
      case SchemeKind::lora:
        if (rank < 1) throw ConfigError("lora rank must be at least 1");
        if (lora_layer > arch.depth)
          throw ConfigError("lora layer " + std::to_string(lora_layer) + " outside 1.." + std::to_string(arch.depth));
        break;
      case SchemeKind::adapter:
        if (adapter_hidden < 1) throw ConfigError("adapter hidden width must be at least 1");
        break;
      case SchemeKind::synqt: synqt.validate(arch.width); break;
      default: break;
    }
  }

  HeadConfig head_config() const { return {num_classes, synqt.hidden, arch.depth, head}; }

  std::string label() const {
    switch (kind) {
      case SchemeKind::vpt_deep: return "vpt_deep(" + std::to_string(tokens) + ")";
      case SchemeKind::lora:
        return "lora(r=" + std::to_string(rank) + ", " +
               (lora_layer == 0 ? std::string("all") : "k=" + std::to_string(lora_layer)) + ")";
      case SchemeKind::adapter: return "adapter(" + std::to_string(adapter_hidden) + ")";
      case SchemeKind::synqt:
        return "synqt(n=" + std::to_string(synqt.n) + ", hidden=" + std::to_string(synqt.hidden) +
               ", qkv=" + std::to_string(synqt.qkv_hidden) + ")";
      default: return to_string(kind);
    }
  }
};

inline nlohmann::json scheme_json(const Scheme& s) {
  return {{"kind", to_string(s.kind)}, {"label", s.label()}, {"arch", s.arch}, {"num_classes", s.num_classes}};
}

}  // namespace synqt
