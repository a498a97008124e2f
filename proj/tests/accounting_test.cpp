#include <gtest/gtest.h>

#include "helpers.hpp"
#include "synqt/accounting.hpp"

namespace synqt {
namespace {

using testing_util::random_image;

Scheme make_scheme(SchemeKind kind, BackboneConfig arch = BackboneConfig::toy()) {
  Scheme s;
  s.kind = kind;
  s.arch = arch;
  s.synqt = {4, 16, 4, 1.0, 1.0, 0.1};
  return s;
}

Scheme vitb_synqt(std::size_t hidden = 48) {
  Scheme s = make_scheme(SchemeKind::synqt, BackboneConfig::vit_b16());
  s.num_classes = 100;
  s.synqt = {4, hidden, 8, 1.0, 1.0, 0.1};
  return s;
}

// Saved scalars recorded by one training forward of the instantiated scheme.
std::uint64_t tape_count(const Scheme& s, const StackOptions& stack = {}) {
  Rng rng(21);
  auto backbone = FrozenBackbone::build(s.arch, rng);
  Tensor img = random_image(rng, s.arch);
  Tape tape;
  TapeScope scope(tape);
  if (s.kind == SchemeKind::synqt) {
    auto model = SynqtModel::init(s.arch, s.synqt, s.head_config(), stack, rng);
    auto fs = backbone.forward_collect(img);
    cross_entropy(model.logits(backbone, fs, DropMask::all(s.arch.depth)), 1);
  } else {
    auto tuned = TunedVit::from_backbone(backbone, s, rng);
    cross_entropy(tuned.logits(img), 1);
  }
  return tape.saved_scalar_count();
}

std::uint64_t instantiated_params(const Scheme& s) {
  Rng rng(22);
  auto backbone = FrozenBackbone::build(s.arch, rng);
  std::vector<Tensor> ts;
  if (s.kind == SchemeKind::synqt)
    ts = SynqtModel::init(s.arch, s.synqt, s.head_config(), {}, rng).trainable();
  else
    ts = TunedVit::from_backbone(backbone, s, rng).trainable();
  std::uint64_t n = 0;
  for (const auto& t : ts) n += t.numel();
  return n;
}

std::vector<Scheme> toy_schemes() {
  std::vector<Scheme> out;
  for (auto k : {SchemeKind::full_finetune, SchemeKind::linear_probe, SchemeKind::bitfit, SchemeKind::vpt_deep,
                 SchemeKind::lora, SchemeKind::adapter, SchemeKind::synqt})
    out.push_back(make_scheme(k));
  for (std::size_t k = 1; k <= 4; ++k) {
    Scheme s = make_scheme(SchemeKind::lora);
    s.lora_layer = k;
    out.push_back(s);
  }
  Scheme vpt1 = make_scheme(SchemeKind::vpt_deep);
  vpt1.tokens = 1;
  out.push_back(vpt1);
  for (auto agg : {Aggregation::fixed, Aggregation::simple_average}) {
    Scheme s = make_scheme(SchemeKind::synqt);
    s.head.aggregation = agg;
    out.push_back(s);
  }
  for (auto proj : {Projection::none, Projection::independent}) {
    Scheme s = make_scheme(SchemeKind::synqt);
    s.head.projection = proj;
    out.push_back(s);
  }
  Scheme no_h = make_scheme(SchemeKind::synqt);
  no_h.head.use_h = false;
  no_h.head.use_att = false;
  out.push_back(no_h);
  return out;
}

TEST(ActivationLedger, MatchesTapeOnEveryToyScheme) {
  for (const auto& s : toy_schemes()) {
    EXPECT_EQ(activation_ledger(s).stored_activation_scalars(), tape_count(s)) << s.label();
  }
}

TEST(ActivationLedger, MatchesTapeForQueryVariants) {
  Scheme s = make_scheme(SchemeKind::synqt);
  for (StackOptions o : {StackOptions{false, QueryMode::synthesized}, StackOptions{true, QueryMode::random_prompt}})
    EXPECT_EQ(activation_ledger(s, 1, o).stored_activation_scalars(), tape_count(s, o));
}

TEST(ActivationLedger, MatchesTapeOnOtherGeometries) {
  BackboneConfig a = BackboneConfig::toy();
  a.depth = 3;
  a.width = 24;
  a.heads = 3;
  a.mlp_ratio = 2.0;
  a.num_register_tokens = 2;
  for (auto k : {SchemeKind::full_finetune, SchemeKind::lora, SchemeKind::vpt_deep, SchemeKind::synqt}) {
    Scheme s = make_scheme(k, a);
    s.synqt = {2, 8, 3, 1.0, 1.0, 0.1};
    EXPECT_EQ(activation_ledger(s).stored_activation_scalars(), tape_count(s)) << s.label();
  }
}

TEST(ActivationLedger, SchemeOrderingAtVitB16) {
  Scheme vpt = make_scheme(SchemeKind::vpt_deep, BackboneConfig::vit_b16());
  vpt.tokens = 10;
  const auto synqt = activation_ledger(vitb_synqt()).stored_activation_scalars();
  const auto prompt = activation_ledger(vpt).stored_activation_scalars();
  const auto full = activation_ledger(make_scheme(SchemeKind::full_finetune, BackboneConfig::vit_b16()))
                        .stored_activation_scalars();
  EXPECT_LT(synqt, prompt);
  EXPECT_LT(prompt, full);
}

TEST(ActivationLedger, LinearProbeStoresNothingInTheBackbone) {
  for (auto arch : {BackboneConfig::toy(), BackboneConfig::vit_b16()}) {
    auto g = activation_ledger(make_scheme(SchemeKind::linear_probe, arch));
    EXPECT_EQ(g.total(Counter::activations, "backbone"), 0u);
    EXPECT_GT(g.total(Counter::activations, "head"), 0u);
  }
}

TEST(ActivationLedger, SynqtNeverStoresBackboneActivations) {
  Scheme s4 = make_scheme(SchemeKind::synqt);
  Scheme s8 = s4;
  s8.arch.depth = 8;
  auto g4 = activation_ledger(s4), g8 = activation_ledger(s8);
  EXPECT_EQ(g4.total(Counter::activations, "backbone"), 0u);
  EXPECT_EQ(g8.total(Counter::activations, "backbone"), 0u);
  EXPECT_EQ(g8.total(Counter::activations, "qsm"), 2 * g4.total(Counter::activations, "qsm"));
  EXPECT_EQ(g8.total(Counter::activations, "kem"), 2 * g4.total(Counter::activations, "kem"));
}

TEST(ActivationLedger, ScalesWithBatch) {
  Scheme s = make_scheme(SchemeKind::full_finetune);
  EXPECT_EQ(activation_ledger(s, 64).stored_activation_scalars(), 64 * activation_ledger(s).stored_activation_scalars());
  EXPECT_EQ(activation_ledger(s).activation_bytes(), 4 * activation_ledger(s).stored_activation_scalars());
}

TEST(EntanglementSweep, StrictlyDecreasing) {
  for (std::size_t depth : {4u, 12u}) {
    BackboneConfig a = depth == 4 ? BackboneConfig::toy() : BackboneConfig::vit_b16();
    auto sweep = entanglement_sweep(a, 8);
    ASSERT_EQ(sweep.size(), depth);
    for (std::size_t i = 1; i < sweep.size(); ++i) EXPECT_LT(sweep[i].second, sweep[i - 1].second);
    for (const auto& [k, v] : sweep) {
      EXPECT_LE(sweep.back().second, v);
      EXPECT_GE(sweep.front().second, v);
    }
  }
}

TEST(EntanglementSweep, PointsMatchTape) {
  auto sweep = entanglement_sweep(BackboneConfig::toy(), 8);
  for (const auto& [k, v] : sweep) {
    Scheme s = make_scheme(SchemeKind::lora);
    s.rank = 8;
    s.lora_layer = k;
    EXPECT_EQ(v, tape_count(s)) << "k = " << k;
  }
}

TEST(ParamCount, SynqtVitB16NearReportedTotal) {
  const double total = static_cast<double>(count_params(vitb_synqt()).trainable_params());
  EXPECT_NEAR(total, 2.73e6, 0.15 * 2.73e6);
}

TEST(ParamCount, LinearProbeHasNoBackboneSideParameters) {
  auto g = count_params(make_scheme(SchemeKind::linear_probe, BackboneConfig::vit_b16()));
  EXPECT_EQ(g.total(Counter::params, "backbone-side"), 0u);
}

TEST(ParamCount, AffineAndIncreasingInHidden) {
  const std::vector<std::int64_t> hs{16, 32, 48, 64, 96};
  std::vector<std::int64_t> c;
  for (auto h : hs) c.push_back(static_cast<std::int64_t>(count_params(vitb_synqt(h)).trainable_params()));
  for (std::size_t i = 1; i < c.size(); ++i) EXPECT_GT(c[i], c[i - 1]);
  // Collinearity with exact integer arithmetic.
  for (std::size_t i = 2; i < c.size(); ++i) EXPECT_EQ((c[i] - c[0]) * (hs[1] - hs[0]), (c[1] - c[0]) * (hs[i] - hs[0]));
}

TEST(ParamCount, MatchesInstantiatedModels) {
  for (const auto& s : toy_schemes()) EXPECT_EQ(count_params(s).trainable_params(), instantiated_params(s)) << s.label();
}

TEST(ParamCount, VitB16BackboneSize) {
  // 86.6M is the usual figure for ViT-B/16 with a 1000-way head removed.
  const double n = static_cast<double>(vit_params(BackboneConfig::vit_b16()));
  EXPECT_NEAR(n, 85.8e6, 0.2e6);
}

TEST(FlopCount, VitB16MatchesIndependentFormula) {
  const std::uint64_t m = 197, d = 768, h = 3072;
  const std::uint64_t block = m * d * 3 * d + 2 * m * m * d + m * d * d + 2 * m * d * h;
  const std::uint64_t expect = 196 * 768 * d + 12 * block + d * 8;
  EXPECT_EQ(flop_count(make_scheme(SchemeKind::linear_probe, BackboneConfig::vit_b16())).macs(), expect);
}

TEST(FlopCount, ReportedInferenceCosts) {
  const auto plain = flop_count(make_scheme(SchemeKind::linear_probe, BackboneConfig::vit_b16()));
  const auto synqt = flop_count(vitb_synqt());
  EXPECT_NEAR(static_cast<double>(plain.macs()), 16.9e9, 0.1 * 16.9e9);
  EXPECT_NEAR(static_cast<double>(synqt.macs()), 17.2e9, 0.1 * 17.2e9);
  EXPECT_GT(synqt.macs(), plain.macs());
  EXPECT_GT(plain.flops(), 2 * plain.macs());
}

TEST(FlopCount, SingleMatmul) {
  detail::FlopWalker f;
  f.linear(2, 3, 4, false);
  EXPECT_EQ(2 * f.macs + f.elementwise, 48u);
}

TEST(Ledger, TotalsAreSumsOfItems) {
  for (const auto& s : toy_schemes()) {
    Ledger g = count_params(s);
    g.merge(activation_ledger(s));
    g.merge(flop_count(s));
    for (auto c : {Counter::params, Counter::activations, Counter::flops, Counter::macs}) {
      std::uint64_t sum = 0;
      for (const auto& i : g.items)
        if (i.counter == c) sum += i.count;
      EXPECT_EQ(g.total(c), sum);
    }
    auto j = g.to_json();
    EXPECT_EQ(j["trainable_params"].get<std::uint64_t>(), g.trainable_params());
    EXPECT_EQ(j["items"].size(), g.items.size());
  }
}

TEST(Scheme, Validation) {
  Scheme s = make_scheme(SchemeKind::lora);
  s.lora_layer = 5;
  EXPECT_THROW(s.validate(), ConfigError);
  s.lora_layer = 1;
  s.rank = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  Scheme v = make_scheme(SchemeKind::vpt_deep);
  v.tokens = 0;
  EXPECT_THROW(v.validate(), ConfigError);
  EXPECT_EQ(scheme_kind_from_string("vpt"), SchemeKind::vpt_deep);
  EXPECT_THROW(scheme_kind_from_string("prefix"), ConfigError);
}

}  // namespace
}  // namespace synqt
