#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "oracle.hpp"
#include "synqt/gradcheck.hpp"

namespace synqt {
namespace {

using testing_util::fill;
using testing_util::fill_random;
using testing_util::max_abs_diff;
using testing_util::random_image;
using testing_util::random_matrix;

// Deterministic, sign-alternating hand values.
std::vector<double> pattern(std::size_t n, double base, double step) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = (base + step * static_cast<double>(i)) * (i % 2 ? -1.0 : 1.0);
  return v;
}

void set_all(const std::vector<Tensor>& ts, double base) {
  double b = base;
  for (const auto& t : ts) {
    fill(t, pattern(t.numel(), b, 0.13));
    b += 0.07;
  }
}

QsmParams micro_qsm(const SynqtConfig& cfg, std::size_t d) {
  Rng rng(0);
  QsmParams p = QsmParams::init(rng, 1, d, cfg);
  set_all(p.tensors(), 0.31);
  return p;
}

TEST(Qsm, ZeroParametersGiveZeroOutput) {
  SynqtConfig cfg{4, 8, 3, 1.0, 1.0, 0.1};
  Rng rng(1);
  QsmParams p = QsmParams::init(rng, 1, 16, cfg);
  for (auto& t : p.tensors()) {
    auto buf = Tensor(t).mutable_data();
    std::fill(buf.begin(), buf.end(), 0.0);
  }
  Tensor out = qsm_forward(p, Tensor::zeros({4, 16}), cfg);
  EXPECT_EQ(out.shape(), (Shape{4, 16}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Qsm, OutputShape) {
  SynqtConfig cfg{3, 5, 2, 0.1, 1.0, 0.1};
  Rng rng(2);
  QsmParams p = QsmParams::init(rng, 1, 12, cfg);
  EXPECT_EQ(qsm_forward(p, random_matrix(rng, 3, 12), cfg).shape(), (Shape{3, 12}));
  EXPECT_THROW(qsm_forward(p, random_matrix(rng, 2, 12), cfg), DimensionError);
}

// n = 1, d = 2, hidden = 1, qkv_hidden = 1, written out scalar by scalar.
TEST(Qsm, MatchesScalarTranscription) {
  SynqtConfig cfg{1, 1, 1, 0.7, 1.3, 0.1};
  QsmParams p = micro_qsm(cfg, 2);
  const double h[2] = {0.4, -1.1};
  const double eps = 1e-6;
  auto w = [](const Tensor& t, std::size_t i) { return t[i]; };
  auto ln2 = [&](const double x[2], const LayerNormParams& ln, double out[2]) {
    const double mu = (x[0] + x[1]) / 2;
    const double var = ((x[0] - mu) * (x[0] - mu) + (x[1] - mu) * (x[1] - mu)) / 2;
    for (int j = 0; j < 2; ++j) out[j] = (x[j] - mu) / std::sqrt(var + eps) * w(ln.gamma, j) + w(ln.beta, j);
  };
  const double u[2] = {h[0] + w(p.prompt, 0), h[1] + w(p.prompt, 1)};
  const double a = u[0] * w(p.input.down.weight, 0) + u[1] * w(p.input.down.weight, 1) + w(p.input.down.bias, 0);
  const double z1[2] = {a * w(p.input.up.weight, 0) + w(p.input.up.bias, 0),
                        a * w(p.input.up.weight, 1) + w(p.input.up.bias, 1)};
  double n1[2];
  ln2(z1, p.ln_attn, n1);
  // A single token attends only to itself, so the attention output is V.
  const double t = oracle::gelu(n1[0] * w(p.v.down.weight, 0) + n1[1] * w(p.v.down.weight, 1) + w(p.v.down.bias, 0));
  const double v[2] = {t * w(p.v.up.weight, 0) + w(p.v.up.bias, 0), t * w(p.v.up.weight, 1) + w(p.v.up.bias, 1)};
  const double z2[2] = {0.7 * v[0] + z1[0], 0.7 * v[1] + z1[1]};
  double n2[2];
  ln2(z2, p.ln_ffn, n2);
  const double g = oracle::gelu(n2[0] * w(p.ffn.down.weight, 0) + n2[1] * w(p.ffn.down.weight, 1) + w(p.ffn.down.bias, 0));
  const double expect[2] = {1.3 * (g * w(p.ffn.up.weight, 0) + w(p.ffn.up.bias, 0)) + z2[0],
                            1.3 * (g * w(p.ffn.up.weight, 1) + w(p.ffn.up.bias, 1)) + z2[1]};

  Tensor out = qsm_forward(p, Tensor::matrix(1, 2, {h[0], h[1]}), cfg);
  EXPECT_NEAR(out[0], expect[0], 1e-12);
  EXPECT_NEAR(out[1], expect[1], 1e-12);
}

QsmParams random_qsm(Rng& rng, std::size_t d, const SynqtConfig& cfg) {
  QsmParams p = QsmParams::init(rng, 1, d, cfg);
  for (auto& t : p.tensors()) fill_random(t, rng, 0.5);
  return p;
}

oracle::Mat qsm_oracle(const QsmParams& p, const oracle::Mat& h, const SynqtConfig& cfg) {
  using namespace oracle;
  auto bn = [](const Bottleneck& b, const Mat& x, bool act) {
    Mat t = affine(x, b.down.weight, b.down.bias);
    return affine(act ? oracle::gelu(t) : t, b.up.weight, b.up.bias);
  };
  Mat z1 = bn(p.input, plus(h, from(p.prompt)), false);
  Mat n1 = ln(z1, p.ln_attn.gamma, p.ln_attn.beta);
  Mat z2 = plus(times(attention(bn(p.q, n1, true), bn(p.k, n1, true), bn(p.v, n1, true)), cfg.s_prime), z1);
  return plus(times(bn(p.ffn, ln(z2, p.ln_ffn.gamma, p.ln_ffn.beta), true), cfg.s_double_prime), z2);
}

TEST(Qsm, MatchesReferenceOnSeveralTokens) {
  SynqtConfig cfg{3, 4, 2, 0.1, 1.0, 0.1};
  Rng rng(3);
  QsmParams p = random_qsm(rng, 6, cfg);
  Tensor h = random_matrix(rng, 3, 6);
  Tensor out = qsm_forward(p, h, cfg);
  auto ref = qsm_oracle(p, oracle::from(h), cfg);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(out.at(i, j), ref[i][j], 1e-12);
}

TEST(Qsm, ZeroScalesReduceToInputProjection) {
  SynqtConfig cfg{4, 5, 3, 0.0, 0.0, 0.1};
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    QsmParams p = random_qsm(rng, 8, cfg);
    Tensor h = random_matrix(rng, 4, 8);
    Tensor expect = p.input.linear_path(add(h, p.prompt));
    EXPECT_TRUE(qsm_forward(p, h, cfg).bitwise_equal(expect));
  }
}

TEST(Qsm, ParameterCensus) {
  SynqtConfig cfg{4, 16, 4, 1.0, 1.0, 0.1};
  Rng rng(5);
  QsmParams p = QsmParams::init(rng, 1, 32, cfg);
  std::size_t walked = 0;
  for (const auto& t : p.tensors()) {
    walked += t.numel();
    EXPECT_TRUE(t.requires_grad()) << t.name();
  }
  // prompt 4*32; input and FFN bottlenecks 2*(32*16+16+16*32+32);
  // q/k/v bottlenecks 3*(32*4+4+4*32+32) less the key output bias 32;
  // two layer norms 4*32.
  EXPECT_EQ(walked, 3244u);
  EXPECT_EQ(qsm_param_count(32, cfg), 3244u);
}

TEST(SynqtConfig, Validation) {
  SynqtConfig ok{4, 48, 8, 1.0, 0.1, 0.1};
  EXPECT_NO_THROW(ok.validate(768));
  auto bad = [&](auto mutate) {
    SynqtConfig c = ok;
    mutate(c);
    EXPECT_THROW(c.validate(768), ConfigError);
  };
  bad([](SynqtConfig& c) { c.n = 0; });
  bad([](SynqtConfig& c) { c.hidden = 768; });
  bad([](SynqtConfig& c) { c.qkv_hidden = 0; });
  bad([](SynqtConfig& c) { c.s_prime = 0.0; });
  bad([](SynqtConfig& c) { c.dropfeat_p = 1.0; });
  nlohmann::json j = ok;
  EXPECT_EQ(j.get<SynqtConfig>(), ok);
}

// A two-wide block with one head and hand-set weights.
BlockWeights micro_block(std::size_t d, std::size_t hidden) {
  Rng rng(0);
  BlockWeights b;
  b.ln1 = LayerNormParams::make("ln1", d, false);
  b.q = Linear::make(rng, "q", d, d, 0.02, false);
  b.k = Linear::make(rng, "k", d, d, 0.02, false);
  b.v = Linear::make(rng, "v", d, d, 0.02, false);
  b.o = Linear::make(rng, "o", d, d, 0.02, false);
  b.ln2 = LayerNormParams::make("ln2", d, false);
  b.fc1 = Linear::make(rng, "fc1", d, hidden, 0.02, false);
  b.fc2 = Linear::make(rng, "fc2", hidden, d, 0.02, false);
  std::vector<Tensor> ts;
  b.collect(ts);
  set_all(ts, 0.23);
  return b;
}

TEST(Kem, SingleKeyAttendsWithWeightOne) {
  BlockWeights b = micro_block(4, 6);
  KemView view(b, 2, 1);
  Rng rng(6);
  Tensor x = random_matrix(rng, 1, 4);
  Tensor q = random_matrix(rng, 3, 4);
  KemOutput out = kem_forward(view, q, x);
  Tensor expect = b.o(b.v(b.ln1(x)));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.F_att.at(r, j), expect[j], 1e-15);
}

// m = 2 keys, one query, one head, width 2, computed scalar by scalar.
TEST(Kem, MatchesScalarTranscription) {
  BlockWeights b = micro_block(2, 3);
  KemView view(b, 1, 1);
  const double X[2][2] = {{0.9, -0.4}, {-1.5, 0.2}};
  const double Q[2] = {0.3, 1.7};
  const double eps = 1e-6;
  auto ln = [&](const double x[2], const LayerNormParams& p, double out[2]) {
    const double mu = (x[0] + x[1]) / 2;
    const double var = ((x[0] - mu) * (x[0] - mu) + (x[1] - mu) * (x[1] - mu)) / 2;
    for (int j = 0; j < 2; ++j) out[j] = (x[j] - mu) / std::sqrt(var + eps) * p.gamma[j] + p.beta[j];
  };
  auto lin = [](const double* x, std::size_t in, const Linear& l, double* out) {
    for (std::size_t j = 0; j < l.out_features(); ++j) {
      out[j] = l.bias[j];
      for (std::size_t i = 0; i < in; ++i) out[j] += x[i] * l.weight.at(i, j);
    }
  };
  double qn[2], q[2], xn[2][2], k[2][2], v[2][2];
  ln(Q, b.ln1, qn);
  lin(qn, 2, b.q, q);
  for (int t = 0; t < 2; ++t) {
    ln(X[t], b.ln1, xn[t]);
    lin(xn[t], 2, b.k, k[t]);
    lin(xn[t], 2, b.v, v[t]);
  }
  double s[2];
  for (int t = 0; t < 2; ++t) s[t] = (q[0] * k[t][0] + q[1] * k[t][1]) / std::sqrt(2.0);
  const double mx = std::max(s[0], s[1]);
  const double e0 = std::exp(s[0] - mx), e1 = std::exp(s[1] - mx);
  const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
  const double att[2] = {a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]};
  double f_att[2], e[2], en[2], hid[3], f_ffn[2];
  lin(att, 2, b.o, f_att);
  for (int j = 0; j < 2; ++j) e[j] = f_att[j] + Q[j];
  ln(e, b.ln2, en);
  lin(en, 2, b.fc1, hid);
  for (double& x : hid) x = oracle::gelu(x);
  lin(hid, 3, b.fc2, f_ffn);

  KemOutput out = kem_forward(view, Tensor::matrix(1, 2, {Q[0], Q[1]}),
                              Tensor::matrix(2, 2, {X[0][0], X[0][1], X[1][0], X[1][1]}));
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(out.F_att[j], f_att[j], 1e-12);
    EXPECT_NEAR(out.F_ffn[j], f_ffn[j], 1e-12);
    EXPECT_NEAR(out.H[j], f_ffn[j] + e[j], 1e-12);
  }
}

TEST(Kem, MultiHeadMatchesReference) {
  Rng rng(7);
  auto bb = FrozenBackbone::build(BackboneConfig::toy(), rng);
  const auto& b = bb.weights().blocks[1];
  Tensor x = random_matrix(rng, 17, 32);
  Tensor query = random_matrix(rng, 4, 32);
  KemOutput out = kem_forward(bb.kem_view(2), query, x);

  using namespace oracle;
  Mat qn = affine(ln(from(query), b.ln1.gamma, b.ln1.beta), b.q.weight, b.q.bias);
  Mat xn = ln(from(x), b.ln1.gamma, b.ln1.beta);
  Mat kk = affine(xn, b.k.weight, b.k.bias), vv = affine(xn, b.v.weight, b.v.bias);
  Mat att(4, Row(32));
  auto cols = [](const Mat& m, std::size_t c0) {
    Mat r(m.size(), Row(8));
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = 0; j < 8; ++j) r[i][j] = m[i][c0 + j];
    return r;
  };
  for (std::size_t h = 0; h < 4; ++h) {
    Mat a = attention(cols(qn, 8 * h), cols(kk, 8 * h), cols(vv, 8 * h));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 8; ++j) att[i][8 * h + j] = a[i][j];
  }
  Mat f_att = affine(att, b.o.weight, b.o.bias);
  Mat e = plus(f_att, from(query));
  Mat f_ffn = affine(oracle::gelu(affine(oracle::ln(e, b.ln2.gamma, b.ln2.beta), b.fc1.weight, b.fc1.bias)), b.fc2.weight, b.fc2.bias);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 32; ++j) {
      EXPECT_NEAR(out.F_att.at(i, j), f_att[i][j], 1e-12);
      EXPECT_NEAR(out.H.at(i, j), f_ffn[i][j] + e[i][j], 1e-12);
    }
}

TEST(Kem, WidthMismatch) {
  BlockWeights b = micro_block(4, 6);
  KemView view(b, 2, 1);
  EXPECT_THROW(kem_forward(view, Tensor::zeros({1, 4}), Tensor::zeros({3, 5})), DimensionError);
  EXPECT_THROW(kem_forward(view, Tensor::zeros({1, 5}), Tensor::zeros({3, 5})), DimensionError);
}

TEST(Kem, KeyPermutationInvariance) {
  Rng rng(8);
  auto bb = FrozenBackbone::build(BackboneConfig::toy(), rng);
  Tensor x = random_matrix(rng, 17, 32);
  Tensor q = random_matrix(rng, 4, 32);
  std::vector<std::size_t> perm(17);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 16; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  std::vector<double> pv;
  for (std::size_t r : perm)
    for (std::size_t j = 0; j < 32; ++j) pv.push_back(x.at(r, j));
  KemOutput a = kem_forward(bb.kem_view(3), q, x);
  KemOutput b = kem_forward(bb.kem_view(3), q, Tensor::matrix(17, 32, pv));
  EXPECT_LT(max_abs_diff(a.H, b.H), 1e-12);
  EXPECT_LT(max_abs_diff(a.F_att, b.F_att), 1e-12);
  EXPECT_LT(max_abs_diff(a.F_ffn, b.F_ffn), 1e-12);
}

TEST(Kem, GradientsReachOnlyTheQuery) {
  Rng rng(9);
  auto bb = FrozenBackbone::build(BackboneConfig::toy(), rng);
  Tensor q = Tensor::parameter("query", {4, 32}, random_matrix(rng, 4, 32).values(), true);
  Tensor x = random_matrix(rng, 17, 32);
  Tape tape;
  TapeScope scope(tape);
  KemOutput out = kem_forward(bb.kem_view(1), q, x);
  GradMap g = tape.backward(add(add(sum(out.H), sum(out.F_att)), sum(out.F_ffn)));
  EXPECT_TRUE(g.contains(q));
  EXPECT_EQ(g.size(), 1u);
  for (const auto& t : bb.kem_view(1).tensors()) EXPECT_FALSE(g.contains(t)) << t.name();
}

struct ToyModel {
  BackboneConfig arch;
  SynqtConfig cfg;
  HeadConfig head_cfg;
  FrozenBackbone backbone;
  SynqtModel model;
};

ToyModel make_toy(std::size_t depth, std::uint64_t seed, StackOptions stack = {}, double init_std = 0.02) {
  BackboneConfig arch = BackboneConfig::toy();
  arch.depth = depth;
  SynqtConfig cfg{4, 16, 4, 1.0, 1.0, 0.1, init_std};
  HeadConfig hc{8, 16, depth, {}};
  Rng rng(seed);
  auto backbone = FrozenBackbone::build(arch, rng);
  auto model = SynqtModel::init(arch, cfg, hc, stack, rng);
  return {arch, cfg, hc, std::move(backbone), std::move(model)};
}

TEST(Stack, BundleShape) {
  auto t = make_toy(4, 10);
  Rng rng(1);
  auto bundle = t.model.features(t.backbone, t.backbone.forward_collect(random_image(rng, t.arch)));
  auto all = bundle.ordered();
  ASSERT_EQ(all.size(), 12u);
  for (const auto& f : all) EXPECT_EQ(f.shape(), (Shape{4, 32}));
  EXPECT_TRUE(all.back().bitwise_equal(bundle.H.back()));
}

TEST(Stack, LastOutputSwitchIsWired) {
  auto with = make_toy(4, 11);
  auto without = make_toy(4, 11, {false, QueryMode::synthesized});
  Rng rng(2);
  auto fs = with.backbone.forward_collect(random_image(rng, with.arch));
  auto a = with.model.features(with.backbone, fs);
  auto b = without.model.features(without.backbone, fs);
  EXPECT_TRUE(a.H[0].bitwise_equal(b.H[0]));
  for (std::size_t i = 1; i < 4; ++i) EXPECT_FALSE(a.H[i].bitwise_equal(b.H[i])) << i;
}

TEST(Stack, QueriesNeverReadBackboneFeatures) {
  auto t = make_toy(4, 12);
  Rng rng(3);
  auto fs = t.backbone.forward_collect(random_image(rng, t.arch));
  auto base = t.model.features(t.backbone, fs);
  for (std::size_t j = 0; j < 4; ++j) {
    auto X = fs.X;
    std::vector<double> v = X[j].values();
    v[5 * 32 + 7] += 0.25;
    X[j] = Tensor::matrix(17, 32, v);
    auto pert = t.model.features(t.backbone, t.backbone.stack_from_features(X));
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_TRUE(pert.queries[i].bitwise_equal(base.queries[i]));
      const bool same = pert.H[i].bitwise_equal(base.H[i]) && pert.F_att[i].bitwise_equal(base.F_att[i]) &&
                        pert.F_ffn[i].bitwise_equal(base.F_ffn[i]);
      EXPECT_EQ(same, i != j) << "perturbed " << j << ", entry " << i;
    }
  }
}

TEST(Stack, AttachingDoesNotPerturbBackbone) {
  Rng a(13), b(13);
  auto plain = FrozenBackbone::build(BackboneConfig::toy(), a);
  auto t = make_toy(4, 13);
  Rng img_rng(4);
  Tensor img = random_image(img_rng, t.arch);
  auto before = plain.forward_collect(img);
  {
    Tape tape;
    TapeScope scope(tape);
    auto fs = t.backbone.forward_collect(img);
    tape.backward(cross_entropy(t.model.logits(t.backbone, fs, DropMask::all(4)), 3));
  }
  auto after = t.backbone.forward_collect(img);
  EXPECT_TRUE(testing_util::all_bitwise_equal(before.X, after.X));
  EXPECT_TRUE(before.X_final.bitwise_equal(after.X_final));
}

TEST(Stack, GradientCheckTwoBlocks) {
  auto t = make_toy(2, 14, {}, 0.2);
  Rng rng(5);
  auto fs = t.backbone.forward_collect(random_image(rng, t.arch));
  auto mask = dropfeat(rng, 0.3, 2, true);
  auto report = grad_check([&] { return cross_entropy(t.model.logits(t.backbone, fs, mask), 5); },
                           t.model.trainable());
  EXPECT_LT(report.max_rel_error, 1e-4);
  for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-4) << e.name;
}

TEST(Stack, RandomPromptQueriesFreezeQsm) {
  auto t = make_toy(4, 15, {true, QueryMode::random_prompt});
  for (const auto& q : t.model.qsm)
    for (const auto& p : q.tensors()) EXPECT_FALSE(p.requires_grad());
  Rng rng(6);
  auto bundle = t.model.features(t.backbone, t.backbone.forward_collect(random_image(rng, t.arch)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_TRUE(bundle.queries[i].bitwise_equal(t.model.qsm[i].prompt));
}

}  // namespace
}  // namespace synqt
