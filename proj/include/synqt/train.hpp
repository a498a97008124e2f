#pragma once

#include <bit>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "synqt/accounting.hpp"
#include "synqt/config.hpp"
#include "synqt/gradcheck.hpp"
#include "synqt/model.hpp"
#include "synqt/optim.hpp"

namespace synqt {

class RunError : public std::runtime_error {
 public:
  RunError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// One experiment arm: a linear probe or a SynQT variant.
struct ArmSpec {
  std::string name;
  bool linear = false;
  StackOptions stack;
  HeadVariant head;
};

inline std::vector<std::string> known_arms() {
  return {"linear",      "kem_random", "qsm",           "synqt",         "synqt_no_dropfeat",
          "no_h",        "no_att",     "no_ffn",        "fixed_weights", "simple_average",
          "no_projection", "independent_projection", "no_last_output"};
}

// Arms start from the configured stack/head and switch one thing off.
inline ArmSpec arm_spec(const std::string& name, const TrainConfig& cfg) {
  ArmSpec a{name, false, cfg.stack, cfg.head};
  if (name == "linear") a.linear = true;
  else if (name == "kem_random") {
    a.stack.query = QueryMode::random_prompt;
    a.head.aggregation = Aggregation::simple_average;
  } else if (name == "qsm" || name == "simple_average") {
    a.head.aggregation = Aggregation::simple_average;
  } else if (name == "synqt") {
  } else if (name == "synqt_no_dropfeat") a.head.dropfeat = false;
  else if (name == "no_h") a.head.use_h = false;
  else if (name == "no_att") a.head.use_att = false;
  else if (name == "no_ffn") a.head.use_ffn = false;
  else if (name == "fixed_weights") a.head.aggregation = Aggregation::fixed;
  else if (name == "no_projection") a.head.projection = Projection::none;
  else if (name == "independent_projection") a.head.projection = Projection::independent;
  else if (name == "no_last_output") a.stack.use_last_output = false;
  else throw ConfigError("unknown arm '" + name + "'");
  return a;
}

inline Scheme arm_scheme(const ArmSpec& a, const TrainConfig& cfg) {
  Scheme s;
  s.kind = a.linear ? SchemeKind::linear_probe : SchemeKind::synqt;
  s.arch = cfg.backbone;
  s.num_classes = cfg.data.num_classes;
  s.synqt = cfg.synqt;
  s.head = a.head;
  return s;
}

// Dataset, frozen backbone and the backbone features of every sample, shared
// by all arms of one seed.
struct Experiment {
  TrainConfig cfg;
  std::uint64_t seed = 0;
  SyntheticDataset data;
  FrozenBackbone backbone;
  std::vector<FeatureStack> train_features, test_features;
  std::vector<Tensor> train_cls, test_cls;  // final-normed first token

  static Experiment make(const TrainConfig& cfg, std::uint64_t seed) {
    Rng root(seed);
    Rng brng = root.derive("backbone");
    FrozenBackbone bb =
        cfg.checkpoint.empty() ? FrozenBackbone::build(cfg.backbone, brng) : FrozenBackbone::load(cfg.backbone, cfg.checkpoint);
    Experiment e{cfg, seed, SyntheticDataset::make(cfg.data, cfg.backbone, root.derive("data").seed()), std::move(bb),
                 {}, {}, {}, {}};
    auto collect = [&](const std::vector<Sample>& ss, std::vector<FeatureStack>& fs, std::vector<Tensor>& cls) {
      NoGradScope ng;
      for (const auto& s : ss) {
        FeatureStack f = e.backbone.forward_collect(s.image);
        cls.push_back(e.backbone.weights().norm(slice_rows(f.X_final, 0, 1)));
        f.X.clear();
        f.X_final = Tensor();
        fs.push_back(std::move(f));
      }
    };
    collect(e.data.train, e.train_features, e.train_cls);
    collect(e.data.test, e.test_features, e.test_cls);
    return e;
  }
};

// Trainable state of one arm.
struct ArmModel {
  ArmSpec spec;
  SynqtConfig synqt;
  std::size_t layers = 0;
  Linear probe;
  SynqtModel model;

  static ArmModel init(const ArmSpec& spec, const TrainConfig& cfg, Rng& rng) {
    ArmModel m{spec, cfg.synqt, cfg.backbone.depth, {}, {}};
    if (spec.linear)
      m.probe = Linear::make(rng, "classifier", cfg.backbone.width, cfg.data.num_classes, 0.02, true);
    else
      m.model = SynqtModel::init(cfg.backbone, cfg.synqt, {cfg.data.num_classes, cfg.synqt.hidden, cfg.backbone.depth, spec.head},
                                 spec.stack, rng);
    return m;
  }

  std::vector<Tensor> trainable() const {
    if (spec.linear) {
      std::vector<Tensor> out;
      probe.collect(out);
      return out;
    }
    return model.trainable();
  }

  Tensor logits(const Experiment& e, bool train_split, std::size_t i, const DropMask& mask) const {
    if (spec.linear) return probe(train_split ? e.train_cls[i] : e.test_cls[i]);
    return model.logits(e.backbone, train_split ? e.train_features[i] : e.test_features[i], mask);
  }
};

inline std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < t.numel(); ++j)
    if (t[j] > t[best]) best = j;
  return best;
}

inline double accuracy(const ArmModel& m, const Experiment& e, bool train_split) {
  NoGradScope ng;
  const auto& samples = train_split ? e.data.train : e.data.test;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    correct += argmax(m.logits(e, train_split, i, DropMask::all(m.layers))) == samples[i].label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

inline std::uint64_t hash_tensors(const std::vector<Tensor>& ts) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : ts)
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  return h;
}

inline std::string hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

struct ArmResult {
  std::string name;
  double lr = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> loss_curve;  // mean training loss per epoch
  GradCheckReport gradcheck;
  Ledger ledger;
  std::string param_hash;
};

// Trains one arm from its seeded initialization and evaluates it. The trained
// model is moved into `trained` when given.
inline ArmResult run_arm(const Experiment& e, const std::string& name, double lr, const TrainConfig& cfg,
                         ArmModel* trained = nullptr) {
  const ArmSpec spec = arm_spec(name, cfg);
  Rng root(e.seed);
  Rng init_rng = root.derive("init/" + name);
  Rng step_rng = root.derive("steps/" + name);
  ArmModel m = ArmModel::init(spec, cfg, init_rng);
  const auto params = m.trainable();

  const std::size_t n = e.data.train.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  const auto warmup = static_cast<std::size_t>(cfg.warmup_frac * static_cast<double>(total));
  AdamW opt;
  std::vector<AdamWState> states(params.size());
  const double p = cfg.synqt.dropfeat_p;
  const bool drop = !spec.linear && spec.head.dropfeat && p > 0.0;

  ArmResult r;
  r.name = name;
  r.lr = lr;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[step_rng.below(i + 1)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      Tape tape;
      GradMap grads;
      double batch_loss = 0.0;
      {
        TapeScope scope(tape);
        Tensor loss;
        for (std::size_t b = start; b < end; ++b) {
          const std::size_t idx = order[b];
          const DropMask mask = drop ? dropfeat(step_rng, p, m.layers, true) : DropMask::all(m.layers);
          Tensor l = cross_entropy(m.logits(e, true, idx, mask), e.data.train[idx].label);
          loss = loss.defined() ? add(loss, l) : l;
        }
        loss = scale(loss, 1.0 / static_cast<double>(end - start));
        batch_loss = loss.item();
        if (!std::isfinite(batch_loss))
          throw RunError("arm '" + name + "': non-finite loss at step " + std::to_string(step), step);
        grads = tape.backward(loss);
      }
      const double lr_t = cosine_lr(step, total, lr, warmup);
      for (std::size_t k = 0; k < params.size(); ++k)
        if (grads.contains(params[k])) opt.step(params[k], grads.at(params[k]), states[k], lr_t, cfg.weight_decay);
      epoch_loss += batch_loss * static_cast<double>(end - start);
    }
    r.loss_curve.push_back(epoch_loss / static_cast<double>(n));
  }

  r.train_accuracy = accuracy(m, e, true);
  r.test_accuracy = accuracy(m, e, false);
  if (cfg.gradcheck_samples > 0) {
    const std::size_t idx = 0;
    r.gradcheck = grad_check(
        [&] { return cross_entropy(m.logits(e, true, idx, DropMask::all(m.layers)), e.data.train[idx].label); }, params,
        1e-5, cfg.gradcheck_samples);
  }
  const Scheme s = arm_scheme(spec, cfg);
  r.ledger = count_params(s);
  r.ledger.merge(activation_ledger(s, 1, spec.stack));
  r.ledger.merge(flop_count(s));
  r.param_hash = hex(hash_tensors(params));
  if (trained) *trained = std::move(m);
  return r;
}

// Full-model gradient check of the SynQT arm at initialization on the first
// training sample, with one fixed training-mode DropFeat mask.
inline GradCheckReport model_grad_check(const TrainConfig& cfg, std::size_t per_tensor = 0) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng brng = root.derive("backbone");
  FrozenBackbone bb =
      cfg.checkpoint.empty() ? FrozenBackbone::build(cfg.backbone, brng) : FrozenBackbone::load(cfg.backbone, cfg.checkpoint);
  const auto data = SyntheticDataset::make(cfg.data, cfg.backbone, root.derive("data").seed());
  FeatureStack x;
  {
    NoGradScope ng;
    x = bb.forward_collect(data.train.front().image);
  }
  const ArmSpec spec = arm_spec("synqt", cfg);
  Rng init_rng = root.derive("init/synqt");
  ArmModel m = ArmModel::init(spec, cfg, init_rng);
  Rng mask_rng = root.derive("gradcheck");
  const DropMask mask = dropfeat(mask_rng, cfg.synqt.dropfeat_p, m.layers, true);
  const std::size_t label = data.train.front().label;
  return grad_check([&] { return cross_entropy(m.model.logits(bb, x, mask), label); }, m.trainable(), 1e-5, per_tensor);
}

inline nlohmann::json arm_json(const ArmResult& r) {
  nlohmann::json gc = nlohmann::json::array();
  for (const auto& g : r.gradcheck.entries)
    gc.push_back({{"name", g.name},
                  {"elements", g.elements},
                  {"tensor_rel_error", g.tensor_rel_error},
                  {"max_rel_error", g.max_rel_error},
                  {"max_abs_error", g.max_abs_error}});
  return {{"name", r.name},
          {"lr", r.lr},
          {"train_accuracy", r.train_accuracy},
          {"test_accuracy", r.test_accuracy},
          {"loss_curve", r.loss_curve},
          {"gradcheck",
           {{"max_tensor_rel_error", r.gradcheck.max_tensor_rel_error},
            {"max_rel_error", r.gradcheck.max_rel_error},
            {"max_abs_error", r.gradcheck.max_abs_error},
            {"tensors", gc}}},
          {"ledger",
           {{"trainable_params", r.ledger.trainable_params()},
            {"stored_activation_scalars", r.ledger.stored_activation_scalars()},
            {"flops", r.ledger.flops()},
            {"macs", r.ledger.macs()}}},
          {"param_hash", r.param_hash}};
}

inline nlohmann::json train(const TrainConfig& cfg) {
  cfg.validate();
  for (const auto& a : cfg.arms) arm_spec(a, cfg);
  Experiment e = Experiment::make(cfg, cfg.seed);
  std::vector<Tensor> images;
  for (const auto& s : e.data.train) images.push_back(s.image);
  for (const auto& s : e.data.test) images.push_back(s.image);
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : cfg.arms) arms.push_back(arm_json(run_arm(e, a, cfg.lr_for(a), cfg)));
  return {{"schema", "synqt-run-report"},
          {"schema_version", 1},
          {"config", config_json(cfg)},
          {"arms", arms},
          {"hashes", {{"data", hex(hash_tensors(images))}, {"backbone", hex(hash_tensors(e.backbone.tensors()))}}}};
}

struct CompareRow {
  std::string arm;
  double lr = 0.0;
  double scale = 0.0;
  std::vector<double> test_accuracy;  // one per seed
  double mean() const {
    double s = 0;
    for (double v : test_accuracy) s += v;
    return test_accuracy.empty() ? 0.0 : s / static_cast<double>(test_accuracy.size());
  }
};

// Every arm over every seed, optionally crossed with a learning-rate grid
// and a grid of values applied to both scale factors.
inline std::vector<CompareRow> compare(const TrainConfig& base) {
  base.validate();
  for (const auto& a : base.compare_arms) arm_spec(a, base);
  const std::vector<double> scales = base.scale_grid.empty() ? std::vector<double>{0.0} : base.scale_grid;
  std::vector<CompareRow> rows;
  for (double sc : scales) {
    TrainConfig cfg = base;
    if (sc > 0.0) cfg.synqt.s_prime = cfg.synqt.s_double_prime = sc;
    std::vector<CompareRow> block;
    for (const auto& arm : cfg.compare_arms) {
      const std::vector<double> lrs = cfg.lr_grid.empty() ? std::vector<double>{cfg.lr_for(arm)} : cfg.lr_grid;
      for (double lr : lrs) block.push_back({arm, lr, cfg.synqt.s_prime, {}});
    }
    for (std::uint64_t seed : cfg.compare_seeds) {
      Experiment e = Experiment::make(cfg, seed);
      for (auto& row : block) row.test_accuracy.push_back(run_arm(e, row.arm, row.lr, cfg).test_accuracy);
    }
    rows.insert(rows.end(), block.begin(), block.end());
  }
  return rows;
}

inline nlohmann::json compare_json(const TrainConfig& cfg, const std::vector<CompareRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"arm", r.arm},
                   {"lr", r.lr},
                   {"scale", r.scale},
                   {"test_accuracy", r.test_accuracy},
                   {"mean_test_accuracy", r.mean()}});
  return {{"schema", "synqt-compare-report"}, {"schema_version", 1}, {"config", config_json(cfg)}, {"rows", arr}};
}

}  // namespace synqt
