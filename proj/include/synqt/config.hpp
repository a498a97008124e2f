#pragma once

// Run configuration: an INI-style text file with one section per module.
//
//   [run]       seed, epochs, batch_size, base_lr, weight_decay, warmup_frac,
//               arms, gradcheck_samples
//   [lr]        per-arm learning-rate overrides, e.g. linear = 0.01
//   [data]      num_classes, train_per_class, test_per_class, sigma
//   [backbone]  image_size, patch_size, channels, depth, width, heads,
//               mlp_ratio, num_register_tokens, init_std, checkpoint
//   [synqt]     n, hidden, qkv_hidden, s_prime, s_double_prime, dropfeat_p, init_std,
//               use_last_output, query (synthesized | random_prompt)
//   [head]      use_h, use_att, use_ffn, dropfeat,
//               aggregation (conditional | fixed | simple_average),
//               projection (shared | none | independent)
//   [compare]   seeds, arms, lr_grid, scale_grid
//
// Lists are comma separated. Unknown sections or keys are rejected.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "synqt/data.hpp"
#include "synqt/head.hpp"

namespace synqt {

// Defaults describe the synthetic learning experiment. Learning rates are the
// per-arm best of a three-seed grid on that experiment; the backbone is drawn
// at std 0.18 (about 1/sqrt(width)) so its attention is not uniform at width 32.
struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double base_lr = 0.02;
  double weight_decay = 1e-4;
  double warmup_frac = 0.1;
  std::vector<std::string> arms{"synqt"};
  std::size_t gradcheck_samples = 8;  // elements per tensor in the run report's gradient check
  std::map<std::string, double> arm_lr{{"linear", 0.1}, {"synqt_no_dropfeat", 0.01}};

  DataConfig data;
  BackboneConfig backbone = experiment_backbone();
  std::string checkpoint;  // optional frozen backbone weights
  SynqtConfig synqt{4, 16, 4, 1.0, 1.0, 0.1};
  StackOptions stack;
  HeadVariant head;

  std::vector<std::uint64_t> compare_seeds{1, 2, 3};
  std::vector<std::string> compare_arms{"linear", "kem_random", "qsm", "synqt", "synqt_no_dropfeat"};
  std::vector<double> lr_grid;
  std::vector<double> scale_grid;

  static BackboneConfig experiment_backbone() {
    BackboneConfig b = BackboneConfig::toy();
    b.init_std = 0.18;
    return b;
  }

  double lr_for(const std::string& arm) const {
    auto it = arm_lr.find(arm);
    return it == arm_lr.end() ? base_lr : it->second;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("run.epochs must be positive");
    if (batch_size < 1) throw ConfigError("run.batch_size must be positive");
    if (!(base_lr > 0.0)) throw ConfigError("run.base_lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("run.weight_decay must be non-negative");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("run.warmup_frac must lie in [0, 1)");
    for (const auto& [arm, lr] : arm_lr)
      if (!(lr > 0.0)) throw ConfigError("lr." + arm + " must be positive");
    if (arms.empty()) throw ConfigError("run.arms is empty");
    if (compare_seeds.empty()) throw ConfigError("compare.seeds is empty");
    for (double v : lr_grid)
      if (!(v > 0.0)) throw ConfigError("compare.lr_grid values must be positive");
    for (double v : scale_grid)
      if (!(v > 0.0)) throw ConfigError("compare.scale_grid values must be positive");
    data.validate();
    backbone.validate();
    synqt.validate(backbone.width);
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  in >> v;
  std::string rest;
  if (in.fail() || (in >> rest)) throw ConfigError("cannot parse " + key + " = '" + text + "'");
  return v;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("cannot parse " + key + " = '" + text + "' as a boolean");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& s : split_list(text)) out.push_back(parse_value<T>(key, s));
  return out;
}

}  // namespace detail

inline std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::conditional: return "conditional";
    case Aggregation::fixed: return "fixed";
    case Aggregation::simple_average: return "simple_average";
  }
  return "?";
}

inline std::string to_string(Projection p) {
  switch (p) {
    case Projection::shared: return "shared";
    case Projection::none: return "none";
    case Projection::independent: return "independent";
  }
  return "?";
}

inline std::string to_string(QueryMode q) { return q == QueryMode::synthesized ? "synthesized" : "random_prompt"; }

inline TrainConfig parse_config(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  TrainConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside any section");
    for (const auto& [key, node] : body) {
      const std::string name = section + "." + key;
      const std::string v = node.data();
      using detail::parse_list;
      using detail::parse_value;
      auto sz = [&] { return parse_value<std::size_t>(name, v); };
      auto dbl = [&] { return parse_value<double>(name, v); };
      auto flag = [&] { return parse_value<bool>(name, v); };
      if (section == "lr") {
        c.arm_lr[key] = dbl();
      } else if (name == "run.seed") c.seed = parse_value<std::uint64_t>(name, v);
      else if (name == "run.epochs") c.epochs = sz();
      else if (name == "run.batch_size") c.batch_size = sz();
      else if (name == "run.base_lr") c.base_lr = dbl();
      else if (name == "run.weight_decay") c.weight_decay = dbl();
      else if (name == "run.warmup_frac") c.warmup_frac = dbl();
      else if (name == "run.arms") c.arms = detail::split_list(v);
      else if (name == "run.gradcheck_samples") c.gradcheck_samples = sz();
      else if (name == "data.num_classes") c.data.num_classes = sz();
      else if (name == "data.train_per_class") c.data.train_per_class = sz();
      else if (name == "data.test_per_class") c.data.test_per_class = sz();
      else if (name == "data.sigma") c.data.sigma = dbl();
      else if (name == "backbone.image_size") c.backbone.image_size = sz();
      else if (name == "backbone.patch_size") c.backbone.patch_size = sz();
      else if (name == "backbone.channels") c.backbone.channels = sz();
      else if (name == "backbone.depth") c.backbone.depth = sz();
      else if (name == "backbone.width") c.backbone.width = sz();
      else if (name == "backbone.heads") c.backbone.heads = sz();
      else if (name == "backbone.mlp_ratio") c.backbone.mlp_ratio = dbl();
      else if (name == "backbone.num_register_tokens") c.backbone.num_register_tokens = sz();
      else if (name == "backbone.init_std") c.backbone.init_std = dbl();
      else if (name == "backbone.checkpoint") c.checkpoint = v;
      else if (name == "synqt.n") c.synqt.n = sz();
      else if (name == "synqt.hidden") c.synqt.hidden = sz();
      else if (name == "synqt.qkv_hidden") c.synqt.qkv_hidden = sz();
      else if (name == "synqt.s_prime") c.synqt.s_prime = dbl();
      else if (name == "synqt.s_double_prime") c.synqt.s_double_prime = dbl();
      else if (name == "synqt.dropfeat_p") c.synqt.dropfeat_p = dbl();
      else if (name == "synqt.init_std") c.synqt.init_std = dbl();
      else if (name == "synqt.use_last_output") c.stack.use_last_output = flag();
      else if (name == "synqt.query") {
        if (v == "synthesized") c.stack.query = QueryMode::synthesized;
        else if (v == "random_prompt") c.stack.query = QueryMode::random_prompt;
        else throw ConfigError("synqt.query must be synthesized or random_prompt");
      } else if (name == "head.use_h") c.head.use_h = flag();
      else if (name == "head.use_att") c.head.use_att = flag();
      else if (name == "head.use_ffn") c.head.use_ffn = flag();
      else if (name == "head.dropfeat") c.head.dropfeat = flag();
      else if (name == "head.aggregation") {
        if (v == "conditional") c.head.aggregation = Aggregation::conditional;
        else if (v == "fixed") c.head.aggregation = Aggregation::fixed;
        else if (v == "simple_average") c.head.aggregation = Aggregation::simple_average;
        else throw ConfigError("head.aggregation must be conditional, fixed or simple_average");
      } else if (name == "head.projection") {
        if (v == "shared") c.head.projection = Projection::shared;
        else if (v == "none") c.head.projection = Projection::none;
        else if (v == "independent") c.head.projection = Projection::independent;
        else throw ConfigError("head.projection must be shared, none or independent");
      } else if (name == "compare.seeds") c.compare_seeds = parse_list<std::uint64_t>(name, v);
      else if (name == "compare.arms") c.compare_arms = detail::split_list(v);
      else if (name == "compare.lr_grid") c.lr_grid = parse_list<double>(name, v);
      else if (name == "compare.scale_grid") c.scale_grid = parse_list<double>(name, v);
      else throw ConfigError("unknown config key '" + name + "'");
    }
  }
  c.validate();
  return c;
}

inline TrainConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in);
}

inline nlohmann::json config_json(const TrainConfig& c) {
  nlohmann::json lr = nlohmann::json::object();
  for (const auto& [arm, v] : c.arm_lr) lr[arm] = v;
  return {{"run",
           {{"seed", c.seed},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"base_lr", c.base_lr},
            {"weight_decay", c.weight_decay},
            {"warmup_frac", c.warmup_frac},
            {"arms", c.arms},
            {"gradcheck_samples", c.gradcheck_samples}}},
          {"lr", lr},
          {"data",
           {{"num_classes", c.data.num_classes},
            {"train_per_class", c.data.train_per_class},
            {"test_per_class", c.data.test_per_class},
            {"sigma", c.data.sigma}}},
          {"backbone", c.backbone},
          {"checkpoint", c.checkpoint},
          {"synqt", c.synqt},
          {"stack", {{"use_last_output", c.stack.use_last_output}, {"query", to_string(c.stack.query)}}},
          {"head",
           {{"use_h", c.head.use_h},
            {"use_att", c.head.use_att},
            {"use_ffn", c.head.use_ffn},
            {"dropfeat", c.head.dropfeat},
            {"aggregation", to_string(c.head.aggregation)},
            {"projection", to_string(c.head.projection)}}},
          {"compare",
           {{"seeds", c.compare_seeds}, {"arms", c.compare_arms}, {"lr_grid", c.lr_grid}, {"scale_grid", c.scale_grid}}}};
}

}  // namespace synqt
