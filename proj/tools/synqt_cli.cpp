#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "synqt/train.hpp"

using namespace synqt;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

// Writes to --out when given, else to stdout.
void emit(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + out);
  f << text;
  if (!f) throw std::runtime_error("write failed for " + out);
}

TrainConfig config_or_default(const std::string& path) { return path.empty() ? TrainConfig{} : load_config(path); }

BackboneConfig arch_preset(const std::string& name) {
  if (name == "toy") return BackboneConfig::toy();
  if (name == "vitb16") return BackboneConfig::vit_b16();
  throw ConfigError("unknown arch '" + name + "' (expected toy or vitb16)");
}

struct SchemeFlags {
  std::string arch;
  std::string scheme = "synqt";
  std::size_t hidden = 0, qkv = 0, n = 0, classes = 0, tokens = 10, rank = 8, layer = 0;

  void attach(CLI::App* c) {
    c->add_option("--arch", arch, "toy or vitb16 (default: the config's backbone)");
    c->add_option("--scheme", scheme, "full, linear, bitfit, vpt, lora, adapter or synqt");
    c->add_option("--hidden", hidden, "SynQT bottleneck width");
    c->add_option("--qkv", qkv, "SynQT attention bottleneck width");
    c->add_option("--n", n, "SynQT query tokens");
    c->add_option("--classes", classes, "number of classes");
    c->add_option("--tokens", tokens, "vpt prompt tokens per layer");
    c->add_option("--rank", rank, "lora rank");
    c->add_option("--layer", layer, "lora layer (0 = all)");
  }

  Scheme build(const TrainConfig& cfg) const {
    Scheme s;
    s.kind = scheme_kind_from_string(scheme);
    s.arch = arch.empty() ? cfg.backbone : arch_preset(arch);
    s.num_classes = classes ? classes : (arch == "vitb16" ? 100 : cfg.data.num_classes);
    s.synqt = cfg.synqt;
    if (arch == "vitb16") s.synqt.qkv_hidden = 8, s.synqt.hidden = 48;
    if (hidden) s.synqt.hidden = hidden;
    if (qkv) s.synqt.qkv_hidden = qkv;
    if (n) s.synqt.n = n;
    s.head = cfg.head;
    s.tokens = tokens;
    s.rank = rank;
    s.lora_layer = layer;
    s.validate();
    return s;
  }
};

std::string table(const std::vector<CompareRow>& rows) {
  std::string out = "arm                      lr        scale  mean_test  per_seed\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-24s %-9.3g %-6.3g %-10.4f", r.arm.c_str(), r.lr, r.scale, r.mean());
    out += buf;
    for (double a : r.test_accuracy) {
      std::snprintf(buf, sizeof buf, " %.4f", a);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SynQT: synthesized query tuning over a frozen vision transformer"};
  app.require_subcommand(1);

  std::string config, out;
  auto common = [&](CLI::App* c) {
    c->add_option("--config", config, "run configuration file");
    c->add_option("--out", out, "output path (default: stdout)");
  };

  auto* train_cmd = app.add_subcommand("train", "train the configured arms and write a JSON run report");
  common(train_cmd);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every trainable tensor");
  std::size_t per_tensor = 0;
  double tolerance = 1e-4;
  common(grad_cmd);
  grad_cmd->add_option("--per-tensor", per_tensor, "elements checked per tensor (0 = all)");
  grad_cmd->add_option("--tolerance", tolerance, "maximum accepted relative error");

  SchemeFlags sf;
  auto* params_cmd = app.add_subcommand("params", "trainable-parameter ledger as JSON");
  common(params_cmd);
  sf.attach(params_cmd);

  auto* flops_cmd = app.add_subcommand("flops", "inference FLOP/MAC ledger as JSON");
  common(flops_cmd);
  sf.attach(flops_cmd);

  auto* mem_cmd = app.add_subcommand("memsweep", "stored activations when only layer k is tuned, as CSV");
  std::string mem_arch;
  std::size_t mem_rank = 8;
  common(mem_cmd);
  mem_cmd->add_option("--arch", mem_arch, "toy or vitb16 (default: the config's backbone)");
  mem_cmd->add_option("--rank", mem_rank, "lora rank");

  auto* dump_cmd = app.add_subcommand("weights-dump", "train the SynQT arm and dump per-sample feature weights");
  std::size_t dump_samples = 8;
  common(dump_cmd);
  dump_cmd->add_option("--samples", dump_samples, "number of test samples to dump");

  auto* compare_cmd = app.add_subcommand("compare", "linear probe vs SynQT vs ablation arms over seeds");
  std::string csv;
  common(compare_cmd);
  compare_cmd->add_option("--csv", csv, "also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kInvalid;
  }

  try {
    const TrainConfig cfg = config_or_default(config);
    if (*train_cmd) {
      emit(out, train(cfg).dump(2) + "\n");
    } else if (*grad_cmd) {
      const auto t0 = std::chrono::steady_clock::now();
      const GradCheckReport r = model_grad_check(cfg, per_tensor);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      nlohmann::json tensors = nlohmann::json::array();
      std::size_t elements = 0;
      for (const auto& e : r.entries) {
        tensors.push_back({{"name", e.name},
                           {"elements", e.elements},
                           {"tensor_rel_error", e.tensor_rel_error},
                           {"max_rel_error", e.max_rel_error},
                           {"max_abs_error", e.max_abs_error}});
        elements += e.elements;
      }
      // Pass/fail uses each tensor's relative error as a whole; the worst single
      // element is reported alongside.
      const bool ok = r.max_tensor_rel_error < tolerance;
      std::cout << "max_rel_error " << r.max_tensor_rel_error << " (worst element " << r.max_rel_error << ", abs "
                << r.max_abs_error << ") over " << elements << " elements in " << r.entries.size() << " tensors ("
                << secs << " s): " << (ok ? "ok" : "FAILED") << "\n";
      if (!out.empty())
        emit(out, nlohmann::json{{"max_tensor_rel_error", r.max_tensor_rel_error},
                                 {"max_rel_error", r.max_rel_error},
                                 {"max_abs_error", r.max_abs_error},
                                 {"tolerance", tolerance},
                                 {"passed", ok},
                                 {"tensors", tensors}}
                          .dump(2) +
                      "\n");
      return ok ? kOk : kRuntime;
    } else if (*params_cmd) {
      const Scheme s = sf.build(cfg);
      Ledger g = count_params(s);
      auto j = g.to_json();
      j["config"] = scheme_json(s);
      emit(out, j.dump(2) + "\n");
    } else if (*flops_cmd) {
      const Scheme s = sf.build(cfg);
      auto j = flop_count(s).to_json();
      j["config"] = scheme_json(s);
      emit(out, j.dump(2) + "\n");
    } else if (*mem_cmd) {
      const BackboneConfig a = mem_arch.empty() ? cfg.backbone : arch_preset(mem_arch);
      a.validate();
      if (mem_rank < 1) throw ConfigError("--rank must be at least 1");
      std::string text = "k,stored_scalars,bytes_fp32\n";
      for (const auto& [k, v] : entanglement_sweep(a, mem_rank, cfg.data.num_classes))
        text += std::to_string(k) + "," + std::to_string(v) + "," + std::to_string(4 * v) + "\n";
      emit(out, text);
    } else if (*dump_cmd) {
      Experiment e = Experiment::make(cfg, cfg.seed);
      ArmModel m;
      run_arm(e, "synqt", cfg.lr_for("synqt"), cfg, &m);
      nlohmann::json arr = nlohmann::json::array();
      NoGradScope ng;
      for (std::size_t i = 0; i < std::min(dump_samples, e.data.test.size()); ++i)
        arr.push_back(feature_weights_json(i, dump_feature_weights(m.model.head, m.model.features(e.backbone, e.test_features[i]))));
      emit(out, arr.dump(2) + "\n");
    } else if (*compare_cmd) {
      const auto rows = compare(cfg);
      std::cout << table(rows);
      if (!out.empty()) emit(out, compare_json(cfg, rows).dump(2) + "\n");
      if (!csv.empty()) {
        std::string text = "arm,lr,scale,mean_test_accuracy\n";
        for (const auto& r : rows)
          text += r.arm + "," + std::to_string(r.lr) + "," + std::to_string(r.scale) + "," + std::to_string(r.mean()) + "\n";
        emit(csv, text);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kInvalid;
  } catch (const DimensionError& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kInvalid;
  } catch (const RunError& e) {
    std::cerr << "run failed at step " << e.step() << ": " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
