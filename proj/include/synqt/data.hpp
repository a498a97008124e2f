#pragma once

#include <vector>

#include "synqt/backbone.hpp"

namespace synqt {

struct Sample {
  Tensor image;  // [C x H x W]
  std::size_t label = 0;
};

struct DataConfig {
  std::size_t num_classes = 8;
  std::size_t train_per_class = 64;
  std::size_t test_per_class = 32;
  double sigma = 1.5;

  void validate() const {
    if (num_classes < 2) throw ConfigError("data: need at least two classes");
    if (train_per_class < 1 || test_per_class < 1) throw ConfigError("data: empty split");
    if (!(sigma >= 0.0)) throw ConfigError("data: sigma must be non-negative");
  }
};

// Each class has one Gaussian template image; samples are the template plus
// sigma-scaled Gaussian noise. Train and test samples are distinct draws.
struct SyntheticDataset {
  std::vector<Tensor> templates;
  std::vector<Sample> train, test;

  static SyntheticDataset make(const DataConfig& cfg, const BackboneConfig& arch, std::uint64_t seed) {
    cfg.validate();
    const std::size_t numel = arch.channels * arch.image_size * arch.image_size;
    const Shape shape{arch.channels, arch.image_size, arch.image_size};
    Rng root(seed);
    Rng tmpl = root.derive("templates");
    SyntheticDataset d;
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      std::vector<double> v(numel);
      for (double& x : v) x = tmpl.normal();
      d.templates.push_back(Tensor::from_data(shape, std::move(v)));
    }
    auto draw = [&](Rng rng, std::size_t per_class, std::vector<Sample>& out) {
      for (std::size_t i = 0; i < per_class; ++i)
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
          std::vector<double> v = d.templates[c].values();
          for (double& x : v) x += cfg.sigma * rng.normal();
          out.push_back({Tensor::from_data(shape, std::move(v)), c});
        }
    };
    draw(root.derive("train"), cfg.train_per_class, d.train);
    draw(root.derive("test"), cfg.test_per_class, d.test);
    return d;
  }
};

}  // namespace synqt
