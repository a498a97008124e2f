#pragma once

#include <vector>

#include "synqt/model.hpp"

namespace testing_util {

inline synqt::Tensor random_image(synqt::Rng& rng, const synqt::BackboneConfig& cfg) {
  std::vector<double> v(cfg.channels * cfg.image_size * cfg.image_size);
  for (double& x : v) x = rng.normal();
  return synqt::Tensor::from_data({cfg.channels, cfg.image_size, cfg.image_size}, std::move(v));
}

inline synqt::Tensor random_matrix(synqt::Rng& rng, std::size_t m, std::size_t n, double std = 1.0) {
  std::vector<double> v(m * n);
  for (double& x : v) x = rng.normal() * std;
  return synqt::Tensor::matrix(m, n, std::move(v));
}

inline void fill(synqt::Tensor t, const std::vector<double>& values) {
  auto buf = t.mutable_data();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = values.at(i);
}

inline void fill_random(synqt::Tensor t, synqt::Rng& rng, double std = 1.0) {
  for (double& x : t.mutable_data()) x = rng.normal() * std;
}

inline bool all_bitwise_equal(const std::vector<synqt::Tensor>& a, const std::vector<synqt::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i].bitwise_equal(b[i])) return false;
  return true;
}

inline double max_abs_diff(const synqt::Tensor& a, const synqt::Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing_util
