#pragma once

// Checkpoint layout for a prefix P:
//   P.bin   concatenated little-endian IEEE-754 binary64 values, one segment
//           per named tensor, in manifest order
//   P.json  {"format": "synqt-checkpoint", "version": 1,
//            "tensors": [{"name", "shape", "offset"}]}, offset in bytes

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "synqt/tensor.hpp"

namespace synqt {

namespace detail {
inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffULL) << (8 * (7 - i));
    return r;
  }
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& prefix, const std::vector<Tensor>& tensors) {
  nlohmann::json manifest{{"format", "synqt-checkpoint"}, {"version", 1}, {"tensors", nlohmann::json::array()}};
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw CheckpointError("cannot open " + prefix + ".bin for writing");
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    if (t.name().empty()) throw CheckpointError("checkpoint tensors must be named");
    manifest["tensors"].push_back({{"name", t.name()}, {"shape", t.shape()}, {"offset", offset}});
    for (double v : t.data()) {
      std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
      bin.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += t.numel() * sizeof(double);
  }
  std::ofstream js(prefix + ".json");
  if (!js) throw CheckpointError("cannot open " + prefix + ".json for writing");
  js << manifest.dump(2) << '\n';
}

// Name -> (shape, values).
inline std::map<std::string, Tensor> read_checkpoint(const std::string& prefix) {
  std::ifstream js(prefix + ".json");
  if (!js) throw CheckpointError("missing manifest " + prefix + ".json");
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "synqt-checkpoint") throw CheckpointError("not a synqt checkpoint manifest");
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw CheckpointError("missing blob " + prefix + ".bin");
  std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  std::map<std::string, Tensor> out;
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto n = shape_numel(shape);
    if (offset + n * sizeof(double) > blob.size())
      throw CheckpointError("tensor '" + name + "' extends past the end of the blob");
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, blob.data() + offset + i * sizeof(double), sizeof bits);
      values[i] = std::bit_cast<double>(detail::to_le(bits));
    }
    out.emplace(name, Tensor::from_data(shape, std::move(values)));
  }
  return out;
}

// Overwrites each parameter in `params` with the checkpoint value of the same
// name. Missing names and shape differences are errors.
inline void load_checkpoint_into(const std::string& prefix, std::vector<Tensor>& params) {
  const auto stored = read_checkpoint(prefix);
  for (auto& p : params) {
    auto it = stored.find(p.name());
    if (it == stored.end()) throw CheckpointError("checkpoint has no tensor named '" + p.name() + "'");
    if (it->second.shape() != p.shape())
      throw CheckpointError("shape mismatch for '" + p.name() + "': checkpoint " + shape_str(it->second.shape()) +
                            ", model " + shape_str(p.shape()));
    auto dst = p.mutable_data();
    std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
  }
}

}  // namespace synqt
