#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "satdm/rng.hpp"
#include "satdm/unet.hpp"

namespace satdm {

template <typename S>
constexpr const char* scalar_type_name() {
  if constexpr (sizeof(S) == 4) {
    return "f32";
  } else {
    return "f64";
  }
}

namespace detail {

template <typename S>
void write_flat(const std::filesystem::path& path, const ParamStore<S>& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path.string());
  for (const auto& [_, t] : store.items()) {
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(S)));
  }
}

template <typename S>
void read_flat(const std::filesystem::path& path, ParamStore<S>& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot read " + path.string());
  for (auto& [_, t] : store.items()) {
    in.read(reinterpret_cast<char*>(t.mutable_data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(S)));
    if (!in) throw DataError("checkpoint: truncated " + path.string());
  }
}

}  // namespace detail

/// Checkpoint directory layout:
///   config.json    full configuration snapshot + iteration + scalar_type
///   weights.bin    raw parameters, concatenated little-endian scalars
///   ema.bin        EMA parameters, same layout
///   manifest.json  [{name, shape, byte_offset, byte_len}] describing both
///   rng.json       trainer stream state
template <typename S>
void save_checkpoint(const std::filesystem::path& dir, const nlohmann::json& config,
                     std::int64_t iteration, const ParamStore<S>& weights,
                     const ParamStore<S>& ema, const Rng& rng) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : weights.items()) {
    const std::uint64_t len = t.size() * sizeof(S);
    manifest.push_back(
        {{"name", name}, {"shape", t.shape()}, {"byte_offset", offset}, {"byte_len", len}});
    offset += len;
  }
  {
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << "\n";
  }
  {
    nlohmann::json cfg = config;
    cfg["iteration"] = iteration;
    cfg["scalar_type"] = scalar_type_name<S>();
    std::ofstream out(dir / "config.json");
    out << cfg.dump(2) << "\n";
  }
  detail::write_flat(dir / "weights.bin", weights);
  detail::write_flat(dir / "ema.bin", ema);
  {
    nlohmann::json r = {{"key", rng.key()}, {"counter", rng.counter()}};
    std::ofstream out(dir / "rng.json");
    out << r.dump(2) << "\n";
  }
}

/// Optimizer moments (all first moments in store order, then all second
/// moments), stored alongside the spec-named files so a resumed run replays
/// the exact update sequence.
template <typename S>
void save_optimizer_state(const std::filesystem::path& dir, std::vector<std::vector<S>>& m,
                          std::vector<std::vector<S>>& v) {
  std::ofstream out(dir / "optimizer.bin", std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write optimizer.bin");
  for (const auto* block : {&m, &v}) {
    for (const auto& vec : *block) {
      out.write(reinterpret_cast<const char*>(vec.data()),
                static_cast<std::streamsize>(vec.size() * sizeof(S)));
    }
  }
}

template <typename S>
bool load_optimizer_state(const std::filesystem::path& dir, std::vector<std::vector<S>>& m,
                          std::vector<std::vector<S>>& v) {
  std::ifstream in(dir / "optimizer.bin", std::ios::binary);
  if (!in) return false;
  for (auto* block : {&m, &v}) {
    for (auto& vec : *block) {
      in.read(reinterpret_cast<char*>(vec.data()),
              static_cast<std::streamsize>(vec.size() * sizeof(S)));
      if (!in) throw DataError("checkpoint: truncated optimizer.bin");
    }
  }
  return true;
}

struct CheckpointInfo {
  nlohmann::json config;
  std::int64_t iteration = 0;
  std::string scalar_type;
  std::uint64_t rng_key = 0, rng_counter = 0;
};

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "config.json")) {
    throw DataError("checkpoint: missing " + (dir / "config.json").string());
  }
  CheckpointInfo info;
  try {
    std::ifstream in(dir / "config.json");
    in >> info.config;
    info.iteration = info.config.value("iteration", 0);
    info.scalar_type = info.config.value("scalar_type", "f32");
    std::ifstream rin(dir / "rng.json");
    if (rin) {
      nlohmann::json r;
      rin >> r;
      info.rng_key = r.value("key", 0ULL);
      info.rng_counter = r.value("counter", 0ULL);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: unparsable metadata: " + std::string(e.what()));
  }
  return info;
}

/// Loads weights/EMA into stores built from the same config. Validates the
/// manifest against the store layout.
template <typename S>
void load_checkpoint_weights(const std::filesystem::path& dir, ParamStore<S>& weights,
                             ParamStore<S>& ema) {
  const auto info = read_checkpoint_info(dir);
  if (info.scalar_type != scalar_type_name<S>()) {
    throw DataError("checkpoint: scalar_type " + info.scalar_type + " does not match build");
  }
  nlohmann::json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw DataError("checkpoint: missing manifest.json");
    in >> manifest;
  }
  if (manifest.size() != weights.items().size()) {
    throw DataError("checkpoint: manifest entry count does not match model");
  }
  for (std::size_t i = 0; i < weights.items().size(); ++i) {
    const auto& [name, t] = weights.items()[i];
    if (manifest[i]["name"] != name ||
        manifest[i]["byte_len"].get<std::uint64_t>() != t.size() * sizeof(S)) {
      throw DataError("checkpoint: manifest mismatch at '" + name + "'");
    }
  }
  detail::read_flat(dir / "weights.bin", weights);
  detail::read_flat(dir / "ema.bin", ema);
}

}  // namespace satdm
