// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "cgl/core/nn.hpp"

namespace cgl {

// Checkpoint container: magic, format version, JSON config echo, then named
// float64 tensors. Loading a mismatched version or magic fails loudly.
inline constexpr char kCkptMagic[8] = {'C', 'G', 'L', 'C', 'K', 'P', 'T', '1'};
inline constexpr uint32_t kCkptVersion = 1;

namespace detail {
template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
void get(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
}
}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const ParamStore<S>& ps) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(kCkptMagic, 8);
  detail::put(os, kCkptVersion);
  const std::string cfg = config.dump();
  detail::put(os, static_cast<uint64_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::put(os, static_cast<uint32_t>(ps.items().size()));
  for (const auto& p : ps.items()) {
    detail::put(os, static_cast<uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::put(os, static_cast<uint8_t>(p->value.ndim()));
    for (int d : p->value.shape) detail::put(os, static_cast<int32_t>(d));
    for (int64_t i = 0; i < p->value.size(); ++i)
      detail::put(os, static_cast<double>(p->value[i]));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

// Reads the config JSON without touching weights.
inline nlohmann::json load_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = 0;
  detail::get(is, version);
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  uint64_t cfg_len = 0;
  detail::get(is, cfg_len);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!is) throw std::runtime_error("checkpoint: truncated config in " + path);
  return nlohmann::json::parse(cfg);
}

// Loads weights into an already-constructed store with matching names/shapes.
template <class S>
nlohmann::json load_checkpoint(const std::string& path, ParamStore<S>& ps) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = 0;
  detail::get(is, version);
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  uint64_t cfg_len = 0;
  detail::get(is, cfg_len);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  uint32_t count = 0;
  detail::get(is, count);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = 0;
    detail::get(is, name_len);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint8_t ndim = 0;
    detail::get(is, ndim);
    Shape sh(ndim);
    for (auto& d : sh) {
      int32_t v = 0;
      detail::get(is, v);
      d = v;
    }
    Param<S>* p = ps.find(name);
    if (!p) throw std::runtime_error("checkpoint: unknown tensor '" + name + "' in " + path);
    if (p->value.shape != sh)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "' in " + path);
    for (int64_t j = 0; j < p->value.size(); ++j) {
      double v = 0;
      detail::get(is, v);
      p->value[j] = static_cast<S>(v);
    }
  }
  return nlohmann::json::parse(cfg);
}

}  // namespace cgl
