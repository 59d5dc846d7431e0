// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgl/dataset/render.hpp"

namespace cgl {

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  FactorTuple tuple;
  std::string shape_label;
  Realized realized;
  int level = 0;
  std::string split;  // "train" | "probe"
  uint64_t seed = 0;
};

struct DatasetManifest {
  std::string root;  // directory holding the manifest file
  std::vector<ManifestRecord> records;

  std::string resolve(const ManifestRecord& r) const {
    return (std::filesystem::path(root) / r.path).string();
  }
};

inline nlohmann::json record_to_json(const ManifestRecord& r) {
  return nlohmann::json{{"path", r.path},       {"tuple", tuple_str(r.tuple)},
                        {"shape", r.shape_label}, {"hue", r.realized.hue},
                        {"size_px", r.realized.size_px}, {"cx", r.realized.cx},
                        {"cy", r.realized.cy},   {"level", r.level},
                        {"split", r.split},      {"seed", r.seed}};
}

inline ManifestRecord record_from_json(const nlohmann::json& j) {
  ManifestRecord r;
  r.path = j.at("path").get<std::string>();
  r.tuple = parse_tuple(j.at("tuple").get<std::string>());
  r.shape_label = j.at("shape").get<std::string>();
  r.realized.hue = j.at("hue").get<double>();
  r.realized.size_px = j.at("size_px").get<double>();
  r.realized.cx = j.at("cx").get<double>();
  r.realized.cy = j.at("cy").get<double>();
  r.level = j.at("level").get<int>();
  r.split = j.at("split").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  return r;
}

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("manifest: cannot write " + path);
  for (const auto& r : m.records) os << record_to_json(r).dump() << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("manifest: cannot open " + path);
  DatasetManifest m;
  m.root = std::filesystem::path(path).parent_path().string();
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    m.records.push_back(record_from_json(nlohmann::json::parse(line)));
  }
  return m;
}

struct BuildResult {
  DatasetManifest train;
  DatasetManifest probe;
  std::string train_manifest_path;
  std::string probe_manifest_path;
};

// Renders n_per_composition images for each training composition plus a
// probe manifest covering every composition (held-out included).
inline BuildResult build_dataset(const FactorSpace& space, const CompositionSplit& split,
                                 int n_per_composition, int probe_n_per_composition,
                                 const RenderSpec& spec, uint64_t seed,
                                 const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw std::runtime_error("datagen: cannot create " + out_dir + ": " + ec.message());

  const Rng base(seed);
  BuildResult out;
  out.train.root = out_dir;
  out.probe.root = out_dir;

  auto render_into = [&](DatasetManifest& m, const FactorTuple& t, const std::string& tag,
                         int count) {
    if (count <= 0) return;
    const std::string comp = tuple_str(t);
    const fs::path dir = fs::path(out_dir) / "images" / (tag + "_" + comp);
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("datagen: cannot create " + dir.string() + ": " + ec.message());
    for (int i = 0; i < count; ++i) {
      Rng r = base.stream(tag + "/" + comp, static_cast<uint64_t>(i));
      RenderResult rr = render_sample(space, t, spec, r);
      char name[32];
      std::snprintf(name, sizeof(name), "%05d.png", i);
      const fs::path file = dir / name;
      write_png_rgb8(file.string(), rr.image);
      ManifestRecord rec;
      rec.path = fs::relative(file, out_dir).string();
      rec.tuple = t;
      rec.shape_label = rr.shape_label;
      rec.realized = rr.realized;
      rec.level = split.level(t);
      rec.split = tag;
      rec.seed = seed;
      m.records.push_back(std::move(rec));
    }
  };

  for (const auto& t : split.train) render_into(out.train, t, "train", n_per_composition);
  for (const auto& t : enumerate_compositions(space))
    render_into(out.probe, t, "probe", probe_n_per_composition);

  out.train_manifest_path = (fs::path(out_dir) / "train_manifest.jsonl").string();
  out.probe_manifest_path = (fs::path(out_dir) / "probe_manifest.jsonl").string();
  save_manifest(out.train_manifest_path, out.train);
  save_manifest(out.probe_manifest_path, out.probe);
  return out;
}

}  // namespace cgl
