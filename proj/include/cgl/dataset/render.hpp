// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgl/core/rng.hpp"
#include "cgl/dataset/factor_space.hpp"
#include "cgl/dataset/png_io.hpp"

namespace cgl {

// half-open interval; hi may exceed 1 for hue bands that wrap around 0
struct Band {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  bool contains_mod1(double v) const {
    double d = v - lo;
    d -= std::floor(d);
    return d < width() + 1e-12;
  }
  bool contains(double v) const { return v >= lo - 1e-12 && v < hi + 1e-12; }
};

struct RenderSpec {
  int canvas = 32;
  double position_jitter = 0.08;              // fraction of canvas, per axis
  std::array<double, 3> background = {0, 0, 0};
  std::map<std::string, std::vector<Band>> hue_bands;   // factor name -> per-label band
  std::map<std::string, std::vector<Band>> size_bands;  // size as fraction of canvas

  void validate(const FactorSpace& space) const {
    if (canvas < 16) throw std::runtime_error("render: canvas must be >= 16 px");
    auto check_disjoint = [](const std::vector<Band>& bands, const std::string& what,
                             bool mod1) {
      for (size_t i = 0; i < bands.size(); ++i)
        for (size_t j = i + 1; j < bands.size(); ++j) {
          // sample-based overlap check over a fine lattice
          for (int k = 0; k < 64; ++k) {
            double v = bands[i].lo + bands[i].width() * (k + 0.5) / 64.0;
            if (mod1) v -= std::floor(v);
            if (mod1 ? bands[j].contains_mod1(v) : bands[j].contains(v))
              throw std::runtime_error("render: overlapping " + what + " bands");
          }
        }
    };
    for (const auto& [name, bands] : hue_bands) {
      if (space.factor_index(name) < 0)
        throw std::runtime_error("render: hue bands for unknown factor '" + name + "'");
      if (static_cast<int>(bands.size()) != space.factors[space.factor_index(name)].cardinality())
        throw std::runtime_error("render: hue band count mismatch for '" + name + "'");
      check_disjoint(bands, "hue", true);
    }
    for (const auto& [name, bands] : size_bands) {
      if (space.factor_index(name) < 0)
        throw std::runtime_error("render: size bands for unknown factor '" + name + "'");
      if (static_cast<int>(bands.size()) != space.factors[space.factor_index(name)].cardinality())
        throw std::runtime_error("render: size band count mismatch for '" + name + "'");
      check_disjoint(bands, "size", false);
    }
  }
};

// continuous realization of one sample
struct Realized {
  double hue = 0.0;       // in [0,1)
  double size_px = 0.0;   // object diameter in pixels
  double cx = 0.0, cy = 0.0;
};

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h -= std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

namespace detail {

// signed distance style coverage tests; all shapes sized by circumradius r
inline bool inside_shape(const std::string& shape, double px, double py, double cx, double cy,
                         double r) {
  const double dx = px - cx, dy = py - cy;
  if (shape == "circle") return dx * dx + dy * dy <= r * r;
  if (shape == "square") {
    const double half = r / std::sqrt(2.0);
    return std::abs(dx) <= half && std::abs(dy) <= half;
  }
  if (shape == "triangle") {
    // up-pointing equilateral triangle with circumradius r
    const double x0 = cx, y0 = cy - r;
    const double x1 = cx - r * std::sqrt(3.0) / 2.0, y1 = cy + r / 2.0;
    const double x2 = cx + r * std::sqrt(3.0) / 2.0, y2 = cy + r / 2.0;
    auto side = [&](double ax, double ay, double bx, double by) {
      return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    };
    const double s0 = side(x0, y0, x1, y1);
    const double s1 = side(x1, y1, x2, y2);
    const double s2 = side(x2, y2, x0, y0);
    return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
  }
  throw std::runtime_error("render: unknown shape '" + shape + "'");
}

}  // namespace detail

// Pure rasterizer: identical (shape, realized, spec) always produces the
// identical image. 4x supersampled coverage per pixel.
inline ImageU8 render_from_realized(const std::string& shape, const Realized& real,
                                    const RenderSpec& spec) {
  const int n = spec.canvas;
  ImageU8 img;
  img.width = n;
  img.height = n;
  img.rgb.resize(static_cast<size_t>(n) * n * 3);
  const auto rgb = hsv_to_rgb(real.hue, 0.9, 0.95);
  const double r = real.size_px / 2.0;
  static const double offs[4][2] = {{0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      int hits = 0;
      for (const auto& o : offs)
        hits += detail::inside_shape(shape, x + o[0], y + o[1], real.cx, real.cy, r) ? 1 : 0;
      const double cov = hits / 4.0;
      for (int c = 0; c < 3; ++c) {
        const double v = spec.background[c] * (1.0 - cov) + rgb[c] * cov;
        img.rgb[(static_cast<size_t>(y) * n + x) * 3 + c] =
            static_cast<uint8_t>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
      }
    }
  return img;
}

struct RenderResult {
  ImageU8 image;
  Realized realized;
  std::string shape_label;
};

// Draws banded continuous realizations for a tuple without rasterizing.
inline Realized draw_realization(const FactorSpace& space, const FactorTuple& t,
                                 const RenderSpec& spec, Rng& rng,
                                 std::string* shape_label = nullptr) {
  if (!space.valid_tuple(t)) throw std::runtime_error("render: invalid tuple " + tuple_str(t));
  Realized real;
  if (shape_label) *shape_label = "circle";
  for (int i = 0; i < space.num_factors(); ++i) {
    const Factor& f = space.factors[i];
    auto hit = spec.hue_bands.find(f.name);
    if (hit != spec.hue_bands.end()) {
      const Band& b = hit->second[t[i]];
      double h = rng.uniform(b.lo, b.hi);
      real.hue = h - std::floor(h);
      continue;
    }
    auto sit = spec.size_bands.find(f.name);
    if (sit != spec.size_bands.end()) {
      const Band& b = sit->second[t[i]];
      real.size_px = rng.uniform(b.lo, b.hi) * spec.canvas;
      continue;
    }
    if (f.name == "shape" && shape_label) *shape_label = f.values[t[i]];
  }
  const double jit = spec.position_jitter * spec.canvas;
  real.cx = spec.canvas / 2.0 + rng.uniform(-jit, jit);
  real.cy = spec.canvas / 2.0 + rng.uniform(-jit, jit);
  // keep the object inside the canvas
  const double margin = real.size_px / 2.0 + 1.0;
  real.cx = std::min(spec.canvas - margin, std::max(margin, real.cx));
  real.cy = std::min(spec.canvas - margin, std::max(margin, real.cy));
  return real;
}

inline RenderResult render_sample(const FactorSpace& space, const FactorTuple& t,
                                  const RenderSpec& spec, Rng& rng) {
  std::string shape;
  Realized real = draw_realization(space, t, spec, rng, &shape);
  return {render_from_realized(shape, real, spec), real, shape};
}

// ---- factor-space file: factors, values, bands, supergroups ----

struct SpaceFile {
  FactorSpace space;
  RenderSpec render;
};

inline SpaceFile parse_space_json(const nlohmann::json& j) {
  SpaceFile sf;
  for (const auto& jf : j.at("factors")) {
    Factor f;
    f.name = jf.at("name").get<std::string>();
    f.values = jf.at("values").get<std::vector<std::string>>();
    if (jf.contains("supergroup")) f.supergroup = jf.at("supergroup").get<std::vector<int>>();
    auto read_bands = [](const nlohmann::json& arr) {
      std::vector<Band> out;
      for (const auto& b : arr) out.push_back({b.at(0).get<double>(), b.at(1).get<double>()});
      return out;
    };
    if (jf.contains("hue_bands")) sf.render.hue_bands[f.name] = read_bands(jf.at("hue_bands"));
    if (jf.contains("size_bands")) sf.render.size_bands[f.name] = read_bands(jf.at("size_bands"));
    sf.space.factors.push_back(std::move(f));
  }
  if (j.contains("canvas")) sf.render.canvas = j.at("canvas").get<int>();
  if (j.contains("position_jitter"))
    sf.render.position_jitter = j.at("position_jitter").get<double>();
  if (j.contains("background")) {
    auto bg = j.at("background").get<std::vector<double>>();
    for (int c = 0; c < 3; ++c) sf.render.background[c] = bg.at(c);
  }
  sf.space.validate();
  sf.render.validate(sf.space);
  return sf;
}

inline SpaceFile load_space_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open space file: " + path);
  nlohmann::json j;
  is >> j;
  return parse_space_json(j);
}

// Default Shapes2D space: shape x color x size, binary factors.
// Tuple 000 is a large red circle.
inline SpaceFile default_shapes2d(int canvas = 32) {
  nlohmann::json j = {
      {"factors",
       {{{"name", "shape"}, {"values", {"circle", "triangle"}}, {"supergroup", {0, 1}}},
        {{"name", "color"},
         {"values", {"red", "blue"}},
         {"supergroup", {0, 1}},
         {"hue_bands", {{0.95, 1.05}, {0.55, 0.65}}}},
        {{"name", "size"},
         {"values", {"large", "small"}},
         {"supergroup", {0, 1}},
         {"size_bands", {{0.40, 0.50}, {0.15, 0.25}}}}}},
      {"canvas", canvas},
      {"position_jitter", 0.08},
      {"background", {0.0, 0.0, 0.0}}};
  return parse_space_json(j);
}

}  // namespace cgl
