// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "cgl/backbone/transformer.hpp"
#include "cgl/dataset/manifest.hpp"

namespace cgl {

enum class CondRegime { kFull, kQuantized, kFullDropout, kQuantizedDropout };

inline std::string to_string(CondRegime r) {
  switch (r) {
    case CondRegime::kFull: return "full";
    case CondRegime::kQuantized: return "quantized";
    case CondRegime::kFullDropout: return "full-dropout";
    case CondRegime::kQuantizedDropout: return "quantized-dropout";
  }
  return "?";
}

inline CondRegime cond_regime_from(const std::string& s) {
  if (s == "full") return CondRegime::kFull;
  if (s == "quantized") return CondRegime::kQuantized;
  if (s == "full-dropout") return CondRegime::kFullDropout;
  if (s == "quantized-dropout") return CondRegime::kQuantizedDropout;
  throw std::runtime_error("unknown conditioning regime '" + s + "'");
}

inline bool regime_is_quantized(CondRegime r) {
  return r == CondRegime::kQuantized || r == CondRegime::kQuantizedDropout;
}
inline bool regime_has_dropout(CondRegime r) {
  return r == CondRegime::kFullDropout || r == CondRegime::kQuantizedDropout;
}

// Conditioning factor layout inferred from the space file: factors with hue
// bands pass (cos, sin) of the raw hue, size-band factors the raw fraction,
// everything else its label.
inline std::vector<CondFactorSpec> cond_specs_from(const SpaceFile& sf) {
  std::vector<CondFactorSpec> out;
  for (const auto& f : sf.space.factors) {
    CondFactorSpec s;
    s.name = f.name;
    s.cardinality = f.cardinality();
    if (sf.render.hue_bands.count(f.name)) s.kind = CondKind::kHue;
    else if (sf.render.size_bands.count(f.name)) s.kind = CondKind::kScalar;
    else s.kind = CondKind::kLabelOnly;
    out.push_back(s);
  }
  return out;
}

// realized per-factor continuous values of one sample
struct RealizedFactors {
  FactorTuple tuple;
  double hue = 0.0;        // [0,1)
  double size_frac = 0.0;  // object size / canvas
};

inline RealizedFactors realized_from_record(const ManifestRecord& r, int canvas) {
  return {r.tuple, r.realized.hue, r.realized.size_px / canvas};
}

// full-continuous passes raw values, quantized passes label indices, and
// dropout marks each factor absent independently with probability p
inline ConditionVector apply_conditioning_regime(const std::vector<CondFactorSpec>& specs,
                                                 const RealizedFactors& rf, CondRegime regime,
                                                 double p, Rng& rng) {
  ConditionVector cv;
  const bool quant = regime_is_quantized(regime);
  const bool drop = regime_has_dropout(regime);
  for (size_t f = 0; f < specs.size(); ++f) {
    ConditionVector::Entry e;
    e.label = rf.tuple.at(f);
    if (!quant && specs[f].kind != CondKind::kLabelOnly) {
      e.quantized = false;
      e.value = specs[f].kind == CondKind::kHue ? rf.hue : rf.size_frac;
    }
    if (drop && rng.bernoulli(p)) e.present = false;
    cv.entries.push_back(e);
  }
  return cv;
}

}  // namespace cgl
