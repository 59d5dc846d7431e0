// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cgl/eval/probe.hpp"
#include "cgl/objectives/sample.hpp"

namespace cgl {

// one evaluation pass over every composition
struct EvalPoint {
  long step = 0;
  std::map<std::string, double> per_composition;  // tuple string -> correct rate
  std::map<int, double> per_level;                // novelty level -> mean rate
  int n_per_composition = 0;
};

struct ProbeReport {
  std::vector<EvalPoint> series;
  uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json js = nlohmann::json::array();
    for (const auto& p : series) {
      nlohmann::json jp;
      jp["step"] = p.step;
      jp["n"] = p.n_per_composition;
      jp["per_composition"] = p.per_composition;
      nlohmann::json jl;
      for (const auto& [lvl, v] : p.per_level) jl[std::to_string(lvl)] = v;
      jp["per_level"] = jl;
      js.push_back(jp);
    }
    return {{"seed", seed}, {"series", js}};
  }

  static ProbeReport from_json(const nlohmann::json& j) {
    ProbeReport r;
    r.seed = j.value("seed", uint64_t{0});
    for (const auto& jp : j.at("series")) {
      EvalPoint p;
      p.step = jp.at("step");
      p.n_per_composition = jp.at("n");
      for (auto it = jp.at("per_composition").begin(); it != jp.at("per_composition").end(); ++it)
        p.per_composition[it.key()] = it.value();
      for (auto it = jp.at("per_level").begin(); it != jp.at("per_level").end(); ++it)
        p.per_level[std::stoi(it.key())] = it.value();
      r.series.push_back(std::move(p));
    }
    return r;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("report: cannot write " + path);
    os << to_json().dump(2) << "\n";
  }
  static ProbeReport load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("report: cannot open " + path);
    nlohmann::json j;
    is >> j;
    return from_json(j);
  }
};

// conditioning for one target composition at generation time: all factors
// present, values drawn from the label's band when the model was trained on
// continuous conditioning
inline ConditionVector sample_eval_condition(const SpaceFile& sf,
                                             const std::vector<CondFactorSpec>& specs,
                                             const FactorTuple& t, bool quantized, Rng& rng) {
  RealizedFactors rf;
  rf.tuple = t;
  Realized real = draw_realization(sf.space, t, sf.render, rng, nullptr);
  rf.hue = real.hue;
  rf.size_frac = real.size_px / sf.render.canvas;
  return apply_conditioning_regime(specs, rf,
                                   quantized ? CondRegime::kQuantized : CondRegime::kFull, 0.0,
                                   rng);
}

// Generates n samples per composition, judges them with the probe, and
// aggregates correctness by novelty level.
template <class S>
EvalPoint eval_compositions(const Generator<S>& gen, const Tokenizer<S>& tok,
                            const SpaceFile& sf, const CompositionSplit& split,
                            int n_per_composition, const Probe<S>& probe, uint64_t seed,
                            long step_tag = 0) {
  if (tok.cfg.kind == TokenizerKind::kVqvae && gen.cfg.K != tok.cfg.K)
    throw std::runtime_error("eval: tokenizer/model vocabulary mismatch");
  if (gen.cfg.tokens() != tok.cfg.tokens())
    throw std::runtime_error("eval: tokenizer/model grid mismatch");
  probe.require_gate();
  auto specs = cond_specs_from(sf);
  const bool quantized = regime_is_quantized(gen.cfg.regime);

  EvalPoint point;
  point.step = step_tag;
  point.n_per_composition = n_per_composition;
  std::map<int, std::pair<double, int>> level_acc;
  for (const auto& t : enumerate_compositions(sf.space)) {
    double rate = 0.0;
    if (n_per_composition > 0) {
      Rng rng = Rng(seed).stream("eval/" + tuple_str(t));
      CondBatch cb;
      for (int i = 0; i < n_per_composition; ++i)
        cb.cond.push_back(sample_eval_condition(sf, specs, t, quantized, rng));
      Tensor<S> images = generate_images(gen, tok, cb, rng);
      auto probs = probe.probs(images);
      int correct = 0;
      for (int i = 0; i < n_per_composition; ++i)
        correct += judge_sample(probs, i, t).correct ? 1 : 0;
      rate = static_cast<double>(correct) / n_per_composition;
      point.per_composition[tuple_str(t)] = rate;
    }
    if (n_per_composition > 0) {
      auto& [sum, count] = level_acc[split.level(t)];
      sum += rate;
      ++count;
    }
  }
  for (const auto& [lvl, sc] : level_acc) point.per_level[lvl] = sc.first / sc.second;
  return point;
}

}  // namespace cgl
