// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cgl/core/optim.hpp"
#include "cgl/core/serialize.hpp"
#include "cgl/dataset/loader.hpp"

namespace cgl {

struct ProbeConfig {
  int channels = 32;
  long steps = 1200;
  int batch = 64;
  double lr = 1e-3;
  uint64_t seed = 0;
  int image_size = 32;
  double heldout_frac = 0.1;
  double gate_threshold = 0.99;  // per-factor held-out accuracy before use

  nlohmann::json to_json() const {
    return {{"channels", channels}, {"steps", steps},
            {"batch", batch},       {"lr", lr},
            {"seed", seed},         {"image_size", image_size},
            {"heldout_frac", heldout_frac}, {"gate_threshold", gate_threshold}};
  }
  static ProbeConfig from_json(const nlohmann::json& j) {
    ProbeConfig c;
    c.channels = j.value("channels", 32);
    c.steps = j.value("steps", 1200L);
    c.batch = j.value("batch", 64);
    c.lr = j.value("lr", 1e-3);
    c.seed = j.value("seed", uint64_t{0});
    c.image_size = j.value("image_size", 32);
    c.heldout_frac = j.value("heldout_frac", 0.1);
    c.gate_threshold = j.value("gate_threshold", 0.99);
    return c;
  }
};

template <class S>
struct JudgeResult {
  bool correct = false;
  std::vector<std::vector<double>> probs;  // per factor, per value
};

// Residual conv classifier: stem, three residual blocks with stride-2
// transitions, global average pooling, one linear head per factor.
template <class S>
class Probe {
 public:
  ProbeConfig cfg;
  std::vector<std::string> factor_names;
  std::vector<int> cardinalities;
  std::vector<double> heldout_acc;  // per factor, measured after training
  ParamStore<S> params;

  Probe(ProbeConfig config, std::vector<std::string> names, std::vector<int> cards)
      : cfg(config), factor_names(std::move(names)), cardinalities(std::move(cards)) {
    const Rng rng(cfg.seed);
    const int c = cfg.channels;
    stem_ = Conv2d<S>(params, rng, "probe.stem", 3, c, 3, 1, 1);
    for (int b = 0; b < 3; ++b) {
      const std::string p = "probe.block" + std::to_string(b);
      blocks_.push_back({Conv2d<S>(params, rng, p + ".c1", c, c, 3, 1, 1),
                         Conv2d<S>(params, rng, p + ".c2", c, c, 3, 1, 1)});
      downs_.push_back(Conv2d<S>(params, rng, p + ".down", c, c, 3, 2, 1));
    }
    for (size_t f = 0; f < cardinalities.size(); ++f)
      heads_.emplace_back(params, rng, "probe.head" + std::to_string(f), c, cardinalities[f]);
  }

  // pooled penultimate features [B, channels]
  Var<S> features_graph(Graph<S>& g, const Tensor<S>& images) const {
    Var<S> x = gelu(g, stem_.fwd(g, g.constant(images)));
    for (size_t b = 0; b < blocks_.size(); ++b) {
      Var<S> h = gelu(g, blocks_[b].c1.fwd(g, x));
      h = blocks_[b].c2.fwd(g, h);
      x = gelu(g, add(g, x, h));  // residual
      x = gelu(g, downs_[b].fwd(g, x));
    }
    return mean_spatial(g, x);
  }

  std::vector<Var<S>> logits_graph(Graph<S>& g, const Tensor<S>& images) const {
    Var<S> feat = features_graph(g, images);
    std::vector<Var<S>> out;
    for (const auto& h : heads_) out.push_back(h.fwd(g, feat));
    return out;
  }

  // per-factor probability tables for a batch (frozen surface)
  std::vector<Tensor<S>> probs(const Tensor<S>& images) const {
    Graph<S> g;
    auto logits = logits_graph(g, images);
    std::vector<Tensor<S>> out;
    for (size_t f = 0; f < logits.size(); ++f) {
      Tensor<S> p = logits[f]->value.clone();
      for (int64_t r = 0; r < p.rows(); ++r) softmax_inplace(p.data() + r * p.cols(), p.cols());
      out.push_back(std::move(p));
    }
    return out;
  }

  Tensor<S> features(const Tensor<S>& images) const {
    Graph<S> g;
    return features_graph(g, images)->value.clone();
  }

  void require_gate() const {
    if (heldout_acc.size() != cardinalities.size())
      throw std::runtime_error("probe: not trained (no held-out accuracy recorded)");
    for (size_t f = 0; f < heldout_acc.size(); ++f)
      if (heldout_acc[f] < cfg.gate_threshold)
        throw std::runtime_error("probe: factor '" + factor_names[f] +
                                 "' held-out accuracy " + std::to_string(heldout_acc[f]) +
                                 " below gate " + std::to_string(cfg.gate_threshold));
  }

  void save(const std::string& path) const {
    nlohmann::json j = cfg.to_json();
    j["factor_names"] = factor_names;
    j["cardinalities"] = cardinalities;
    j["heldout_acc"] = heldout_acc;
    save_checkpoint(path, j, params);
  }

  static Probe load(const std::string& path) {
    nlohmann::json j = load_checkpoint_config(path);
    Probe p(ProbeConfig::from_json(j), j.at("factor_names").get<std::vector<std::string>>(),
            j.at("cardinalities").get<std::vector<int>>());
    p.heldout_acc = j.value("heldout_acc", std::vector<double>{});
    load_checkpoint(path, p.params);
    return p;
  }

 private:
  struct ResBlock {
    Conv2d<S> c1, c2;
  };
  Conv2d<S> stem_;
  std::vector<ResBlock> blocks_;
  std::vector<Conv2d<S>> downs_;
  std::vector<Linear<S>> heads_;
};

// a composition is judged correct iff every factor's probability of the
// target value is at least 0.5 (and the argmax for factors with more than
// two values)
template <class S>
JudgeResult<S> judge_sample(const std::vector<Tensor<S>>& factor_probs, int row,
                            const FactorTuple& target) {
  JudgeResult<S> out;
  out.correct = true;
  for (size_t f = 0; f < factor_probs.size(); ++f) {
    const int card = static_cast<int>(factor_probs[f].cols());
    std::vector<double> p(card);
    double mx = 0.0;
    for (int v = 0; v < card; ++v) {
      p[v] = factor_probs[f][row * card + v];
      mx = std::max(mx, p[v]);
    }
    const double tp = p[target.at(f)];
    bool ok = tp >= 0.5;
    if (card > 2) ok = ok && tp >= mx;
    out.correct = out.correct && ok;
    out.probs.push_back(std::move(p));
  }
  return out;
}

template <class S>
JudgeResult<S> judge_sample(const Probe<S>& probe, const Tensor<S>& image,
                            const FactorTuple& target) {
  Tensor<S> batch = image.reshaped({1, image.shape[0], image.shape[1], image.shape[2]});
  return judge_sample(probe.probs(batch), 0, target);
}

template <class S>
struct ProbeTrainResult {
  std::string checkpoint_path;
  std::vector<double> heldout_acc;
};

// Trains the probe on a manifest covering every composition (including
// held-out ones); errors out listing any missing compositions.
template <class S>
ProbeTrainResult<S> train_probe(const DatasetManifest& manifest, const FactorSpace& space,
                                ProbeConfig cfg, const std::string& out_dir,
                                bool shuffle_labels = false) {
  namespace fs = std::filesystem;
  if (manifest.records.empty()) throw std::runtime_error("train_probe: empty manifest");
  std::map<int64_t, int> seen;
  for (const auto& r : manifest.records) ++seen[space.tuple_index(r.tuple)];
  std::string missing;
  for (const auto& t : enumerate_compositions(space))
    if (!seen.count(space.tuple_index(t))) missing += (missing.empty() ? "" : ", ") + tuple_str(t);
  if (!missing.empty())
    throw std::runtime_error("train_probe: manifest missing compositions: " + missing);

  std::vector<std::string> names;
  std::vector<int> cards;
  for (const auto& f : space.factors) {
    names.push_back(f.name);
    cards.push_back(f.cardinality());
  }
  Probe<S> probe(cfg, names, cards);
  Tensor<S> all = load_images<S>(manifest);
  const int total = all.shape[0];
  const int heldout = std::max(1, static_cast<int>(total * cfg.heldout_frac));
  const int train_n = std::max(1, total - heldout);

  // fixed shuffle so the held-out tail is composition-balanced in expectation
  std::vector<int> order(total);
  for (int i = 0; i < total; ++i) order[i] = i;
  Rng shuffle_rng(cfg.seed ^ 0x5157ull);
  for (int i = total - 1; i > 0; --i) std::swap(order[i], order[shuffle_rng.randint(i + 1)]);

  std::vector<FactorTuple> labels(total);
  for (int i = 0; i < total; ++i) labels[i] = manifest.records[i].tuple;
  if (shuffle_labels) {
    Rng lr(cfg.seed ^ 0x77ull);
    for (int i = total - 1; i > 0; --i) std::swap(labels[i], labels[lr.randint(i + 1)]);
  }

  Adam<S> opt(probe.params, cfg.lr);
  Rng data_rng = Rng(cfg.seed).stream("probe/data");
  const int B = std::min(cfg.batch, train_n);
  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx(B);
    for (int i = 0; i < B; ++i) idx[i] = order[data_rng.randint(train_n)];
    Tensor<S> batch = slice_batch(all, idx);
    probe.params.zero_grad();
    Graph<S> g;
    auto logits = probe.logits_graph(g, batch);
    Var<S> loss = nullptr;
    for (size_t f = 0; f < logits.size(); ++f) {
      std::vector<int> tgt(B);
      for (int i = 0; i < B; ++i) tgt[i] = labels[idx[i]][f];
      Var<S> ce = cross_entropy_mean(g, logits[f], tgt);
      loss = loss ? add(g, loss, ce) : ce;
    }
    if (!std::isfinite(static_cast<double>(loss->value[0])))
      throw std::runtime_error("train_probe: loss diverged at step " + std::to_string(step));
    g.backward(loss);
    opt.step();
  }

  // held-out accuracy per factor
  probe.heldout_acc.assign(cards.size(), 0.0);
  int counted = 0;
  for (int base = train_n; base < total; base += 128) {
    const int count = std::min(128, total - base);
    std::vector<int> idx(count);
    for (int i = 0; i < count; ++i) idx[i] = order[base + i];
    Tensor<S> batch = slice_batch(all, idx);
    auto probs = probe.probs(batch);
    for (int i = 0; i < count; ++i)
      for (size_t f = 0; f < cards.size(); ++f) {
        int best = 0;
        for (int v = 1; v < cards[f]; ++v)
          if (probs[f][i * cards[f] + v] > probs[f][i * cards[f] + best]) best = v;
        probe.heldout_acc[f] += best == labels[idx[i]][f] ? 1.0 : 0.0;
      }
    counted += count;
  }
  for (auto& a : probe.heldout_acc) a /= std::max(1, counted);

  fs::create_directories(out_dir);
  ProbeTrainResult<S> out;
  out.checkpoint_path = (fs::path(out_dir) / "probe.ckpt").string();
  out.heldout_acc = probe.heldout_acc;
  probe.save(out.checkpoint_path);
  return out;
}

}  // namespace cgl
