// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "cgl/core/tensor.hpp"

namespace cgl {

// labeled real samples with L2-normalized features
template <class S>
struct RetrievalGallery {
  Tensor<S> features;       // [G, D], rows unit-norm
  std::vector<int> labels;  // composition index per row
  int num_classes = 0;

  void validate() const {
    if (features.rows() != static_cast<int64_t>(labels.size()))
      throw std::runtime_error("gallery: feature/label count mismatch");
    std::map<int, int> counts;
    for (int l : labels) ++counts[l];
    if (static_cast<int>(counts.size()) != num_classes)
      throw std::runtime_error("gallery: class count mismatch");
    const int first = counts.begin()->second;
    for (const auto& [cls, n] : counts)
      if (n != first)
        throw std::runtime_error("gallery: unbalanced class " + std::to_string(cls));
  }
};

template <class S>
void l2_normalize_rows(Tensor<S>& x) {
  const int64_t rows = x.rows(), cols = x.cols();
  for (int64_t r = 0; r < rows; ++r) {
    double norm = 0.0;
    for (int64_t j = 0; j < cols; ++j) norm += static_cast<double>(x[r * cols + j]) * x[r * cols + j];
    norm = std::sqrt(std::max(norm, 1e-24));
    for (int64_t j = 0; j < cols; ++j) x[r * cols + j] = static_cast<S>(x[r * cols + j] / norm);
  }
}

// CRA_k per generated item: the fraction of its k nearest gallery neighbors
// (cosine distance on unit-norm features) whose label equals the item's
// target; averaged over items targeting each composition.
template <class S>
std::map<int, double> cra(const Tensor<S>& generated_features,
                          const std::vector<int>& target_labels,
                          const RetrievalGallery<S>& gallery, int k) {
  gallery.validate();
  if (k < 1 || k > gallery.features.rows())
    throw std::runtime_error("cra: k must be in [1, gallery size]");
  if (generated_features.rows() != static_cast<int64_t>(target_labels.size()))
    throw std::runtime_error("cra: feature/label count mismatch");
  const int64_t G = gallery.features.rows();
  const int64_t D = gallery.features.cols();
  if (generated_features.cols() != D) throw std::runtime_error("cra: feature dim mismatch");

  std::map<int, std::pair<double, int>> acc;  // label -> (sum, count)
  for (int64_t i = 0; i < generated_features.rows(); ++i) {
    // cosine similarity to every gallery row
    std::vector<std::pair<double, int>> sims(G);
    for (int64_t gidx = 0; gidx < G; ++gidx) {
      double dot = 0.0;
      for (int64_t j = 0; j < D; ++j)
        dot += static_cast<double>(generated_features[i * D + j]) * gallery.features[gidx * D + j];
      sims[gidx] = {dot, static_cast<int>(gidx)};
    }
    std::partial_sort(sims.begin(), sims.begin() + k, sims.end(),
                      [](const auto& a, const auto& b) {
                        return a.first != b.first ? a.first > b.first : a.second < b.second;
                      });
    int hits = 0;
    for (int q = 0; q < k; ++q) hits += gallery.labels[sims[q].second] == target_labels[i];
    auto& [sum, count] = acc[target_labels[i]];
    sum += static_cast<double>(hits) / k;
    ++count;
  }
  std::map<int, double> out;
  for (const auto& [label, sc] : acc) out[label] = sc.first / sc.second;
  return out;
}

inline double cra_mean(const std::map<int, double>& per_comp) {
  double sum = 0.0;
  for (const auto& [_, v] : per_comp) sum += v;
  return per_comp.empty() ? 0.0 : sum / per_comp.size();
}

}  // namespace cgl
