// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace cgl {

using FactorTuple = std::vector<int>;

struct Factor {
  std::string name;
  std::vector<std::string> values;
  std::vector<int> supergroup;  // 0/1 per value; empty when undefined
  int cardinality() const { return static_cast<int>(values.size()); }
};

struct FactorSpace {
  std::vector<Factor> factors;

  int num_factors() const { return static_cast<int>(factors.size()); }

  int64_t num_compositions() const {
    int64_t n = 1;
    for (const auto& f : factors) n *= f.cardinality();
    return n;
  }

  void validate() const {
    std::set<std::string> names;
    for (const auto& f : factors) {
      if (f.cardinality() < 2)
        throw std::runtime_error("factor '" + f.name + "' needs cardinality >= 2");
      if (!names.insert(f.name).second)
        throw std::runtime_error("duplicate factor name '" + f.name + "'");
      if (!f.supergroup.empty()) {
        if (f.supergroup.size() != f.values.size())
          throw std::runtime_error("factor '" + f.name + "' supergroup size mismatch");
        for (int s : f.supergroup)
          if (s != 0 && s != 1)
            throw std::runtime_error("factor '" + f.name + "' supergroup values must be 0/1");
      }
    }
  }

  bool valid_tuple(const FactorTuple& t) const {
    if (static_cast<int>(t.size()) != num_factors()) return false;
    for (int i = 0; i < num_factors(); ++i)
      if (t[i] < 0 || t[i] >= factors[i].cardinality()) return false;
    return true;
  }

  int64_t tuple_index(const FactorTuple& t) const {
    int64_t idx = 0;
    for (int i = 0; i < num_factors(); ++i) idx = idx * factors[i].cardinality() + t[i];
    return idx;
  }

  FactorTuple tuple_at(int64_t idx) const {
    FactorTuple t(num_factors());
    for (int i = num_factors() - 1; i >= 0; --i) {
      t[i] = static_cast<int>(idx % factors[i].cardinality());
      idx /= factors[i].cardinality();
    }
    return t;
  }

  int factor_index(const std::string& name) const {
    for (int i = 0; i < num_factors(); ++i)
      if (factors[i].name == name) return i;
    return -1;
  }
};

inline std::string tuple_str(const FactorTuple& t) {
  std::string s;
  for (size_t i = 0; i < t.size(); ++i) s += (i ? "-" : "") + std::to_string(t[i]);
  return s;
}

inline FactorTuple parse_tuple(const std::string& s) {
  FactorTuple t;
  // accepts "0-1-0" and compact "010"
  if (s.find('-') == std::string::npos) {
    for (char c : s) {
      if (c < '0' || c > '9') throw std::runtime_error("bad tuple string '" + s + "'");
      t.push_back(c - '0');
    }
  } else {
    size_t pos = 0;
    while (pos <= s.size()) {
      size_t next = s.find('-', pos);
      if (next == std::string::npos) next = s.size();
      t.push_back(std::stoi(s.substr(pos, next - pos)));
      pos = next + 1;
    }
  }
  return t;
}

inline std::vector<FactorTuple> enumerate_compositions(const FactorSpace& space) {
  space.validate();
  std::vector<FactorTuple> out;
  out.reserve(space.num_compositions());
  for (int64_t i = 0; i < space.num_compositions(); ++i) out.push_back(space.tuple_at(i));
  return out;
}

inline int hamming(const FactorTuple& a, const FactorTuple& b) {
  int d = 0;
  for (size_t i = 0; i < a.size(); ++i) d += (a[i] != b[i]) ? 1 : 0;
  return d;
}

struct CompositionSplit {
  FactorSpace space;
  std::vector<FactorTuple> train;           // sorted, unique
  std::map<int64_t, int> level_by_index;    // tuple index -> novelty level

  int level(const FactorTuple& t) const { return level_by_index.at(space.tuple_index(t)); }
  bool is_train(const FactorTuple& t) const { return level(t) == 0; }
  int max_level() const {
    int m = 0;
    for (const auto& [_, l] : level_by_index) m = std::max(m, l);
    return m;
  }
};

// level(t) = min Hamming distance from t to the training set
inline CompositionSplit assign_levels(const FactorSpace& space,
                                      const std::vector<FactorTuple>& train) {
  if (train.empty()) throw std::runtime_error("empty training split");
  for (const auto& t : train)
    if (!space.valid_tuple(t)) throw std::runtime_error("invalid train tuple " + tuple_str(t));
  CompositionSplit split;
  split.space = space;
  split.train = train;
  std::sort(split.train.begin(), split.train.end());
  split.train.erase(std::unique(split.train.begin(), split.train.end()), split.train.end());
  for (const auto& t : enumerate_compositions(space)) {
    int best = space.num_factors();
    for (const auto& s : split.train) best = std::min(best, hamming(t, s));
    split.level_by_index[space.tuple_index(t)] = best;
  }
  return split;
}

// per-factor supergroup bits packed as an integer, factor 0 most significant
inline int assign_supergroup(const FactorSpace& space, const FactorTuple& t) {
  if (!space.valid_tuple(t)) throw std::runtime_error("invalid tuple " + tuple_str(t));
  int g = 0;
  for (int i = 0; i < space.num_factors(); ++i) {
    const Factor& f = space.factors[i];
    if (f.supergroup.empty())
      throw std::runtime_error("factor '" + f.name + "' has no supergroup partition");
    g = (g << 1) | f.supergroup[t[i]];
  }
  return g;
}

inline int supergroup_novelty(int group_bits) {
  int n = 0;
  while (group_bits) {
    n += group_bits & 1;
    group_bits >>= 1;
  }
  return n;
}

}  // namespace cgl
