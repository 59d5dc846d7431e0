// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "cgl/dataset/manifest.hpp"

using namespace cgl;

namespace {

FactorSpace make_space(const std::vector<int>& cards) {
  FactorSpace s;
  for (size_t i = 0; i < cards.size(); ++i) {
    Factor f;
    f.name = "f" + std::to_string(i);
    for (int v = 0; v < cards[i]; ++v) f.values.push_back("v" + std::to_string(v));
    s.factors.push_back(f);
  }
  return s;
}

FactorSpace shapes3d_space() {
  FactorSpace s;
  Factor color{"color",
               {"red", "orange", "yellow", "lime green", "green", "cyan", "blue", "indigo",
                "purple", "pink"},
               {0, 0, 0, 0, 0, 0, 0, 1, 1, 1}};
  Factor shape{"shape", {"cube", "cylinder", "sphere"}, {0, 0, 1}};
  Factor size{"size", {"0", "1", "2", "3", "4", "5", "6", "7"}, {0, 0, 0, 0, 0, 0, 1, 1}};
  s.factors = {color, shape, size};
  return s;
}

TEST(FactorSpace, EnumerateCounts) {
  EXPECT_EQ(enumerate_compositions(make_space({2, 2, 2})).size(), 8u);
  EXPECT_EQ(enumerate_compositions(make_space({4})).size(), 4u);
  EXPECT_EQ(enumerate_compositions(shapes3d_space()).size(), 240u);
}

TEST(FactorSpace, EnumerateLexicographicNoDuplicates) {
  auto all = enumerate_compositions(make_space({2, 3}));
  ASSERT_EQ(all.size(), 6u);
  for (size_t i = 1; i < all.size(); ++i) EXPECT_LT(all[i - 1], all[i]);
  EXPECT_EQ(all.front(), (FactorTuple{0, 0}));
  EXPECT_EQ(all.back(), (FactorTuple{1, 2}));
}

TEST(Levels, SpecExamples) {
  auto space = make_space({2, 2, 2});
  auto split = assign_levels(space, {{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {1, 0, 0}});
  EXPECT_EQ(split.level({0, 1, 1}), 1);
  EXPECT_EQ(split.level({1, 1, 1}), 2);
  for (const auto& t : split.train) EXPECT_EQ(split.level(t), 0);
  auto full = assign_levels(space, enumerate_compositions(space));
  for (const auto& t : enumerate_compositions(space)) EXPECT_EQ(full.level(t), 0);
  EXPECT_THROW(assign_levels(space, {}), std::runtime_error);
}

TEST(Levels, MatchesBruteForceOnRandomSpaces) {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<int> cards;
    const int nf = 1 + rng.randint(4);
    for (int i = 0; i < nf; ++i) cards.push_back(2 + rng.randint(3));
    auto space = make_space(cards);
    auto all = enumerate_compositions(space);
    std::vector<FactorTuple> train;
    for (const auto& t : all)
      if (rng.bernoulli(0.3)) train.push_back(t);
    if (train.empty()) train.push_back(all[rng.randint(static_cast<int>(all.size()))]);
    auto split = assign_levels(space, train);
    for (const auto& t : all) {
      int best = nf;
      for (const auto& s : train) {
        int d = 0;
        for (int i = 0; i < nf; ++i) d += t[i] != s[i];
        best = std::min(best, d);
      }
      EXPECT_EQ(split.level(t), best);
    }
  }
}

TEST(Supergroups, PaperAssignments) {
  auto space = shapes3d_space();
  // red cube size-2 -> all group-0 bits
  EXPECT_EQ(assign_supergroup(space, {0, 0, 2}), 0);
  // indigo sphere size-7 -> all group-1 bits
  EXPECT_EQ(assign_supergroup(space, {7, 2, 7}), 7);
  EXPECT_EQ(supergroup_novelty(7), 3);
  EXPECT_EQ(supergroup_novelty(0), 0);
  // constant-0 partitions
  auto zero = make_space({2, 2});
  for (auto& f : zero.factors) f.supergroup = {0, 0};
  for (const auto& t : enumerate_compositions(zero)) EXPECT_EQ(assign_supergroup(zero, t), 0);
  // missing partition errors
  auto nosg = make_space({2, 2});
  EXPECT_THROW(assign_supergroup(nosg, {0, 0}), std::runtime_error);
}

TEST(Render, DeterministicUnderSeed) {
  auto sf = default_shapes2d();
  Rng r1(5), r2(5), r3(6);
  auto a = render_sample(sf.space, {0, 0, 0}, sf.render, r1);
  auto b = render_sample(sf.space, {0, 0, 0}, sf.render, r2);
  auto c = render_sample(sf.space, {0, 0, 0}, sf.render, r3);
  EXPECT_EQ(a.image.rgb, b.image.rgb);
  EXPECT_NE(a.image.rgb, c.image.rgb);
}

TEST(Render, Tuple000IsLargeRedCircle) {
  auto sf = default_shapes2d();
  Rng rng(1);
  auto r = render_sample(sf.space, {0, 0, 0}, sf.render, rng);
  EXPECT_EQ(r.shape_label, "circle");
  // hue in the red band (wraps around 0)
  const Band red{0.95, 1.05};
  EXPECT_TRUE(red.contains_mod1(r.realized.hue));
  EXPECT_GE(r.realized.size_px, 0.40 * 32);
  EXPECT_LE(r.realized.size_px, 0.50 * 32);
  // dominant channel of object pixels should be red: spot check center pixel
  const int c = 16;
  const size_t off = (static_cast<size_t>(c) * 32 + c) * 3;
  EXPECT_GT(static_cast<int>(r.image.rgb[off]), static_cast<int>(r.image.rgb[off + 2]));
}

TEST(Render, HuesStayInsideBand) {
  auto sf = default_shapes2d();
  const Band red{0.95, 1.05};
  const Band blue{0.55, 0.65};
  for (int i = 0; i < 1000; ++i) {
    Rng r(1000 + i);
    auto a = render_sample(sf.space, {0, 0, 0}, sf.render, r);
    EXPECT_TRUE(red.contains_mod1(a.realized.hue)) << a.realized.hue;
    Rng r2(5000 + i);
    auto b = render_sample(sf.space, {1, 1, 1}, sf.render, r2);
    EXPECT_TRUE(blue.contains_mod1(b.realized.hue)) << b.realized.hue;
  }
}

TEST(Render, BandValidationRejectsOverlap) {
  auto sf = default_shapes2d();
  sf.render.hue_bands["color"] = {{0.1, 0.3}, {0.2, 0.4}};
  EXPECT_THROW(sf.render.validate(sf.space), std::runtime_error);
}

TEST(Dataset, BuildCountsAndReRender) {
  namespace fs = std::filesystem;
  auto sf = default_shapes2d();
  auto split = assign_levels(sf.space, {{0, 0, 0}, {0, 1, 1}, {1, 0, 1}, {1, 1, 0}});
  const std::string dir = (fs::temp_directory_path() / "cgl_ds_test").string();
  fs::remove_all(dir);
  auto built = build_dataset(sf.space, split, 3, 2, sf.render, 99, dir);
  EXPECT_EQ(built.train.records.size(), 4u * 3u);
  EXPECT_EQ(built.probe.records.size(), 8u * 2u);

  // reload and re-render from recorded realized values: bit-exact
  auto loaded = load_manifest(built.train_manifest_path);
  ASSERT_EQ(loaded.records.size(), 12u);
  for (const auto& rec : loaded.records) {
    ImageU8 on_disk = read_png_rgb8(loaded.resolve(rec));
    ImageU8 again = render_from_realized(rec.shape_label, rec.realized, sf.render);
    EXPECT_EQ(on_disk.rgb, again.rgb) << rec.path;
  }

  // every record's realized values lie inside the label's bands
  for (const auto& rec : loaded.records) {
    const Band& hb = sf.render.hue_bands.at("color")[rec.tuple[1]];
    const Band& sb = sf.render.size_bands.at("size")[rec.tuple[2]];
    EXPECT_TRUE(hb.contains_mod1(rec.realized.hue));
    EXPECT_TRUE(sb.contains(rec.realized.size_px / sf.render.canvas));
  }
  fs::remove_all(dir);
}

TEST(Dataset, ZeroCountProducesEmptyManifest) {
  namespace fs = std::filesystem;
  auto sf = default_shapes2d();
  auto split = assign_levels(sf.space, {{0, 0, 0}});
  const std::string dir = (fs::temp_directory_path() / "cgl_ds_empty").string();
  fs::remove_all(dir);
  auto built = build_dataset(sf.space, split, 0, 0, sf.render, 1, dir);
  EXPECT_TRUE(built.train.records.empty());
  EXPECT_TRUE(built.probe.records.empty());
  size_t files = 0;
  for (auto it = fs::recursive_directory_iterator(dir); it != fs::recursive_directory_iterator();
       ++it)
    if (it->is_regular_file() && it->path().extension() == ".png") ++files;
  EXPECT_EQ(files, 0u);
  fs::remove_all(dir);
}

TEST(Dataset, TupleStringRoundTrip) {
  EXPECT_EQ(tuple_str({0, 1, 0}), "0-1-0");
  EXPECT_EQ(parse_tuple("0-1-0"), (FactorTuple{0, 1, 0}));
  EXPECT_EQ(parse_tuple("010"), (FactorTuple{0, 1, 0}));
  EXPECT_EQ(parse_tuple("9-2-7"), (FactorTuple{9, 2, 7}));
}

}  // namespace
