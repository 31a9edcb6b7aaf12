#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>

#include "oracles.hpp"
#include "qgn/errors.hpp"
#include "qgn/quadtree.hpp"

using namespace qgn;

namespace {

std::uint64_t covered_area(const Quadtree& qt) {
  std::uint64_t a = 0;
  for (const auto& r : qt.records) a += std::uint64_t{1} << (2 * r.level);
  return a;
}

struct TableRow {
  const char* name;
  std::array<double, 6> percent;  // level 5 first
  double ratio;
};

// Published per-level percentages and storage ratios.
constexpr TableRow kTable[] = {
    {"cityscapes-train", {66.34, 14.21, 9.18, 5.52, 3.02, 1.70}, 3.07},
    {"cityscapes-val", {65.12, 14.44, 9.53, 5.85, 3.22, 1.81}, 3.25},
    {"sun-train-13", {56.26, 18.22, 11.78, 7.09, 4.20, 2.43}, 4.24},
    {"sun-val-13", {55.57, 18.50, 11.98, 7.22, 4.27, 2.46}, 4.29},
    {"sun-train-37", {56.11, 18.27, 11.82, 7.12, 4.22, 2.44}, 4.25},
    {"sun-val-37", {55.40, 18.54, 12.03, 7.25, 4.29, 2.47}, 4.31},
    {"ade-train", {47.48, 21.40, 14.44, 8.68, 5.05, 2.93}, 5.09},
    {"ade-val", {47.25, 21.44, 14.49, 8.74, 5.10, 2.96}, 5.14},
};

}  // namespace

TEST(Merge, Patches) {
  EXPECT_EQ(merge_patch({3, 3, 3, 3}), 3);
  EXPECT_EQ(merge_patch({1, 2, 1, 1}), 0);
  EXPECT_EQ(merge_patch({0, 0, 0, 0}), 0);
  EXPECT_EQ(merge_patch({5, 5, 5, 0}), 0);
}

TEST(Pyramid, Uniform) {
  TPyramid tp = build_t_pyramid(Mask{4, 4, 3, 2}, 2);
  ASSERT_EQ(tp.max_level(), 2);
  EXPECT_EQ(tp.level(1).cells, std::vector<ClassId>(4, 2));
  EXPECT_EQ(tp.level(2).cells, std::vector<ClassId>(1, 2));
}

TEST(Pyramid, OneDeviantPixel) {
  Mask m{4, 4, 3, 2};
  m.at(3, 0) = 1;
  TPyramid tp = build_t_pyramid(m, 2);
  EXPECT_EQ(tp.level(1).cells, (std::vector<ClassId>{2, 0, 2, 2}));
  EXPECT_EQ(tp.level(2).cells, std::vector<ClassId>{0});
}

TEST(Pyramid, IndivisibleIsShapeError) {
  EXPECT_THROW(build_t_pyramid(Mask{3, 4, 2}, 1), ShapeError);
  EXPECT_THROW(build_t_pyramid(Mask{32, 48, 2}, 5), ShapeError);
}

TEST(Pyramid, EveryCellMatchesBlockOracle) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Mask m = oracle::synthetic(64, 32, 5, 1 + s % 6, s);
    TPyramid tp = build_t_pyramid(m, 5);
    EXPECT_EQ(tp.level(0).cells, m.data);
    for (int l = 0; l <= 5; ++l)
      for (std::uint32_t y = 0; y < tp.level(l).height; ++y)
        for (std::uint32_t x = 0; x < tp.level(l).width; ++x)
          ASSERT_EQ(tp.level(l).at(x, y), oracle::block_label(m, l, x, y)) << l << " " << x << " " << y;
  }
}

TEST(Encode, UniformIsRootLeaf) {
  Quadtree qt = quadtree_encode(build_t_pyramid(Mask{32, 32, 4, 3}, 5));
  ASSERT_EQ(qt.records.size(), 1u);
  EXPECT_EQ(qt.records[0], (QuadRecord{5, 0, 0, 3}));
}

TEST(Encode, LeftRightHalves) {
  Mask m{4, 4, 2, 1};
  for (std::uint32_t y = 0; y < 4; ++y)
    for (std::uint32_t x = 2; x < 4; ++x) m.at(x, y) = 2;
  Quadtree qt = quadtree_encode(build_t_pyramid(m, 2));
  std::vector<QuadRecord> want{{1, 0, 0, 1}, {1, 1, 0, 2}, {1, 0, 1, 1}, {1, 1, 1, 2}};
  EXPECT_EQ(qt.records, want);
}

TEST(Encode, EmissionRuleMatchesOracle) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    Mask m = oracle::synthetic(32, 64, 4, 4, 100 + s);
    Quadtree qt = quadtree_encode(build_t_pyramid(m, 4));
    std::vector<QuadRecord> want;
    for (int l = 4; l >= 0; --l)
      for (std::uint32_t y = 0; y < (64u >> l); ++y)
        for (std::uint32_t x = 0; x < (32u >> l); ++x) {
          int v = oracle::block_label(m, l, x, y);
          if (v == 0) continue;
          if (l < 4 && oracle::block_label(m, l + 1, x / 2, y / 2) != 0) continue;
          want.push_back({static_cast<std::uint8_t>(l), x, y, static_cast<ClassId>(v)});
        }
    EXPECT_EQ(qt.records, want);
    EXPECT_TRUE(std::is_sorted(qt.records.begin(), qt.records.end(), canonical_less));
  }
}

TEST(Decode, RootRecord) {
  Quadtree qt{32, 32, 3, 5, {{5, 0, 0, 3}}};
  EXPECT_EQ(quadtree_decode(qt, 32, 32), (Mask{32, 32, 3, 3}));
}

TEST(Decode, StructureErrors) {
  Quadtree overlap{4, 4, 2, 2, {{2, 0, 0, 1}, {0, 1, 1, 2}}};
  EXPECT_THROW(quadtree_decode(overlap, 4, 4), StructureError);
  Quadtree gap{4, 4, 2, 2, {{1, 0, 0, 1}, {1, 1, 0, 1}, {1, 0, 1, 1}}};
  EXPECT_THROW(quadtree_decode(gap, 4, 4), StructureError);
  Quadtree composite{2, 2, 2, 1, {{1, 0, 0, 0}}};
  EXPECT_THROW(quadtree_decode(composite, 2, 2), StructureError);
  Quadtree outside{2, 2, 2, 1, {{1, 1, 0, 1}}};
  EXPECT_THROW(quadtree_decode(outside, 2, 2), StructureError);
}

TEST(Decode, LosslessOnSyntheticMasks) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    std::mt19937_64 e(s);
    std::uint32_t w = 32 * (1 + e() % 4), h = 32 * (1 + e() % 4), k = 2 + e() % 20;
    Mask m = gen_synthetic(w, h, k, e() % 12, s);
    Quadtree qt = quadtree_encode(build_t_pyramid(m, 5));
    EXPECT_EQ(covered_area(qt), std::uint64_t{w} * h);
    EXPECT_EQ(quadtree_decode(qt, w, h), m);
  }
  Mask m = gen_synthetic(64, 64, 4, 3, 7);
  EXPECT_EQ(quadtree_decode(quadtree_encode(build_t_pyramid(m, 5)), 64, 64), m);
}

TEST(Decode, LosslessOnNoise) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Mask m = oracle::random_mask(16, 8, 1 + s % 3, s);
    Quadtree qt = quadtree_encode(build_t_pyramid(m, 3));
    EXPECT_EQ(quadtree_decode(qt, 16, 8), m);
  }
}

TEST(QuadtreeFile, RoundTrip) {
  auto dir = oracle::temp_dir("qtr");
  Mask m = gen_synthetic(96, 64, 7, 5, 3);
  Quadtree qt = quadtree_encode(build_t_pyramid(m, 5));
  write_quadtree(qt, dir / "a.qtr");
  auto bytes = read_file_bytes(dir / "a.qtr");
  EXPECT_EQ(bytes.size(), 4 + 12 + 1 + 4 + 11 * qt.records.size());
  EXPECT_EQ(read_quadtree(dir / "a.qtr"), qt);
  bytes[0] = 'X';
  EXPECT_THROW(decode_quadtree(bytes), FormatError);
  bytes[0] = 'Q';
  bytes.pop_back();
  EXPECT_THROW(decode_quadtree(bytes), FormatError);
}

TEST(Query, LevelsAndBounds) {
  Mask m = gen_synthetic(64, 32, 4, 5, 2);
  TPyramid tp = build_t_pyramid(m, 5);
  for (std::uint32_t y = 0; y < 32; ++y)
    for (std::uint32_t x = 0; x < 64; ++x) ASSERT_EQ(query(tp, 0, x, y), m.at(x, y));
  TPyramid uni = build_t_pyramid(Mask{64, 64, 3, 2}, 5);
  for (int l = 0; l <= 5; ++l) EXPECT_EQ(query(uni, l, (64u >> l) - 1, 0), 2);
  EXPECT_THROW(query(tp, 6, 0, 0), BoundsError);
  EXPECT_THROW(query(tp, -1, 0, 0), BoundsError);
  EXPECT_THROW(query(tp, 5, 2, 0), BoundsError);
}

TEST(Stats, PublishedRatios) {
  for (const auto& row : kTable) {
    double r = ratio_from_percentages(row.percent);
    EXPECT_NEAR(r, row.ratio, 0.03) << row.name;
  }
}

TEST(Stats, UniformMegapixel) {
  Quadtree qt = quadtree_encode(build_t_pyramid(Mask{1024, 1024, 2, 1}, 5));
  SparsityStats st = sparsity_stats(qt, 1024, 1024);
  EXPECT_EQ(qt.records.size(), 1024u);
  EXPECT_DOUBLE_EQ(st.pixel_percent[5], 100.0);
  EXPECT_DOUBLE_EQ(st.ratio_percent, 100.0 / 1024);
}

TEST(Stats, RatioIdentityAndPercentSum) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    Mask m = gen_synthetic(128, 64, 6, s % 10, s);
    Quadtree qt = quadtree_encode(build_t_pyramid(m, 5));
    SparsityStats st = sparsity_stats(qt, 128, 64);
    double sum = 0, ratio = 0;
    for (int l = 0; l <= 5; ++l) {
      sum += st.pixel_percent[l];
      ratio += st.pixel_percent[l] / std::pow(4.0, l);
    }
    EXPECT_NEAR(sum, 100.0, 1e-9);
    EXPECT_NEAR(st.ratio_percent, ratio, 1e-12);
    EXPECT_NEAR(st.ratio_percent, 100.0 * qt.records.size() / (128.0 * 64), 1e-12);
  }
}

TEST(Stats, DeviantPixelNeverShrinksTree) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::mt19937_64 e(s);
    Mask m{64, 64, 3, 1};
    std::size_t before = quadtree_encode(build_t_pyramid(m, 5)).records.size();
    m.at(e() % 64, e() % 64) = 2;
    EXPECT_GE(quadtree_encode(build_t_pyramid(m, 5)).records.size(), before);
  }
}
