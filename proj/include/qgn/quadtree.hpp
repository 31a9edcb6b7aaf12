#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "qgn/mask.hpp"

namespace qgn {

inline constexpr int kDefaultLevels = 5;

/// Row-major grid of labels for one pyramid level.
struct LabelGrid {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<ClassId> cells;

  ClassId at(std::uint32_t x, std::uint32_t y) const { return cells[std::size_t{y} * width + x]; }
  bool operator==(const LabelGrid&) const = default;
};

/// Complete label pyramid. levels[0] is the mask itself; levels[l+1] merges
/// disjoint 2x2 blocks of levels[l].
struct TPyramid {
  std::uint32_t num_classes = 0;
  std::vector<LabelGrid> levels;

  int max_level() const { return static_cast<int>(levels.size()) - 1; }
  const LabelGrid& level(int l) const { return levels.at(static_cast<std::size_t>(l)); }
};

struct QuadRecord {
  std::uint8_t level = 0;
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  ClassId value = 0;

  bool operator==(const QuadRecord&) const = default;
};

/// Canonical record order: level descending, then y, then x.
bool canonical_less(const QuadRecord& a, const QuadRecord& b);

struct Quadtree {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t num_classes = 0;
  std::uint8_t max_level = 0;
  std::vector<QuadRecord> records;  // canonical order

  bool operator==(const Quadtree&) const = default;
};

struct SparsityStats {
  std::vector<double> pixel_percent;  // indexed by level, percent of pixels resolved there
  double ratio_percent = 0.0;         // records / pixels, in percent
};

/// Returns the common value when all four are equal, otherwise composite.
ClassId merge_patch(const std::array<ClassId, 4>& patch);

TPyramid build_t_pyramid(const Mask& mask, int levels = kDefaultLevels);

Quadtree quadtree_encode(const TPyramid& tp);

/// Rebuilds the dense mask; throws StructureError unless the records tile
/// the grid exactly once with non-composite values.
Mask quadtree_decode(const Quadtree& qt, std::uint32_t width, std::uint32_t height);

ClassId query(const TPyramid& tp, int level, std::uint32_t x, std::uint32_t y);

SparsityStats sparsity_stats(const Quadtree& qt, std::uint32_t width, std::uint32_t height);

/// Storage ratio (percent) for per-level pixel percentages listed from the
/// coarsest level down to level 0: sum_l p_l / 4^l.
double ratio_from_percentages(std::span<const double> coarse_to_fine_percent);

// QTR1 codec. Layout (little-endian): "QTR1", u32 W, u32 H, u32 k, u8 L,
// u32 record count, then records (u8 level, u32 x, u32 y, u16 value) in
// canonical order.
std::vector<std::uint8_t> encode_quadtree(const Quadtree& qt);
Quadtree decode_quadtree(std::span<const std::uint8_t> bytes);
Quadtree read_quadtree(const std::filesystem::path& path);
void write_quadtree(const Quadtree& qt, const std::filesystem::path& path);

}  // namespace qgn
