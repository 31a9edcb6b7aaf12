#include "qgn/quadtree.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "qgn/errors.hpp"

namespace qgn {

bool canonical_less(const QuadRecord& a, const QuadRecord& b) {
  if (a.level != b.level) return a.level > b.level;
  if (a.y != b.y) return a.y < b.y;
  return a.x < b.x;
}

ClassId merge_patch(const std::array<ClassId, 4>& patch) {
  const ClassId a = patch[0];
  return (patch[1] == a && patch[2] == a && patch[3] == a) ? a : kComposite;
}

TPyramid build_t_pyramid(const Mask& mask, int levels) {
  if (levels < 0) throw ShapeError("level count must be >= 0");
  const std::uint32_t block = 1u << levels;
  if (mask.width % block != 0 || mask.height % block != 0) {
    throw ShapeError("mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                     " not divisible by 2^" + std::to_string(levels));
  }
  TPyramid tp;
  tp.num_classes = mask.num_classes;
  tp.levels.reserve(static_cast<std::size_t>(levels) + 1);
  tp.levels.push_back(LabelGrid{mask.width, mask.height, mask.data});
  for (int l = 0; l < levels; ++l) {
    const LabelGrid& fine = tp.levels.back();
    LabelGrid coarse{fine.width / 2, fine.height / 2, {}};
    coarse.cells.resize(std::size_t{coarse.width} * coarse.height);
    for (std::uint32_t y = 0; y < coarse.height; ++y) {
      for (std::uint32_t x = 0; x < coarse.width; ++x) {
        coarse.cells[std::size_t{y} * coarse.width + x] =
            merge_patch({fine.at(2 * x, 2 * y), fine.at(2 * x + 1, 2 * y), fine.at(2 * x, 2 * y + 1),
                         fine.at(2 * x + 1, 2 * y + 1)});
      }
    }
    tp.levels.push_back(std::move(coarse));
  }
  return tp;
}

Quadtree quadtree_encode(const TPyramid& tp) {
  if (tp.levels.empty()) throw ShapeError("empty pyramid");
  const int top = tp.max_level();
  Quadtree qt;
  qt.width = tp.levels[0].width;
  qt.height = tp.levels[0].height;
  qt.num_classes = tp.num_classes;
  qt.max_level = static_cast<std::uint8_t>(top);
  // Walking levels top-down and rows in order yields canonical order directly.
  for (int l = top; l >= 0; --l) {
    const LabelGrid& g = tp.levels[static_cast<std::size_t>(l)];
    const LabelGrid* parent = l < top ? &tp.levels[static_cast<std::size_t>(l) + 1] : nullptr;
    for (std::uint32_t y = 0; y < g.height; ++y) {
      for (std::uint32_t x = 0; x < g.width; ++x) {
        const ClassId v = g.at(x, y);
        if (v == kComposite) continue;
        if (parent && parent->at(x / 2, y / 2) != kComposite) continue;
        qt.records.push_back({static_cast<std::uint8_t>(l), x, y, v});
      }
    }
  }
  return qt;
}

Mask quadtree_decode(const Quadtree& qt, std::uint32_t width, std::uint32_t height) {
  Mask out(width, height, qt.num_classes, kComposite);
  std::uint64_t covered = 0;
  for (const QuadRecord& r : qt.records) {
    if (r.value == kComposite) throw StructureError("composite value in a leaf record");
    if (r.value > qt.num_classes) throw StructureError("record class exceeds num_classes");
    if (r.level > qt.max_level || r.level >= 32) throw StructureError("record level above max level");
    const std::uint64_t side = std::uint64_t{1} << r.level;
    const std::uint64_t x0 = r.x * side;
    const std::uint64_t y0 = r.y * side;
    if (x0 + side > width || y0 + side > height) throw StructureError("record outside the grid");
    for (std::uint64_t y = y0; y < y0 + side; ++y) {
      for (std::uint64_t x = x0; x < x0 + side; ++x) {
        ClassId& cell = out.at(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y));
        if (cell != kComposite) throw StructureError("overlapping records");
        cell = r.value;
      }
    }
    covered += side * side;
  }
  if (covered != std::uint64_t{width} * height) throw StructureError("records leave a gap");
  return out;
}

ClassId query(const TPyramid& tp, int level, std::uint32_t x, std::uint32_t y) {
  if (level < 0 || level > tp.max_level()) throw BoundsError("level " + std::to_string(level) + " out of range");
  const LabelGrid& g = tp.levels[static_cast<std::size_t>(level)];
  if (x >= g.width || y >= g.height) throw BoundsError("cell out of range at level " + std::to_string(level));
  return g.at(x, y);
}

SparsityStats sparsity_stats(const Quadtree& qt, std::uint32_t width, std::uint32_t height) {
  SparsityStats s;
  s.pixel_percent.assign(std::size_t{qt.max_level} + 1, 0.0);
  std::vector<std::uint64_t> per_level(s.pixel_percent.size(), 0);
  for (const QuadRecord& r : qt.records) ++per_level.at(r.level);
  const double pixels = static_cast<double>(width) * height;
  for (std::size_t l = 0; l < per_level.size(); ++l) {
    s.pixel_percent[l] = 100.0 * std::ldexp(static_cast<double>(per_level[l]), 2 * static_cast<int>(l)) / pixels;
  }
  s.ratio_percent = 100.0 * static_cast<double>(qt.records.size()) / pixels;
  return s;
}

double ratio_from_percentages(std::span<const double> coarse_to_fine_percent) {
  const int top = static_cast<int>(coarse_to_fine_percent.size()) - 1;
  double ratio = 0.0;
  for (int i = 0; i <= top; ++i) {
    const int level = top - i;
    ratio += std::ldexp(coarse_to_fine_percent[static_cast<std::size_t>(i)], -2 * level);
  }
  return ratio;
}

std::vector<std::uint8_t> encode_quadtree(const Quadtree& qt) {
  std::vector<std::uint8_t> out;
  out.reserve(21 + qt.records.size() * 11);
  out.insert(out.end(), {'Q', 'T', 'R', '1'});
  le::put_u32(out, qt.width);
  le::put_u32(out, qt.height);
  le::put_u32(out, qt.num_classes);
  le::put_u8(out, qt.max_level);
  le::put_u32(out, static_cast<std::uint32_t>(qt.records.size()));
  std::vector<QuadRecord> sorted = qt.records;
  std::sort(sorted.begin(), sorted.end(), canonical_less);
  for (const QuadRecord& r : sorted) {
    le::put_u8(out, r.level);
    le::put_u32(out, r.x);
    le::put_u32(out, r.y);
    le::put_u16(out, r.value);
  }
  return out;
}

Quadtree decode_quadtree(std::span<const std::uint8_t> bytes) {
  le::Reader r(bytes);
  r.expect_magic("QTR1");
  Quadtree qt;
  qt.width = r.u32();
  qt.height = r.u32();
  qt.num_classes = r.u32();
  qt.max_level = r.u8();
  const std::uint32_t count = r.u32();
  if (r.remaining() != std::size_t{count} * 11) throw FormatError("record payload size mismatch");
  qt.records.resize(count);
  for (auto& rec : qt.records) {
    rec.level = r.u8();
    rec.x = r.u32();
    rec.y = r.u32();
    rec.value = r.u16();
  }
  return qt;
}

Quadtree read_quadtree(const std::filesystem::path& path) { return decode_quadtree(read_file_bytes(path)); }

void write_quadtree(const Quadtree& qt, const std::filesystem::path& path) {
  write_file_bytes(path, encode_quadtree(qt));
}

}  // namespace qgn
