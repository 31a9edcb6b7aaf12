#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace qgn {

/// Label id. 0 is the composite class; 1..k are dataset classes.
using ClassId = std::uint16_t;

inline constexpr ClassId kComposite = 0;

/// Dense row-major grid of class ids with top-left origin.
struct Mask {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t num_classes = 0;
  std::vector<ClassId> data;

  Mask() = default;
  Mask(std::uint32_t w, std::uint32_t h, std::uint32_t k, ClassId fill = 1)
      : width(w), height(h), num_classes(k), data(std::size_t{w} * h, fill) {}

  ClassId at(std::uint32_t x, std::uint32_t y) const { return data[std::size_t{y} * width + x]; }
  ClassId& at(std::uint32_t x, std::uint32_t y) { return data[std::size_t{y} * width + x]; }

  bool operator==(const Mask&) const = default;
};

// Throws ClassRangeError / ShapeError if the mask invariants do not hold.
void validate_mask(const Mask& mask);

// QMR1 codec. Layout (little-endian): "QMR1", u32 width, u32 height,
// u32 num_classes, then width*height u16 ids in row-major order.
inline constexpr std::size_t kMaskHeaderBytes = 16;

std::vector<std::uint8_t> encode_mask(const Mask& mask);
Mask decode_mask(std::span<const std::uint8_t> bytes);

Mask read_mask(const std::filesystem::path& path);
void write_mask(const Mask& mask, const std::filesystem::path& path);

/// Grows the mask to the next multiple of `multiple` in each dimension.
/// Padded cells copy the nearest edge pixel so no new class id appears.
Mask pad_to_multiple(const Mask& mask, std::uint32_t multiple);

/// Background class 1 with `n_shapes` rectangles painted in draw order.
///
/// The generator is a std::mt19937_64 seeded with `seed`; draw(n) is
/// `engine() % n`. Per shape, in this order: x0 = draw(width),
/// y0 = draw(height), w = 1 + draw(width / 2), h = 1 + draw(height / 2),
/// class = 2 + draw(k - 1). The rectangle [x0, x0+w) x [y0, y0+h) is clipped
/// to the grid.
Mask gen_synthetic(std::uint32_t width, std::uint32_t height, std::uint32_t k,
                   std::uint32_t n_shapes, std::uint64_t seed);

Mask hflip(const Mask& mask);

// Shared little-endian helpers for the binary formats.
namespace le {
void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v);
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);

// Sequential reader; every get throws FormatError when the input runs out.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  void expect_magic(const char (&magic)[5]);
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::uint8_t* take(std::size_t n);
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};
}  // namespace le

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace qgn
