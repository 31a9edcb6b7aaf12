#include "qgn/mask.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <random>

#include "qgn/errors.hpp"

namespace qgn {

namespace le {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

const std::uint8_t* Reader::take(std::size_t n) {
  if (remaining() < n) throw FormatError("truncated payload");
  const std::uint8_t* p = bytes_.data() + pos_;
  pos_ += n;
  return p;
}

std::uint8_t Reader::u8() { return *take(1); }

std::uint16_t Reader::u16() {
  const auto* p = take(2);
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t Reader::u32() {
  const auto* p = take(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t Reader::u64() {
  const auto* p = take(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }

void Reader::expect_magic(const char (&magic)[5]) {
  const auto* p = take(4);
  if (std::memcmp(p, magic, 4) != 0) throw FormatError(std::string("bad magic, expected ") + magic);
}

}  // namespace le

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void validate_mask(const Mask& mask) {
  if (mask.data.size() != std::size_t{mask.width} * mask.height)
    throw ShapeError("mask data length does not match width*height");
  for (ClassId v : mask.data) {
    if (v == kComposite || v > mask.num_classes)
      throw ClassRangeError("class id " + std::to_string(v) + " outside 1.." + std::to_string(mask.num_classes));
  }
}

std::vector<std::uint8_t> encode_mask(const Mask& mask) {
  validate_mask(mask);
  std::vector<std::uint8_t> out;
  out.reserve(kMaskHeaderBytes + 2 * mask.data.size());
  out.insert(out.end(), {'Q', 'M', 'R', '1'});
  le::put_u32(out, mask.width);
  le::put_u32(out, mask.height);
  le::put_u32(out, mask.num_classes);
  for (ClassId v : mask.data) le::put_u16(out, v);
  return out;
}

Mask decode_mask(std::span<const std::uint8_t> bytes) {
  le::Reader r(bytes);
  r.expect_magic("QMR1");
  Mask m;
  m.width = r.u32();
  m.height = r.u32();
  m.num_classes = r.u32();
  const std::uint64_t cells = std::uint64_t{m.width} * m.height;
  if (r.remaining() < cells * 2) throw FormatError("truncated payload");
  if (r.remaining() > cells * 2) throw FormatError("trailing bytes after mask payload");
  m.data.resize(cells);
  for (auto& v : m.data) v = r.u16();
  validate_mask(m);
  return m;
}

Mask read_mask(const std::filesystem::path& path) { return decode_mask(read_file_bytes(path)); }

void write_mask(const Mask& mask, const std::filesystem::path& path) { write_file_bytes(path, encode_mask(mask)); }

Mask pad_to_multiple(const Mask& mask, std::uint32_t multiple) {
  if (multiple == 0) throw InputError("padding multiple must be >= 1");
  const auto round_up = [multiple](std::uint32_t v) { return (v + multiple - 1) / multiple * multiple; };
  Mask out(round_up(mask.width), round_up(mask.height), mask.num_classes);
  for (std::uint32_t y = 0; y < out.height; ++y) {
    const std::uint32_t sy = std::min(y, mask.height - 1);
    for (std::uint32_t x = 0; x < out.width; ++x) {
      out.at(x, y) = mask.at(std::min(x, mask.width - 1), sy);
    }
  }
  return out;
}

Mask gen_synthetic(std::uint32_t width, std::uint32_t height, std::uint32_t k, std::uint32_t n_shapes,
                   std::uint64_t seed) {
  if (k < 2) throw InputError("gen_synthetic needs k >= 2");
  if (width < 8 || height < 8) throw InputError("gen_synthetic needs dims >= 8");
  std::mt19937_64 engine(seed);
  const auto draw = [&engine](std::uint64_t n) { return static_cast<std::uint32_t>(engine() % n); };

  Mask m(width, height, k, 1);
  for (std::uint32_t s = 0; s < n_shapes; ++s) {
    const std::uint32_t x0 = draw(width);
    const std::uint32_t y0 = draw(height);
    const std::uint32_t w = 1 + draw(width / 2);
    const std::uint32_t h = 1 + draw(height / 2);
    const auto cls = static_cast<ClassId>(2 + draw(k - 1));
    const std::uint32_t x1 = std::min(width, x0 + w);
    const std::uint32_t y1 = std::min(height, y0 + h);
    for (std::uint32_t y = y0; y < y1; ++y)
      for (std::uint32_t x = x0; x < x1; ++x) m.at(x, y) = cls;
  }
  return m;
}

Mask hflip(const Mask& mask) {
  Mask out = mask;
  for (std::uint32_t y = 0; y < mask.height; ++y) {
    auto row = out.data.begin() + static_cast<std::ptrdiff_t>(std::size_t{y} * mask.width);
    std::reverse(row, row + mask.width);
  }
  return out;
}

}  // namespace qgn
