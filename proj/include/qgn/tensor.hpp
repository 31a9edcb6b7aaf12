#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

namespace qgn {

struct Site {
  std::int32_t x = 0;
  std::int32_t y = 0;

  bool operator==(const Site&) const = default;
};

// Row-major (y, x) order; every site iteration in the library follows it.
inline bool site_less(const Site& a, const Site& b) { return a.y != b.y ? a.y < b.y : a.x < b.x; }

/// Neighbour table for a kh x kw window: entry [i * taps + t] is the row of
/// the site at offset t of site i, or -1 when that neighbour is inactive.
struct Rulebook {
  int kh = 0;
  int kw = 0;
  std::vector<std::int32_t> neighbors;
  std::uint64_t active_pairs = 0;

  int taps() const { return kh * kw; }
};

/// Immutable set of active sites on a width x height grid, hashed by
/// coordinate. Shared between activations that have the same sites.
class SiteSet {
 public:
  // Sorts the sites; throws ShapeError on out-of-bounds or duplicate sites.
  SiteSet(std::int32_t width, std::int32_t height, std::vector<Site> sites);

  static std::shared_ptr<const SiteSet> make(std::int32_t width, std::int32_t height, std::vector<Site> sites);
  static std::shared_ptr<const SiteSet> full(std::int32_t width, std::int32_t height);

  std::int32_t width() const { return width_; }
  std::int32_t height() const { return height_; }
  std::size_t size() const { return sites_.size(); }
  bool empty() const { return sites_.empty(); }
  std::span<const Site> sites() const { return sites_; }
  const Site& operator[](std::size_t i) const { return sites_[i]; }

  // Row index of (x, y) or -1 if inactive (or outside the grid).
  std::int32_t find(std::int32_t x, std::int32_t y) const;

  // Built once per kernel shape and cached; safe to call concurrently.
  const Rulebook& rulebook(int kh, int kw) const;

  bool same_sites(const SiteSet& other) const {
    return width_ == other.width_ && height_ == other.height_ && sites_ == other.sites_;
  }

 private:
  static std::uint64_t key(std::int32_t x, std::int32_t y) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(y)) << 32) | static_cast<std::uint32_t>(x);
  }

  std::int32_t width_;
  std::int32_t height_;
  std::vector<Site> sites_;
  std::unordered_map<std::uint64_t, std::int32_t> index_;

  mutable std::mutex cache_mutex_;
  mutable std::map<std::pair<int, int>, std::unique_ptr<Rulebook>> rulebooks_;
};

using SitesPtr = std::shared_ptr<const SiteSet>;

bool same_sites(const SitesPtr& a, const SitesPtr& b);

/// Dense H x W x C tensor, channel-fastest.
template <typename T>
struct DenseTensor {
  std::int32_t height = 0;
  std::int32_t width = 0;
  std::int32_t channels = 0;
  std::vector<T> values;

  DenseTensor() = default;
  DenseTensor(std::int32_t h, std::int32_t w, std::int32_t c)
      : height(h), width(w), channels(c), values(static_cast<std::size_t>(h) * w * c, T(0)) {}

  std::size_t offset(std::int32_t x, std::int32_t y) const {
    return (static_cast<std::size_t>(y) * width + x) * static_cast<std::size_t>(channels);
  }
  T& at(std::int32_t x, std::int32_t y, std::int32_t c) { return values[offset(x, y) + c]; }
  const T& at(std::int32_t x, std::int32_t y, std::int32_t c) const { return values[offset(x, y) + c]; }
  std::span<T> pixel(std::int32_t x, std::int32_t y) { return {values.data() + offset(x, y), std::size_t(channels)}; }
  std::span<const T> pixel(std::int32_t x, std::int32_t y) const {
    return {values.data() + offset(x, y), std::size_t(channels)};
  }
};

/// Hash-table activation at one quadtree level: active sites -> C-vectors.
/// Row i of `values` belongs to sites->sites()[i].
template <typename T>
struct SparseActivation {
  int level = 0;
  std::int32_t channels = 0;
  SitesPtr sites;
  std::vector<T> values;

  SparseActivation() = default;
  SparseActivation(int lvl, std::int32_t c, SitesPtr s)
      : level(lvl), channels(c), sites(std::move(s)), values(sites->size() * static_cast<std::size_t>(c), T(0)) {}

  std::size_t size() const { return sites ? sites->size() : 0; }
  std::int32_t width() const { return sites->width(); }
  std::int32_t height() const { return sites->height(); }
  std::span<T> row(std::size_t i) { return {values.data() + i * channels, std::size_t(channels)}; }
  std::span<const T> row(std::size_t i) const { return {values.data() + i * channels, std::size_t(channels)}; }
};

/// Convolution kernel (c_out, c_in, kh, kw), bias, and their gradients.
template <typename T>
struct ConvParams {
  std::int32_t c_out = 0;
  std::int32_t c_in = 0;
  std::int32_t kh = 1;
  std::int32_t kw = 1;
  std::vector<T> weight;
  std::vector<T> bias;
  std::vector<T> grad_weight;
  std::vector<T> grad_bias;

  ConvParams() = default;
  ConvParams(std::int32_t out, std::int32_t in, std::int32_t h, std::int32_t w)
      : c_out(out),
        c_in(in),
        kh(h),
        kw(w),
        weight(static_cast<std::size_t>(out) * in * h * w, T(0)),
        bias(static_cast<std::size_t>(out), T(0)),
        grad_weight(weight.size(), T(0)),
        grad_bias(bias.size(), T(0)) {}

  std::size_t index(std::int32_t co, std::int32_t ci, std::int32_t ky, std::int32_t kx) const {
    return ((static_cast<std::size_t>(co) * c_in + ci) * kh + ky) * kw + kx;
  }
  T& w(std::int32_t co, std::int32_t ci, std::int32_t ky, std::int32_t kx) { return weight[index(co, ci, ky, kx)]; }
  const T& w(std::int32_t co, std::int32_t ci, std::int32_t ky, std::int32_t kx) const {
    return weight[index(co, ci, ky, kx)];
  }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }

  void zero_grad() {
    std::fill(grad_weight.begin(), grad_weight.end(), T(0));
    std::fill(grad_bias.begin(), grad_bias.end(), T(0));
  }
};

extern template struct DenseTensor<float>;
extern template struct DenseTensor<double>;
extern template struct SparseActivation<float>;
extern template struct SparseActivation<double>;
extern template struct ConvParams<float>;
extern template struct ConvParams<double>;

// Work counters. While an OpStatsScope is alive on a thread, every op run on
// that thread adds its site reads/writes and multiply-adds to it and to all
// enclosing scopes.
struct OpStats {
  std::uint64_t site_reads = 0;
  std::uint64_t site_writes = 0;
  std::uint64_t macs = 0;
};

class OpStatsScope {
 public:
  OpStatsScope();
  ~OpStatsScope();
  OpStatsScope(const OpStatsScope&) = delete;
  OpStatsScope& operator=(const OpStatsScope&) = delete;

  const OpStats& stats() const { return stats_; }

 private:
  friend void record_op_stats(std::uint64_t, std::uint64_t, std::uint64_t);
  OpStats stats_;
  OpStatsScope* parent_;
};

void record_op_stats(std::uint64_t site_reads, std::uint64_t site_writes, std::uint64_t macs);

}  // namespace qgn
