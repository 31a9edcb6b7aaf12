#include "qgn/tensor.hpp"

#include <algorithm>
#include <string>

#include "qgn/errors.hpp"

namespace qgn {

SiteSet::SiteSet(std::int32_t width, std::int32_t height, std::vector<Site> sites)
    : width_(width), height_(height), sites_(std::move(sites)) {
  if (width < 0 || height < 0) throw ShapeError("negative grid dims");
  std::sort(sites_.begin(), sites_.end(), site_less);
  index_.reserve(sites_.size());
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    const Site& s = sites_[i];
    if (s.x < 0 || s.y < 0 || s.x >= width || s.y >= height)
      throw ShapeError("site (" + std::to_string(s.x) + "," + std::to_string(s.y) + ") outside grid");
    if (!index_.emplace(key(s.x, s.y), static_cast<std::int32_t>(i)).second)
      throw ShapeError("duplicate site (" + std::to_string(s.x) + "," + std::to_string(s.y) + ")");
  }
}

std::shared_ptr<const SiteSet> SiteSet::make(std::int32_t width, std::int32_t height, std::vector<Site> sites) {
  return std::make_shared<const SiteSet>(width, height, std::move(sites));
}

std::shared_ptr<const SiteSet> SiteSet::full(std::int32_t width, std::int32_t height) {
  std::vector<Site> sites;
  sites.reserve(static_cast<std::size_t>(width) * height);
  for (std::int32_t y = 0; y < height; ++y)
    for (std::int32_t x = 0; x < width; ++x) sites.push_back({x, y});
  return make(width, height, std::move(sites));
}

std::int32_t SiteSet::find(std::int32_t x, std::int32_t y) const {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return -1;
  const auto it = index_.find(key(x, y));
  return it == index_.end() ? -1 : it->second;
}

const Rulebook& SiteSet::rulebook(int kh, int kw) const {
  std::lock_guard<std::mutex> lock(cache_mutex_);
  auto& slot = rulebooks_[{kh, kw}];
  if (!slot) {
    auto rb = std::make_unique<Rulebook>();
    rb->kh = kh;
    rb->kw = kw;
    const int taps = kh * kw;
    rb->neighbors.assign(sites_.size() * static_cast<std::size_t>(taps), -1);
    for (std::size_t i = 0; i < sites_.size(); ++i) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const std::int32_t j = find(sites_[i].x + kx - kw / 2, sites_[i].y + ky - kh / 2);
          rb->neighbors[i * taps + ky * kw + kx] = j;
          if (j >= 0) ++rb->active_pairs;
        }
      }
    }
    slot = std::move(rb);
  }
  return *slot;
}

bool same_sites(const SitesPtr& a, const SitesPtr& b) {
  if (a == b) return true;
  if (!a || !b) return false;
  return a->same_sites(*b);
}

template struct DenseTensor<float>;
template struct DenseTensor<double>;
template struct SparseActivation<float>;
template struct SparseActivation<double>;
template struct ConvParams<float>;
template struct ConvParams<double>;

namespace {
thread_local OpStatsScope* g_current_scope = nullptr;
}

OpStatsScope::OpStatsScope() : parent_(g_current_scope) { g_current_scope = this; }

OpStatsScope::~OpStatsScope() { g_current_scope = parent_; }

void record_op_stats(std::uint64_t site_reads, std::uint64_t site_writes, std::uint64_t macs) {
  for (OpStatsScope* s = g_current_scope; s != nullptr; s = s->parent_) {
    s->stats_.site_reads += site_reads;
    s->stats_.site_writes += site_writes;
    s->stats_.macs += macs;
  }
}

}  // namespace qgn
