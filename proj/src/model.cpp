#include "qgn/model.hpp"

#include <cmath>
#include <random>
#include <set>

#include "qgn/errors.hpp"
#include "qgn/ops.hpp"

namespace qgn {

std::string to_string(PropagationScheme scheme) {
  switch (scheme) {
    case PropagationScheme::All:
      return "all";
    case PropagationScheme::GTC:
      return "gtc";
    case PropagationScheme::PC:
      return "pc";
  }
  return "?";
}

PropagationScheme parse_scheme(std::string_view name) {
  if (name == "all" || name == "All") return PropagationScheme::All;
  if (name == "gtc" || name == "GTC") return PropagationScheme::GTC;
  if (name == "pc" || name == "PC") return PropagationScheme::PC;
  throw ConfigError("unknown propagation scheme '" + std::string(name) + "' (expected all|gtc|pc)");
}

void QgnConfig::validate() const {
  if (levels < 1 || levels > 16) throw ConfigError("levels must be in 1..16");
  if (num_classes < 1 || num_classes > 65534) throw ConfigError("num_classes must be in 1..65534");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (units_per_block < 1) throw ConfigError("units_per_block must be >= 1");
  const auto expected = static_cast<std::size_t>(levels) + 1;
  if (encoder_channels.size() != expected || decoder_channels.size() != expected)
    throw ConfigError("channel lists need levels + 1 entries");
  for (int c : encoder_channels)
    if (c < 1) throw ConfigError("channel counts must be >= 1");
  for (int c : decoder_channels)
    if (c < 1) throw ConfigError("channel counts must be >= 1");
}

template <typename T>
void QgnModel<T>::for_each_param(const std::function<void(ConvParams<T>&, const std::string&)>& fn) {
  for (std::size_t b = 0; b < encoder.size(); ++b) {
    const std::string p = "enc" + std::to_string(b);
    if (encoder[b].down) fn(*encoder[b].down, p + ".down");
    fn(encoder[b].conv_a, p + ".conv_a");
    fn(encoder[b].conv_b, p + ".conv_b");
  }
  for (auto& blk : decoder) {
    const std::string p = "dec" + std::to_string(blk.level);
    for (std::size_t u = 0; u < blk.units.size(); ++u) {
      const std::string q = p + ".u" + std::to_string(u);
      fn(blk.units[u].conv1, q + ".conv1");
      fn(blk.units[u].conv2, q + ".conv2");
      if (blk.units[u].shortcut) fn(*blk.units[u].shortcut, q + ".shortcut");
    }
    fn(blk.skip, p + ".skip");
    fn(blk.head, p + ".head");
  }
}

template <typename T>
void QgnModel<T>::for_each_param(const std::function<void(const ConvParams<T>&, const std::string&)>& fn) const {
  const_cast<QgnModel<T>*>(this)->for_each_param(
      [&fn](ConvParams<T>& p, const std::string& name) { fn(p, name); });
}

template <typename T>
std::size_t QgnModel<T>::parameter_count() const {
  std::size_t n = 0;
  for_each_param([&n](const ConvParams<T>& p, const std::string&) { n += p.parameter_count(); });
  return n;
}

template <typename T>
void QgnModel<T>::zero_grad() {
  for_each_param([](ConvParams<T>& p, const std::string&) { p.zero_grad(); });
}

template class QgnModel<float>;
template class QgnModel<double>;

namespace {

template <typename T>
QgnModel<T> build_skeleton(const QgnConfig& cfg) {
  cfg.validate();
  QgnModel<T> m;
  m.config = cfg;
  const int L = cfg.levels;
  for (int b = 0; b <= L; ++b) {
    EncoderBlock<T> blk;
    const int out = cfg.encoder_width(b);
    int in = cfg.in_channels;
    if (b > 0) {
      blk.down = ConvParams<T>(out, cfg.encoder_width(b - 1), 3, 3);
      in = out;
    }
    blk.conv_a = ConvParams<T>(out, in, 3, 3);
    blk.conv_b = ConvParams<T>(out, out, 3, 3);
    m.encoder.push_back(std::move(blk));
  }
  for (int level = L; level >= 0; --level) {
    DecoderBlock<T> blk;
    blk.level = level;
    const int width = cfg.decoder_width(level);
    int in = level == L ? width : cfg.decoder_width(level + 1);
    for (int u = 0; u < cfg.units_per_block; ++u) {
      ResidualUnit<T> unit;
      unit.conv1 = ConvParams<T>(width, in, 3, 3);
      unit.conv2 = ConvParams<T>(width, width, 3, 3);
      if (in != width) unit.shortcut = ConvParams<T>(width, in, 1, 1);
      blk.units.push_back(std::move(unit));
      in = width;
    }
    blk.skip = ConvParams<T>(width, cfg.encoder_width(level), 1, 1);
    blk.head = ConvParams<T>(cfg.head_channels(), width, 1, 1);
    m.decoder.push_back(std::move(blk));
  }
  return m;
}

bool feeds_relu(const std::string& name) {
  return name.starts_with("enc") || name.ends_with(".conv1");
}

}  // namespace

template <typename T>
QgnModel<T> init_model(const QgnConfig& cfg) {
  QgnModel<T> m = build_skeleton<T>(cfg);
  std::mt19937_64 engine(cfg.seed);
  m.for_each_param([&engine](ConvParams<T>& p, const std::string& name) {
    const double fan_in = static_cast<double>(p.c_in) * p.kh * p.kw;
    const double bound = std::sqrt((feeds_relu(name) ? 6.0 : 3.0) / fan_in);
    for (T& w : p.weight) {
      const double unit = static_cast<double>(engine() >> 11) * 0x1.0p-53;  // [0, 1)
      w = static_cast<T>((2.0 * unit - 1.0) * bound);
    }
  });
  return m;
}

template QgnModel<float> init_model<float>(const QgnConfig&);
template QgnModel<double> init_model<double>(const QgnConfig&);

template <typename T>
QgnModel<T> convert_model(const QgnModel<float>& model) {
  QgnModel<T> out = build_skeleton<T>(model.config);
  std::vector<const ConvParams<float>*> src;
  model.for_each_param([&src](const ConvParams<float>& p, const std::string&) { src.push_back(&p); });
  std::size_t i = 0;
  out.for_each_param([&](ConvParams<T>& p, const std::string&) {
    const ConvParams<float>& s = *src[i++];
    std::copy(s.weight.begin(), s.weight.end(), p.weight.begin());
    std::copy(s.bias.begin(), s.bias.end(), p.bias.begin());
  });
  return out;
}

template QgnModel<float> convert_model<float>(const QgnModel<float>&);
template QgnModel<double> convert_model<double>(const QgnModel<float>&);

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename T>
LayerCount make_count(std::string name, bool decoder, int level, const DenseTensor<T>& t, std::uint64_t macs) {
  const std::uint64_t sites = static_cast<std::uint64_t>(t.height) * t.width;
  return {std::move(name), decoder, level, sites, t.channels, sites * static_cast<std::uint64_t>(t.channels), macs};
}

template <typename T>
LayerCount make_count(std::string name, bool decoder, int level, const SparseActivation<T>& t, std::uint64_t macs) {
  const std::uint64_t sites = t.size();
  return {std::move(name), decoder, level, sites, t.channels, sites * static_cast<std::uint64_t>(t.channels), macs};
}

template <typename T>
std::size_t argmax_lowest(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < v.size(); ++c)
    if (v[c] > v[best]) best = c;
  return best;
}

template <typename T>
SitesPtr select_sites(PropagationScheme scheme, const SparseActivation<T>& logits, const TPyramid* gt, int level) {
  const SiteSet& active = *logits.sites;
  if (level == 0) return SiteSet::make(active.width(), active.height(), {});
  if (scheme == PropagationScheme::All) return logits.sites;
  std::vector<Site> keep;
  for (std::size_t i = 0; i < active.size(); ++i) {
    const Site& s = active[i];
    bool composite = false;
    if (scheme == PropagationScheme::GTC) {
      composite = gt->level(level).at(static_cast<std::uint32_t>(s.x), static_cast<std::uint32_t>(s.y)) == kComposite;
    } else {
      composite = argmax_lowest(logits.row(i)) == 0;
    }
    if (composite) keep.push_back(s);
  }
  return SiteSet::make(active.width(), active.height(), std::move(keep));
}

template <typename T>
void add_into(SparseActivation<T>& dst, const SparseActivation<T>& src) {
  if (!same_sites(dst.sites, src.sites) || dst.channels != src.channels)
    throw ShapeError("gradient accumulation over different sites");
  for (std::size_t i = 0; i < dst.values.size(); ++i) dst.values[i] += src.values[i];
}

template <typename T>
void add_into(DenseTensor<T>& dst, const DenseTensor<T>& src) {
  for (std::size_t i = 0; i < dst.values.size(); ++i) dst.values[i] += src.values[i];
}

}  // namespace

template <typename T>
PredictionQuadtree<T> forward(const QgnModel<T>& model, const DenseTensor<T>& image, const ForwardOptions& options,
                              ForwardTrace<T>* trace, ActivationReport* log) {
  const QgnConfig& cfg = model.config;
  const int L = cfg.levels;
  if (image.channels != cfg.in_channels) throw ShapeError("image channel count does not match the model");
  const std::int32_t block = 1 << L;
  if (image.width % block != 0 || image.height % block != 0 || image.width == 0 || image.height == 0)
    throw ShapeError("image dims must be positive multiples of 2^levels");
  const TPyramid* gt = options.ground_truth;
  if (options.scheme == PropagationScheme::GTC) {
    if (gt == nullptr) throw ConfigError("GTC propagation needs a ground-truth pyramid");
    if (gt->max_level() < L || gt->levels[0].width != static_cast<std::uint32_t>(image.width) ||
        gt->levels[0].height != static_cast<std::uint32_t>(image.height))
      throw ShapeError("ground-truth pyramid does not match the image");
  }

  ForwardTrace<T> local;
  ForwardTrace<T>& tr = trace ? *trace : local;
  tr = ForwardTrace<T>{};
  tr.image = image;
  tr.encoder.resize(static_cast<std::size_t>(L) + 1);
  tr.decoder.resize(static_cast<std::size_t>(L) + 1);

  const auto measured = [log](std::string name, bool decoder, int level, auto&& op) {
    OpStatsScope scope;
    auto out = op();
    if (log) log->layers.push_back(make_count(std::move(name), decoder, level, out, scope.stats().macs));
    return out;
  };

  const DenseTensor<T>* x = &tr.image;
  for (int b = 0; b <= L; ++b) {
    const EncoderBlock<T>& blk = model.encoder[static_cast<std::size_t>(b)];
    auto& ec = tr.encoder[static_cast<std::size_t>(b)];
    const std::string p = "enc" + std::to_string(b);
    if (blk.down) {
      auto d = measured(p + ".down", false, b, [&] { return dense_conv_fwd(*x, *blk.down, 2); });
      ec.down_out = measured(p + ".down_relu", false, b, [&] { return dense_relu_fwd(d); });
      x = &ec.down_out;
    }
    auto a = measured(p + ".conv_a", false, b, [&] { return dense_conv_fwd(*x, blk.conv_a, 1); });
    ec.a_out = measured(p + ".relu_a", false, b, [&] { return dense_relu_fwd(a); });
    auto c = measured(p + ".conv_b", false, b, [&] { return dense_conv_fwd(ec.a_out, blk.conv_b, 1); });
    ec.feature = measured(p + ".relu_b", false, b, [&] { return dense_relu_fwd(c); });
    x = &ec.feature;
  }

  PredictionQuadtree<T> pred;
  pred.width = image.width;
  pred.height = image.height;
  pred.num_classes = cfg.num_classes;
  pred.levels.resize(static_cast<std::size_t>(L) + 1);

  SitesPtr parents;
  for (int level = L; level >= 0; --level) {
    const DecoderBlock<T>& blk = model.block_at(level);
    auto& dc = tr.decoder[static_cast<std::size_t>(level)];
    const DenseTensor<T>& feat = tr.encoder[static_cast<std::size_t>(level)].feature;
    const std::string p = "dec" + std::to_string(level);

    SparseActivation<T> act;
    if (level == L) {
      const SitesPtr all = SiteSet::full(feat.width, feat.height);
      act = measured(p + ".skip", true, level, [&] { return gather_skip_fwd(feat, all, level, blk.skip); });
    } else {
      const auto& coarser = tr.decoder[static_cast<std::size_t>(level) + 1].activation;
      dc.restricted = measured(p + ".restrict", true, level + 1, [&] { return restrict_fwd(coarser, parents); });
      act = measured(p + ".upsample", true, level, [&] { return upsample2x_fwd(dc.restricted); });
    }

    for (std::size_t u = 0; u < blk.units.size(); ++u) {
      const ResidualUnit<T>& unit = blk.units[u];
      const std::string q = p + ".u" + std::to_string(u);
      typename ForwardTrace<T>::Unit uc;
      uc.input = std::move(act);
      auto c1 = measured(q + ".conv1", true, level, [&] { return sparse_conv_fwd(uc.input, unit.conv1); });
      uc.mid = measured(q + ".relu1", true, level, [&] { return relu_fwd(c1); });
      auto c2 = measured(q + ".conv2", true, level, [&] { return sparse_conv_fwd(uc.mid, unit.conv2); });
      SparseActivation<T> shortcut;
      if (unit.shortcut) {
        shortcut =
            measured(q + ".shortcut", true, level, [&] { return sparse_conv_fwd(uc.input, *unit.shortcut); });
      }
      const SparseActivation<T>& residual = unit.shortcut ? shortcut : uc.input;
      auto sum = measured(q + ".add", true, level, [&] { return add_fwd(c2, residual); });
      uc.output = measured(q + ".relu2", true, level, [&] { return relu_fwd(sum); });
      act = uc.output;
      dc.units.push_back(std::move(uc));
    }

    if (level < L) {
      auto skip = measured(p + ".skip", true, level, [&] { return gather_skip_fwd(feat, act.sites, level, blk.skip); });
      dc.activation = measured(p + ".skip_add", true, level, [&] { return add_fwd(act, skip); });
    } else {
      dc.activation = std::move(act);
    }

    auto logits = measured(p + ".head", true, level, [&] { return sparse_conv_fwd(dc.activation, blk.head); });
    parents = select_sites(options.scheme, logits, gt, level);
    pred.levels[static_cast<std::size_t>(level)] = {std::move(logits), parents};
  }
  return pred;
}

template <typename T>
void backward(QgnModel<T>& model, const ForwardTrace<T>& trace, std::span<const SparseActivation<T>> grad_logits) {
  const int L = model.config.levels;
  if (grad_logits.size() != static_cast<std::size_t>(L) + 1) throw ShapeError("need one logit gradient per level");
  std::vector<DenseTensor<T>> grad_feat;
  for (const auto& ec : trace.encoder) grad_feat.emplace_back(ec.feature.height, ec.feature.width, ec.feature.channels);

  SparseActivation<T> pending;
  bool has_pending = false;
  for (int level = 0; level <= L; ++level) {
    DecoderBlock<T>& blk = model.block_at(level);
    const auto& dc = trace.decoder[static_cast<std::size_t>(level)];
    const auto& feat = trace.encoder[static_cast<std::size_t>(level)].feature;

    SparseActivation<T> grad = sparse_conv_bwd(dc.activation, blk.head, grad_logits[static_cast<std::size_t>(level)]);
    if (has_pending) add_into(grad, pending);
    if (level < L) gather_skip_bwd(feat, blk.skip, grad, grad_feat[static_cast<std::size_t>(level)]);

    for (std::size_t u = blk.units.size(); u-- > 0;) {
      ResidualUnit<T>& unit = blk.units[u];
      const auto& uc = dc.units[u];
      const SparseActivation<T> grad_sum = relu_bwd(uc.output, grad);
      const SparseActivation<T> grad_mid = sparse_conv_bwd(uc.mid, unit.conv2, grad_sum);
      const SparseActivation<T> grad_c1 = relu_bwd(uc.mid, grad_mid);
      SparseActivation<T> grad_in = sparse_conv_bwd(uc.input, unit.conv1, grad_c1);
      if (unit.shortcut) {
        add_into(grad_in, sparse_conv_bwd(uc.input, *unit.shortcut, grad_sum));
      } else {
        add_into(grad_in, grad_sum);
      }
      grad = std::move(grad_in);
    }

    if (level == L) {
      gather_skip_bwd(feat, blk.skip, grad, grad_feat[static_cast<std::size_t>(level)]);
    } else {
      const SparseActivation<T> grad_restricted = upsample2x_bwd(dc.restricted, grad);
      pending = restrict_bwd(trace.decoder[static_cast<std::size_t>(level) + 1].activation, grad_restricted);
      has_pending = true;
    }
  }

  for (int b = L; b >= 0; --b) {
    EncoderBlock<T>& blk = model.encoder[static_cast<std::size_t>(b)];
    const auto& ec = trace.encoder[static_cast<std::size_t>(b)];
    DenseTensor<T> g = dense_relu_bwd(ec.feature, grad_feat[static_cast<std::size_t>(b)]);
    g = dense_conv_bwd(ec.a_out, blk.conv_b, 1, g);
    g = dense_relu_bwd(ec.a_out, g);
    g = dense_conv_bwd(blk.down ? ec.down_out : trace.image, blk.conv_a, 1, g);
    if (blk.down) {
      g = dense_relu_bwd(ec.down_out, g);
      g = dense_conv_bwd(trace.encoder[static_cast<std::size_t>(b) - 1].feature, *blk.down, 2, g);
      add_into(grad_feat[static_cast<std::size_t>(b) - 1], g);
    }
  }
}

template <typename T>
ClassId leaf_label(std::span<const T> logits) {
  const std::size_t best = argmax_lowest(logits);
  if (best != 0) return static_cast<ClassId>(best);
  return static_cast<ClassId>(1 + argmax_lowest(logits.subspan(1)));
}

template <typename T>
SitePlan PredictionQuadtree<T>::plan() const {
  SitePlan plan;
  for (const auto& lvl : levels) {
    plan.active.push_back(lvl.logits.sites);
    plan.selected.push_back(lvl.selected);
  }
  return plan;
}

template <typename T>
std::vector<PredictionLeaf> prediction_leaves(const PredictionQuadtree<T>& pred) {
  std::vector<PredictionLeaf> leaves;
  for (int level = pred.max_level(); level >= 0; --level) {
    const auto& lvl = pred.levels[static_cast<std::size_t>(level)];
    for (std::size_t i = 0; i < lvl.logits.size(); ++i) {
      const Site& s = (*lvl.logits.sites)[i];
      if (lvl.selected && lvl.selected->find(s.x, s.y) >= 0) continue;
      leaves.push_back({level, s.x, s.y, leaf_label(lvl.logits.row(i))});
    }
  }
  return leaves;
}

template <typename T>
Mask assemble(const PredictionQuadtree<T>& pred, std::uint32_t width, std::uint32_t height) {
  Mask out(width, height, static_cast<std::uint32_t>(pred.num_classes), kComposite);
  std::uint64_t covered = 0;
  for (const PredictionLeaf& leaf : prediction_leaves(pred)) {
    const std::uint64_t side = std::uint64_t{1} << leaf.level;
    const std::uint64_t x0 = static_cast<std::uint64_t>(leaf.x) * side;
    const std::uint64_t y0 = static_cast<std::uint64_t>(leaf.y) * side;
    if (x0 + side > width || y0 + side > height) throw StructureError("leaf outside the image");
    for (std::uint64_t y = y0; y < y0 + side; ++y) {
      for (std::uint64_t x = x0; x < x0 + side; ++x) {
        ClassId& cell = out.at(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y));
        if (cell != kComposite) throw StructureError("overlapping leaves");
        cell = leaf.label;
      }
    }
    covered += side * side;
  }
  if (covered != std::uint64_t{width} * height) throw StructureError("leaves do not cover the image");
  return out;
}

#define QGN_INSTANTIATE_MODEL(T)                                                                              \
  template PredictionQuadtree<T> forward(const QgnModel<T>&, const DenseTensor<T>&, const ForwardOptions&,    \
                                         ForwardTrace<T>*, ActivationReport*);                                \
  template void backward(QgnModel<T>&, const ForwardTrace<T>&, std::span<const SparseActivation<T>>);        \
  template ClassId leaf_label(std::span<const T>);                                                            \
  template struct PredictionQuadtree<T>;                                                                      \
  template std::vector<PredictionLeaf> prediction_leaves(const PredictionQuadtree<T>&);                       \
  template Mask assemble(const PredictionQuadtree<T>&, std::uint32_t, std::uint32_t);

QGN_INSTANTIATE_MODEL(float)
QGN_INSTANTIATE_MODEL(double)

#undef QGN_INSTANTIATE_MODEL

// ---------------------------------------------------------------------------
// Activation accounting

std::uint64_t ActivationReport::encoder_scalars() const {
  std::uint64_t n = 0;
  for (const auto& l : layers)
    if (!l.decoder) n += l.scalars;
  return n;
}

std::uint64_t ActivationReport::decoder_scalars() const {
  std::uint64_t n = 0;
  for (const auto& l : layers)
    if (l.decoder) n += l.scalars;
  return n;
}

std::uint64_t ActivationReport::encoder_macs() const {
  std::uint64_t n = 0;
  for (const auto& l : layers)
    if (!l.decoder) n += l.macs;
  return n;
}

std::uint64_t ActivationReport::decoder_macs() const {
  std::uint64_t n = 0;
  for (const auto& l : layers)
    if (l.decoder) n += l.macs;
  return n;
}

SitePlan plan_all(const QgnConfig& cfg, std::int32_t width, std::int32_t height) {
  SitePlan plan;
  for (int level = 0; level <= cfg.levels; ++level) {
    const auto sites = SiteSet::full(width >> level, height >> level);
    plan.active.push_back(sites);
    plan.selected.push_back(level == 0 ? SiteSet::make(width, height, {}) : sites);
  }
  return plan;
}

SitePlan plan_from_pyramid(const TPyramid& tp) {
  const int L = tp.max_level();
  SitePlan plan;
  plan.active.resize(static_cast<std::size_t>(L) + 1);
  plan.selected.resize(static_cast<std::size_t>(L) + 1);
  const LabelGrid& top = tp.level(L);
  SitesPtr active = SiteSet::full(static_cast<std::int32_t>(top.width), static_cast<std::int32_t>(top.height));
  for (int level = L; level >= 0; --level) {
    const LabelGrid& g = tp.level(level);
    plan.active[static_cast<std::size_t>(level)] = active;
    std::vector<Site> keep;
    if (level > 0) {
      for (const Site& s : active->sites())
        if (g.at(static_cast<std::uint32_t>(s.x), static_cast<std::uint32_t>(s.y)) == kComposite) keep.push_back(s);
    }
    auto selected = SiteSet::make(active->width(), active->height(), std::move(keep));
    plan.selected[static_cast<std::size_t>(level)] = selected;
    if (level > 0) active = upsample_sites(*selected);
  }
  return plan;
}

namespace {

// Number of (output, in-bounds input) tap pairs along one axis.
std::uint64_t axis_pairs(std::int64_t out_len, std::int64_t in_len, int stride, int k) {
  std::uint64_t n = 0;
  for (std::int64_t o = 0; o < out_len; ++o)
    for (int t = 0; t < k; ++t) {
      const std::int64_t s = o * stride + t - k / 2;
      if (s >= 0 && s < in_len) ++n;
    }
  return n;
}

// Active (site, neighbour) pairs of a 3x3 window, counted with an ordered
// set so this path shares nothing with SiteSet's hash index.
std::uint64_t window_pairs(const SiteSet& sites) {
  std::set<std::pair<std::int32_t, std::int32_t>> lookup;
  for (const Site& s : sites.sites()) lookup.insert({s.x, s.y});
  std::uint64_t n = 0;
  for (const Site& s : sites.sites())
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) n += lookup.count({s.x + dx, s.y + dy});
  return n;
}

}  // namespace

ActivationReport count_activations(const QgnConfig& cfg, std::int32_t width, std::int32_t height,
                                   const SitePlan& plan) {
  cfg.validate();
  const int L = cfg.levels;
  if (plan.active.size() != static_cast<std::size_t>(L) + 1 || plan.selected.size() != plan.active.size())
    throw ShapeError("site plan does not match the level count");
  ActivationReport r;
  const auto dense = [&r](std::string name, int level, std::int64_t h, std::int64_t w, int c, std::uint64_t macs) {
    const auto sites = static_cast<std::uint64_t>(h * w);
    r.layers.push_back({std::move(name), false, level, sites, c, sites * static_cast<std::uint64_t>(c), macs});
  };
  const auto sparse = [&r](std::string name, int level, std::uint64_t sites, int c, std::uint64_t macs) {
    r.layers.push_back({std::move(name), true, level, sites, c, sites * static_cast<std::uint64_t>(c), macs});
  };

  std::int64_t h = height, w = width;
  int in = cfg.in_channels;
  for (int b = 0; b <= L; ++b) {
    const std::string p = "enc" + std::to_string(b);
    const int c = cfg.encoder_width(b);
    if (b > 0) {
      const std::int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
      const std::uint64_t taps = axis_pairs(oh, h, 2, 3) * axis_pairs(ow, w, 2, 3);
      dense(p + ".down", b, oh, ow, c, taps * static_cast<std::uint64_t>(in) * c);
      dense(p + ".down_relu", b, oh, ow, c, 0);
      h = oh;
      w = ow;
      in = c;
    }
    const std::uint64_t taps = axis_pairs(h, h, 1, 3) * axis_pairs(w, w, 1, 3);
    dense(p + ".conv_a", b, h, w, c, taps * static_cast<std::uint64_t>(in) * c);
    dense(p + ".relu_a", b, h, w, c, 0);
    dense(p + ".conv_b", b, h, w, c, taps * static_cast<std::uint64_t>(c) * c);
    dense(p + ".relu_b", b, h, w, c, 0);
    in = c;
  }

  for (int level = L; level >= 0; --level) {
    const std::string p = "dec" + std::to_string(level);
    const SiteSet& active = *plan.active[static_cast<std::size_t>(level)];
    const std::uint64_t n = active.size();
    const int c = cfg.decoder_width(level);
    const int enc_c = cfg.encoder_width(level);
    int unit_in;
    if (level == L) {
      sparse(p + ".skip", level, n, c, n * static_cast<std::uint64_t>(enc_c) * c);
      unit_in = c;
    } else {
      const int coarse_c = cfg.decoder_width(level + 1);
      const std::uint64_t parents = plan.selected[static_cast<std::size_t>(level) + 1]->size();
      sparse(p + ".restrict", level + 1, parents, coarse_c, 0);
      sparse(p + ".upsample", level, 4 * parents, coarse_c, 0);
      unit_in = coarse_c;
    }
    const std::uint64_t pairs = window_pairs(active);
    for (int u = 0; u < cfg.units_per_block; ++u) {
      const std::string q = p + ".u" + std::to_string(u);
      sparse(q + ".conv1", level, n, c, pairs * static_cast<std::uint64_t>(unit_in) * c);
      sparse(q + ".relu1", level, n, c, 0);
      sparse(q + ".conv2", level, n, c, pairs * static_cast<std::uint64_t>(c) * c);
      if (unit_in != c) sparse(q + ".shortcut", level, n, c, n * static_cast<std::uint64_t>(unit_in) * c);
      sparse(q + ".add", level, n, c, 0);
      sparse(q + ".relu2", level, n, c, 0);
      unit_in = c;
    }
    if (level < L) {
      sparse(p + ".skip", level, n, c, n * static_cast<std::uint64_t>(enc_c) * c);
      sparse(p + ".skip_add", level, n, c, 0);
    }
    sparse(p + ".head", level, n, cfg.head_channels(), n * static_cast<std::uint64_t>(c) * cfg.head_channels());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_checkpoint(const QgnModel<float>& model) {
  const QgnConfig& cfg = model.config;
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'Q', 'G', 'N', '1'});
  le::put_u32(out, static_cast<std::uint32_t>(cfg.levels));
  le::put_u32(out, static_cast<std::uint32_t>(cfg.num_classes));
  le::put_u32(out, static_cast<std::uint32_t>(cfg.in_channels));
  le::put_u32(out, static_cast<std::uint32_t>(cfg.units_per_block));
  le::put_u64(out, cfg.seed);
  le::put_u32(out, static_cast<std::uint32_t>(cfg.encoder_channels.size()));
  for (int c : cfg.encoder_channels) le::put_u32(out, static_cast<std::uint32_t>(c));
  le::put_u32(out, static_cast<std::uint32_t>(cfg.decoder_channels.size()));
  for (int c : cfg.decoder_channels) le::put_u32(out, static_cast<std::uint32_t>(c));
  le::put_u64(out, model.parameter_count());
  model.for_each_param([&out](const ConvParams<float>& p, const std::string&) {
    for (float v : p.weight) le::put_f32(out, v);
    for (float v : p.bias) le::put_f32(out, v);
  });
  return out;
}

QgnModel<float> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  le::Reader r(bytes);
  r.expect_magic("QGN1");
  QgnConfig cfg;
  cfg.levels = static_cast<int>(r.u32());
  cfg.num_classes = static_cast<int>(r.u32());
  cfg.in_channels = static_cast<int>(r.u32());
  cfg.units_per_block = static_cast<int>(r.u32());
  cfg.seed = r.u64();
  const auto read_list = [&r]() {
    const std::uint32_t n = r.u32();
    if (n > 64) throw FormatError("implausible channel list length");
    std::vector<int> v(n);
    for (int& c : v) c = static_cast<int>(r.u32());
    return v;
  };
  cfg.encoder_channels = read_list();
  cfg.decoder_channels = read_list();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  QgnModel<float> model = build_skeleton<float>(cfg);
  if (r.u64() != model.parameter_count()) throw FormatError("checkpoint parameter count mismatch");
  model.for_each_param([&r](ConvParams<float>& p, const std::string&) {
    for (float& v : p.weight) v = r.f32();
    for (float& v : p.bias) v = r.f32();
  });
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint");
  return model;
}

void save_checkpoint(const QgnModel<float>& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(model));
}

QgnModel<float> load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace qgn
