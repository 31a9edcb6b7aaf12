#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qgn/mask.hpp"
#include "qgn/quadtree.hpp"
#include "qgn/tensor.hpp"

namespace qgn {

enum class PropagationScheme { All, GTC, PC };

std::string to_string(PropagationScheme scheme);
PropagationScheme parse_scheme(std::string_view name);  // throws ConfigError

struct QgnConfig {
  int levels = kDefaultLevels;
  int num_classes = 2;
  int in_channels = 3;
  std::vector<int> encoder_channels{8, 16, 32, 64, 128, 128};  // indexed by level
  std::vector<int> decoder_channels{128, 64, 32, 16, 8, 8};    // indexed by block, level L first
  int units_per_block = 2;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  int encoder_width(int level) const { return encoder_channels.at(static_cast<std::size_t>(level)); }
  int decoder_width(int level) const { return decoder_channels.at(static_cast<std::size_t>(levels - level)); }
  int head_channels() const { return num_classes + 1; }

  bool operator==(const QgnConfig&) const = default;
};

template <typename T>
struct EncoderBlock {
  std::optional<ConvParams<T>> down;  // stride-2 entry conv, absent for block 0
  ConvParams<T> conv_a;
  ConvParams<T> conv_b;
};

// y = relu(conv2(relu(conv1(x))) + shortcut(x)); shortcut is the identity
// unless the unit changes the channel count.
template <typename T>
struct ResidualUnit {
  ConvParams<T> conv1;
  ConvParams<T> conv2;
  std::optional<ConvParams<T>> shortcut;
};

template <typename T>
struct DecoderBlock {
  int level = 0;
  std::vector<ResidualUnit<T>> units;
  ConvParams<T> skip;  // 1x1 from the encoder feature at this level
  ConvParams<T> head;  // 1x1 to num_classes + 1 logits
};

template <typename T>
class QgnModel {
 public:
  QgnConfig config;
  std::vector<EncoderBlock<T>> encoder;  // index = level
  std::vector<DecoderBlock<T>> decoder;  // index = levels - level

  DecoderBlock<T>& block_at(int level) { return decoder.at(static_cast<std::size_t>(config.levels - level)); }
  const DecoderBlock<T>& block_at(int level) const {
    return decoder.at(static_cast<std::size_t>(config.levels - level));
  }

  // Visits every parameter tensor in checkpoint order: encoder blocks by
  // level (down, conv_a, conv_b), then decoder blocks from level L down to 0
  // (units in order as conv1, conv2, shortcut; then skip; then head).
  void for_each_param(const std::function<void(ConvParams<T>&, const std::string&)>& fn);
  void for_each_param(const std::function<void(const ConvParams<T>&, const std::string&)>& fn) const;

  std::size_t parameter_count() const;
  void zero_grad();
};

/// Fan-in scaled uniform initialisation from a seeded mt19937_64; biases
/// start at zero. Convs feeding a ReLU use bound sqrt(6/fan_in), the rest
/// sqrt(3/fan_in).
template <typename T>
QgnModel<T> init_model(const QgnConfig& cfg);

template <typename T>
QgnModel<T> convert_model(const QgnModel<float>& model);

// Which sites were active and which of them were propagated to the next
// finer level, per level.
struct SitePlan {
  std::vector<SitesPtr> active;    // index = level
  std::vector<SitesPtr> selected;  // index = level; level 0 is always empty
};

template <typename T>
struct PredictionLevel {
  SparseActivation<T> logits;  // num_classes + 1 channels, channel 0 = composite
  SitesPtr selected;
};

struct PredictionLeaf {
  int level = 0;
  std::int32_t x = 0;
  std::int32_t y = 0;
  ClassId label = 0;
};

template <typename T>
struct PredictionQuadtree {
  std::int32_t width = 0;
  std::int32_t height = 0;
  int num_classes = 0;
  std::vector<PredictionLevel<T>> levels;  // index = level

  int max_level() const { return static_cast<int>(levels.size()) - 1; }
  SitePlan plan() const;
};

struct LayerCount {
  std::string name;
  bool decoder = false;
  int level = 0;
  std::uint64_t sites = 0;
  std::int32_t channels = 0;
  std::uint64_t scalars = 0;  // stored activation values
  std::uint64_t macs = 0;

  bool operator==(const LayerCount&) const = default;
};

struct ActivationReport {
  std::vector<LayerCount> layers;

  std::uint64_t encoder_scalars() const;
  std::uint64_t decoder_scalars() const;
  std::uint64_t encoder_macs() const;
  std::uint64_t decoder_macs() const;
};

// Everything the backward pass needs from one forward pass.
template <typename T>
struct ForwardTrace {
  struct Encoder {
    DenseTensor<T> down_out;  // relu output of the stride-2 conv (blocks >= 1)
    DenseTensor<T> a_out;
    DenseTensor<T> feature;  // relu output of conv_b
  };
  struct Unit {
    SparseActivation<T> input;
    SparseActivation<T> mid;  // relu(conv1(input))
    SparseActivation<T> output;
  };
  struct Decoder {
    SparseActivation<T> restricted;  // parents kept from the coarser level
    std::vector<Unit> units;
    SparseActivation<T> activation;  // post-skip activation feeding the head
  };

  DenseTensor<T> image;
  std::vector<Encoder> encoder;  // index = level
  std::vector<Decoder> decoder;  // index = level
};

struct ForwardOptions {
  PropagationScheme scheme = PropagationScheme::All;
  const TPyramid* ground_truth = nullptr;  // required for GTC
};

/// Runs the encoder and the level-by-level sparse decoder. When `trace` is
/// set it receives the caches for `backward`; when `log` is set it receives
/// one LayerCount per layer measured from the op counters.
template <typename T>
PredictionQuadtree<T> forward(const QgnModel<T>& model, const DenseTensor<T>& image, const ForwardOptions& options,
                              ForwardTrace<T>* trace = nullptr, ActivationReport* log = nullptr);

/// Accumulates parameter gradients given d(loss)/d(logits) for every level
/// (index = level, same sites as the forward logits).
template <typename T>
void backward(QgnModel<T>& model, const ForwardTrace<T>& trace, std::span<const SparseActivation<T>> grad_logits);

/// Label of one leaf: argmax over all channels; a composite winner falls
/// back to the best dataset class. Ties go to the lowest index.
template <typename T>
ClassId leaf_label(std::span<const T> logits);

template <typename T>
std::vector<PredictionLeaf> prediction_leaves(const PredictionQuadtree<T>& pred);

/// Paints every leaf over its 2^l x 2^l block; throws StructureError unless
/// the leaves tile the image exactly once.
template <typename T>
Mask assemble(const PredictionQuadtree<T>& pred, std::uint32_t width, std::uint32_t height);

SitePlan plan_all(const QgnConfig& cfg, std::int32_t width, std::int32_t height);
SitePlan plan_from_pyramid(const TPyramid& tp);

/// Closed-form per-layer activation and multiply-add counts for a forward
/// pass over the given site plan, layer for layer in `forward` order.
ActivationReport count_activations(const QgnConfig& cfg, std::int32_t width, std::int32_t height,
                                   const SitePlan& plan);

// QGN1 checkpoint (little-endian): "QGN1", u32 levels, u32 num_classes,
// u32 in_channels, u32 units_per_block, u64 seed, u32 n + n x u32 encoder
// channels, u32 n + n x u32 decoder channels, u64 parameter count, then each
// tensor in for_each_param order as f32 weights followed by f32 bias.
std::vector<std::uint8_t> encode_checkpoint(const QgnModel<float>& model);
QgnModel<float> decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const QgnModel<float>& model, const std::filesystem::path& path);
QgnModel<float> load_checkpoint(const std::filesystem::path& path);

extern template class QgnModel<float>;
extern template class QgnModel<double>;

}  // namespace qgn
