#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "qgn/mask.hpp"
#include "qgn/model.hpp"
#include "qgn/quadtree.hpp"
#include "qgn/tensor.hpp"

namespace qgn {

/// Per-level loss weights. Fixed: beta_l = gamma^l (beta_0 = 1).
/// Adaptive: beta starts at 1 and tracks an exponential moving average of
/// each level's loss with factor delta.
struct LossWeights {
  enum class Mode { Fixed, Adaptive };

  Mode mode = Mode::Fixed;
  double gamma = 1.0;
  double delta = 0.99;
  std::vector<double> beta;  // index = level
  std::uint64_t iteration = 0;

  static LossWeights fixed(double gamma, int levels);
  static LossWeights adaptive(int levels, double delta = 0.99);
};

struct TrainConfig {
  double alpha0 = 0.02;
  double rho = 0.9;
  std::uint64_t i_max = 1000;
  std::uint64_t reweight_interval = 500;
  std::uint64_t eval_interval = 100;
  double momentum = 0.0;
  int batch_size = 1;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

/// Loss multiplier per class id (index 0 = composite, always 1).
struct ClassWeights {
  std::vector<double> weight;

  static ClassWeights uniform(int num_classes);
  double operator()(ClassId c) const { return weight.at(c); }
};

/// Counts indexed [true][predicted] over ids 0..size-1.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int size) : size_(size), counts_(static_cast<std::size_t>(size) * size, 0) {}

  void add(ClassId truth, ClassId predicted, std::uint64_t n = 1);
  void add(const Mask& predicted, const Mask& truth);
  std::uint64_t at(int truth, int predicted) const {
    return counts_[static_cast<std::size_t>(truth) * size_ + predicted];
  }
  int size() const { return size_; }
  std::uint64_t total() const;
  std::uint64_t correct() const;
  bool present(int c) const;  // appears in truth or prediction
  double iou(int c) const;    // 0 when absent

 private:
  int size_;
  std::vector<std::uint64_t> counts_;
};

struct SegmentationMetrics {
  double pixel_accuracy = 0.0;
  std::vector<double> class_iou;  // entry c - 1 for class c; absent classes score 0
  std::vector<bool> class_present;
  double mean_iou = 0.0;  // over classes present in truth or prediction
};

SegmentationMetrics metrics_from_confusion(const ConfusionMatrix& cm);
SegmentationMetrics metrics(const Mask& predicted, const Mask& truth);

/// Mean over the active cells of the class-weighted softmax cross-entropy
/// against the pyramid label of each cell. An empty level scores 0. When
/// `grad` is given it receives d(loss)/d(logits) multiplied by `grad_scale`.
template <typename T>
double level_loss(const SparseActivation<T>& logits, const TPyramid& gt, const ClassWeights& cw,
                  SparseActivation<T>* grad = nullptr, double grad_scale = 1.0);

double total_loss(std::span<const double> level_losses, const LossWeights& lw);

/// One EMA step; levels whose `active_cells` entry is 0 keep their weight.
LossWeights update_adaptive(const LossWeights& lw, std::span<const double> level_losses,
                            std::span<const std::size_t> active_cells = {});

/// alpha0 * (1 - i / i_max)^rho; throws BoundsError outside [0, i_max].
double lr_at(const TrainConfig& cfg, std::uint64_t i);

/// Classes strictly below the lower median IoU get weight 2, the rest 1.
/// `iou` holds one entry per dataset class (class c at index c - 1).
ClassWeights update_class_weights(std::span<const double> iou);

template <typename T>
struct Sample {
  Mask mask;
  TPyramid pyramid;
  DenseTensor<T> image;
};

/// Colour image for a mask: a fixed colour per class plus uniform noise in
/// [-noise, noise] drawn from mt19937_64(seed).
template <typename T>
DenseTensor<T> render_image(const Mask& mask, double noise, std::uint64_t seed);

template <typename T>
Sample<T> make_sample(const Mask& mask, int levels, double noise, std::uint64_t seed);

struct StepResult {
  double total_loss = 0.0;
  std::vector<double> level_losses;       // index = level
  std::vector<std::size_t> active_cells;  // index = level, summed over the batch
  double lr = 0.0;
  std::uint64_t decoder_scalars = 0;  // summed over the batch
};

/// Forward + loss over a batch; with `with_gradients` also zeroes and fills
/// the parameter gradients. Levels are pooled over the batch: each level's
/// loss is the mean over all of its active cells in the batch.
template <typename T>
StepResult compute_loss(QgnModel<T>& model, std::span<const Sample<T>> batch, PropagationScheme scheme,
                        const LossWeights& lw, const ClassWeights& cw, bool with_gradients);

template <typename T>
class Sgd {
 public:
  explicit Sgd(double momentum = 0.0) : momentum_(momentum) {}
  void step(QgnModel<T>& model, double lr);

 private:
  double momentum_;
  std::vector<std::vector<T>> velocity_;
};

/// Forward, level losses at active cells, weighted total, backward, SGD
/// update with lr_at(cfg, i), then the adaptive weight update (if any).
/// PC is rejected with ConfigError.
template <typename T>
StepResult train_step(QgnModel<T>& model, std::span<const Sample<T>> batch, PropagationScheme scheme, LossWeights& lw,
                      const ClassWeights& cw, const TrainConfig& cfg, std::uint64_t i, Sgd<T>& sgd);

struct EvalResult {
  SegmentationMetrics metrics;
  std::uint64_t decoder_scalars = 0;  // summed over the samples
  std::uint64_t decoder_macs = 0;
};

EvalResult evaluate(const QgnModel<float>& model, std::span<const Sample<float>> samples, PropagationScheme scheme);

struct SyntheticDataConfig {
  std::uint32_t width = 64;
  std::uint32_t height = 64;
  std::uint32_t num_classes = 4;
  std::uint32_t n_shapes = 3;
  std::uint32_t train_count = 32;
  std::uint32_t val_count = 8;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

struct TrainingData {
  std::vector<Sample<float>> train;  // includes horizontally flipped copies
  std::vector<Sample<float>> validation;
};

TrainingData make_synthetic_data(const SyntheticDataConfig& cfg, int levels);
TrainingData make_training_data(const std::vector<Mask>& train_masks, const std::vector<Mask>& val_masks, int levels,
                                double noise, std::uint64_t seed);

struct TrainOutcome {
  LossWeights loss_weights;
  ClassWeights class_weights;
  StepResult last_step;
};

/// Runs cfg.i_max iterations of train_step. Writes the tab-separated log
/// (header line starting with '#') to `log` when given.
TrainOutcome train(QgnModel<float>& model, const TrainingData& data, PropagationScheme scheme, LossWeights lw,
                   const TrainConfig& cfg, std::ostream* log);

}  // namespace qgn
