#include "qgn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <random>
#include <string>

#include "qgn/errors.hpp"

namespace qgn {

LossWeights LossWeights::fixed(double gamma, int levels) {
  if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
  LossWeights lw;
  lw.mode = Mode::Fixed;
  lw.gamma = gamma;
  double beta = 1.0;
  for (int l = 0; l <= levels; ++l) {
    lw.beta.push_back(beta);
    beta *= gamma;
  }
  return lw;
}

LossWeights LossWeights::adaptive(int levels, double delta) {
  if (delta < 0.0 || delta > 1.0) throw ConfigError("delta must be in [0, 1]");
  LossWeights lw;
  lw.mode = Mode::Adaptive;
  lw.delta = delta;
  lw.beta.assign(static_cast<std::size_t>(levels) + 1, 1.0);
  return lw;
}

void TrainConfig::validate() const {
  if (!(alpha0 > 0.0)) throw ConfigError("alpha0 must be > 0");
  if (!(rho > 0.0)) throw ConfigError("rho must be > 0");
  if (i_max < 1) throw ConfigError("i_max must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
}

ClassWeights ClassWeights::uniform(int num_classes) {
  ClassWeights cw;
  cw.weight.assign(static_cast<std::size_t>(num_classes) + 1, 1.0);
  return cw;
}

void ConfusionMatrix::add(ClassId truth, ClassId predicted, std::uint64_t n) {
  if (truth >= size_ || predicted >= size_) throw ClassRangeError("class id outside the confusion matrix");
  counts_[static_cast<std::size_t>(truth) * size_ + predicted] += n;
}

void ConfusionMatrix::add(const Mask& predicted, const Mask& truth) {
  if (predicted.width != truth.width || predicted.height != truth.height)
    throw ShapeError("prediction and ground truth dims differ");
  for (std::size_t i = 0; i < truth.data.size(); ++i) add(truth.data[i], predicted.data[i]);
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

std::uint64_t ConfusionMatrix::correct() const {
  std::uint64_t n = 0;
  for (int c = 0; c < size_; ++c) n += at(c, c);
  return n;
}

bool ConfusionMatrix::present(int c) const {
  for (int o = 0; o < size_; ++o)
    if (at(c, o) != 0 || at(o, c) != 0) return true;
  return false;
}

double ConfusionMatrix::iou(int c) const {
  const std::uint64_t tp = at(c, c);
  std::uint64_t fp = 0, fn = 0;
  for (int o = 0; o < size_; ++o) {
    if (o == c) continue;
    fp += at(o, c);
    fn += at(c, o);
  }
  const std::uint64_t denom = tp + fp + fn;
  return denom == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(denom);
}

SegmentationMetrics metrics_from_confusion(const ConfusionMatrix& cm) {
  SegmentationMetrics m;
  const std::uint64_t total = cm.total();
  m.pixel_accuracy = total == 0 ? 0.0 : static_cast<double>(cm.correct()) / static_cast<double>(total);
  double sum = 0.0;
  int present = 0;
  for (int c = 1; c < cm.size(); ++c) {
    const bool p = cm.present(c);
    m.class_present.push_back(p);
    m.class_iou.push_back(cm.iou(c));
    if (p) {
      sum += m.class_iou.back();
      ++present;
    }
  }
  m.mean_iou = present == 0 ? 0.0 : sum / present;
  return m;
}

SegmentationMetrics metrics(const Mask& predicted, const Mask& truth) {
  if (predicted.width != truth.width || predicted.height != truth.height)
    throw ShapeError("prediction and ground truth dims differ");
  ConfusionMatrix cm(static_cast<int>(std::max(predicted.num_classes, truth.num_classes)) + 1);
  cm.add(predicted, truth);
  return metrics_from_confusion(cm);
}

template <typename T>
double level_loss(const SparseActivation<T>& logits, const TPyramid& gt, const ClassWeights& cw,
                  SparseActivation<T>* grad, double grad_scale) {
  const auto channels = static_cast<std::int32_t>(gt.num_classes) + 1;
  if (logits.channels != channels) throw ShapeError("logits need num_classes + 1 channels");
  if (logits.level < 0 || logits.level > gt.max_level()) throw ShapeError("ground truth has no such level");
  const LabelGrid& labels = gt.level(logits.level);
  if (logits.sites && (static_cast<std::uint32_t>(logits.width()) != labels.width ||
                       static_cast<std::uint32_t>(logits.height()) != labels.height))
    throw ShapeError("logit grid does not match the ground-truth level");
  const std::size_t n = logits.size();
  if (grad) *grad = SparseActivation<T>(logits.level, logits.channels, logits.sites);
  if (n == 0) return 0.0;

  std::vector<double> prob(static_cast<std::size_t>(channels));
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Site& s = (*logits.sites)[i];
    const ClassId label = labels.at(static_cast<std::uint32_t>(s.x), static_cast<std::uint32_t>(s.y));
    const auto z = logits.row(i);
    double zmax = static_cast<double>(z[0]);
    for (auto v : z) zmax = std::max(zmax, static_cast<double>(v));
    double denom = 0.0;
    for (std::size_t c = 0; c < prob.size(); ++c) {
      prob[c] = std::exp(static_cast<double>(z[c]) - zmax);
      denom += prob[c];
    }
    const double w = cw(label);
    sum += w * (zmax + std::log(denom) - static_cast<double>(z[label]));
    if (grad) {
      auto g = grad->row(i);
      const double scale = grad_scale * w / static_cast<double>(n);
      for (std::size_t c = 0; c < prob.size(); ++c) {
        const double target = c == label ? 1.0 : 0.0;
        g[c] = static_cast<T>(scale * (prob[c] / denom - target));
      }
    }
  }
  return sum / static_cast<double>(n);
}

template double level_loss(const SparseActivation<float>&, const TPyramid&, const ClassWeights&,
                           SparseActivation<float>*, double);
template double level_loss(const SparseActivation<double>&, const TPyramid&, const ClassWeights&,
                           SparseActivation<double>*, double);

double total_loss(std::span<const double> level_losses, const LossWeights& lw) {
  if (lw.beta.size() < level_losses.size()) throw ShapeError("missing loss weight for a level");
  double total = 0.0;
  for (std::size_t l = 0; l < level_losses.size(); ++l) total += lw.beta[l] * level_losses[l];
  return total;
}

LossWeights update_adaptive(const LossWeights& lw, std::span<const double> level_losses,
                            std::span<const std::size_t> active_cells) {
  if (lw.mode != LossWeights::Mode::Adaptive) throw ModeError("adaptive update called on fixed loss weights");
  if (lw.beta.size() < level_losses.size()) throw ShapeError("missing loss weight for a level");
  LossWeights next = lw;
  for (std::size_t l = 0; l < level_losses.size(); ++l) {
    if (!active_cells.empty() && active_cells[l] == 0) continue;
    next.beta[l] = lw.delta * lw.beta[l] + (1.0 - lw.delta) * level_losses[l];
  }
  ++next.iteration;
  return next;
}

double lr_at(const TrainConfig& cfg, std::uint64_t i) {
  if (i > cfg.i_max) throw BoundsError("iteration " + std::to_string(i) + " beyond i_max");
  const double frac = 1.0 - static_cast<double>(i) / static_cast<double>(cfg.i_max);
  return cfg.alpha0 * std::pow(frac, cfg.rho);
}

ClassWeights update_class_weights(std::span<const double> iou) {
  if (iou.empty()) throw InputError("need at least one class IoU");
  std::vector<double> sorted(iou.begin(), iou.end());
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[(sorted.size() - 1) / 2];
  ClassWeights cw = ClassWeights::uniform(static_cast<int>(iou.size()));
  for (std::size_t c = 0; c < iou.size(); ++c) cw.weight[c + 1] = iou[c] < median ? 2.0 : 1.0;
  return cw;
}

template <typename T>
DenseTensor<T> render_image(const Mask& mask, double noise, std::uint64_t seed) {
  DenseTensor<T> img(static_cast<std::int32_t>(mask.height), static_cast<std::int32_t>(mask.width), 3);
  std::vector<double> palette(3 * (std::size_t{mask.num_classes} + 1));
  for (std::uint32_t c = 0; c <= mask.num_classes; ++c) {
    const double hue = std::fmod(c * 0.6180339887498949, 1.0);
    for (int ch = 0; ch < 3; ++ch)
      palette[3 * c + ch] = std::cos(2.0 * std::numbers::pi * (hue - ch / 3.0));
  }
  std::mt19937_64 engine(seed);
  for (std::uint32_t y = 0; y < mask.height; ++y) {
    for (std::uint32_t x = 0; x < mask.width; ++x) {
      const ClassId c = mask.at(x, y);
      for (int ch = 0; ch < 3; ++ch) {
        const double u = static_cast<double>(engine() >> 11) * 0x1.0p-53;
        img.at(static_cast<std::int32_t>(x), static_cast<std::int32_t>(y), ch) =
            static_cast<T>(palette[3 * c + ch] + noise * (2.0 * u - 1.0));
      }
    }
  }
  return img;
}

template <typename T>
Sample<T> make_sample(const Mask& mask, int levels, double noise, std::uint64_t seed) {
  return Sample<T>{mask, build_t_pyramid(mask, levels), render_image<T>(mask, noise, seed)};
}

template DenseTensor<float> render_image<float>(const Mask&, double, std::uint64_t);
template DenseTensor<double> render_image<double>(const Mask&, double, std::uint64_t);
template Sample<float> make_sample<float>(const Mask&, int, double, std::uint64_t);
template Sample<double> make_sample<double>(const Mask&, int, double, std::uint64_t);

template <typename T>
StepResult compute_loss(QgnModel<T>& model, std::span<const Sample<T>> batch, PropagationScheme scheme,
                        const LossWeights& lw, const ClassWeights& cw, bool with_gradients) {
  const int L = model.config.levels;
  const std::size_t levels = static_cast<std::size_t>(L) + 1;
  if (lw.beta.size() < levels) throw ConfigError("loss weights do not cover every level");
  StepResult result;
  result.level_losses.assign(levels, 0.0);
  result.active_cells.assign(levels, 0);

  std::vector<ForwardTrace<T>> traces(batch.size());
  std::vector<PredictionQuadtree<T>> preds;
  preds.reserve(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    ActivationReport report;
    ForwardOptions opts{scheme, &batch[s].pyramid};
    preds.push_back(forward(model, batch[s].image, opts, with_gradients ? &traces[s] : nullptr, &report));
    result.decoder_scalars += report.decoder_scalars();
    for (std::size_t l = 0; l < levels; ++l) result.active_cells[l] += preds.back().levels[l].logits.size();
  }

  if (with_gradients) model.zero_grad();
  std::vector<SparseActivation<T>> grads(levels);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    for (std::size_t l = 0; l < levels; ++l) {
      const auto& logits = preds[s].levels[l].logits;
      const std::size_t pooled = result.active_cells[l];
      if (pooled == 0) {
        grads[l] = SparseActivation<T>(static_cast<int>(l), logits.channels, logits.sites);
        continue;
      }
      const double share = static_cast<double>(logits.size()) / static_cast<double>(pooled);
      const double mean = level_loss(logits, batch[s].pyramid, cw, with_gradients ? &grads[l] : nullptr,
                                     lw.beta[l] * share);
      result.level_losses[l] += share * mean;
    }
    if (with_gradients) backward(model, traces[s], std::span<const SparseActivation<T>>(grads));
  }
  result.total_loss = total_loss(result.level_losses, lw);
  return result;
}

template StepResult compute_loss(QgnModel<float>&, std::span<const Sample<float>>, PropagationScheme,
                                 const LossWeights&, const ClassWeights&, bool);
template StepResult compute_loss(QgnModel<double>&, std::span<const Sample<double>>, PropagationScheme,
                                 const LossWeights&, const ClassWeights&, bool);

template <typename T>
void Sgd<T>::step(QgnModel<T>& model, double lr) {
  std::size_t k = 0;
  const T rate = static_cast<T>(lr);
  const T mu = static_cast<T>(momentum_);
  model.for_each_param([&](ConvParams<T>& p, const std::string&) {
    const auto update = [&](std::vector<T>& values, const std::vector<T>& grad) {
      if (momentum_ == 0.0) {
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= rate * grad[i];
      } else {
        if (velocity_.size() <= k) velocity_.emplace_back(values.size(), T(0));
        auto& v = velocity_[k];
        for (std::size_t i = 0; i < values.size(); ++i) {
          v[i] = mu * v[i] + grad[i];
          values[i] -= rate * v[i];
        }
      }
      ++k;
    };
    update(p.weight, p.grad_weight);
    update(p.bias, p.grad_bias);
  });
}

template class Sgd<float>;
template class Sgd<double>;

template <typename T>
StepResult train_step(QgnModel<T>& model, std::span<const Sample<T>> batch, PropagationScheme scheme, LossWeights& lw,
                      const ClassWeights& cw, const TrainConfig& cfg, std::uint64_t i, Sgd<T>& sgd) {
  if (scheme == PropagationScheme::PC)
    throw ConfigError("PC propagation is inference-only; it is unreliable for training from scratch");
  StepResult r = compute_loss(model, batch, scheme, lw, cw, true);
  r.lr = lr_at(cfg, i);
  sgd.step(model, r.lr);
  if (lw.mode == LossWeights::Mode::Adaptive) {
    lw = update_adaptive(lw, r.level_losses, r.active_cells);
  } else {
    ++lw.iteration;
  }
  return r;
}

template StepResult train_step(QgnModel<float>&, std::span<const Sample<float>>, PropagationScheme, LossWeights&,
                               const ClassWeights&, const TrainConfig&, std::uint64_t, Sgd<float>&);
template StepResult train_step(QgnModel<double>&, std::span<const Sample<double>>, PropagationScheme, LossWeights&,
                               const ClassWeights&, const TrainConfig&, std::uint64_t, Sgd<double>&);

EvalResult evaluate(const QgnModel<float>& model, std::span<const Sample<float>> samples, PropagationScheme scheme) {
  EvalResult r;
  ConfusionMatrix cm(model.config.num_classes + 1);
  for (const auto& s : samples) {
    ActivationReport report;
    const auto pred = forward<float>(model, s.image, {scheme, &s.pyramid}, nullptr, &report);
    cm.add(assemble(pred, s.mask.width, s.mask.height), s.mask);
    r.decoder_scalars += report.decoder_scalars();
    r.decoder_macs += report.decoder_macs();
  }
  r.metrics = metrics_from_confusion(cm);
  return r;
}

TrainingData make_training_data(const std::vector<Mask>& train_masks, const std::vector<Mask>& val_masks, int levels,
                                double noise, std::uint64_t seed) {
  TrainingData data;
  std::mt19937_64 engine(seed);
  for (const Mask& m : train_masks) {
    data.train.push_back(make_sample<float>(m, levels, noise, engine()));
    data.train.push_back(make_sample<float>(hflip(m), levels, noise, engine()));
  }
  for (const Mask& m : val_masks) data.validation.push_back(make_sample<float>(m, levels, noise, engine()));
  return data;
}

TrainingData make_synthetic_data(const SyntheticDataConfig& cfg, int levels) {
  std::mt19937_64 engine(cfg.seed);
  std::vector<Mask> train_masks, val_masks;
  for (std::uint32_t i = 0; i < cfg.train_count; ++i)
    train_masks.push_back(gen_synthetic(cfg.width, cfg.height, cfg.num_classes, cfg.n_shapes, engine()));
  for (std::uint32_t i = 0; i < cfg.val_count; ++i)
    val_masks.push_back(gen_synthetic(cfg.width, cfg.height, cfg.num_classes, cfg.n_shapes, engine()));
  return make_training_data(train_masks, val_masks, levels, cfg.noise, engine());
}

namespace {

std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_log_header(std::ostream& out, int levels) {
  out << "# iter\tlr\ttotal_loss";
  for (int l = 0; l <= levels; ++l) out << "\tloss_" << l;
  for (int l = 0; l <= levels; ++l) out << "\tbeta_" << l;
  out << "\tmiou\tacc\tdecoder_activations\n";
}

}  // namespace

TrainOutcome train(QgnModel<float>& model, const TrainingData& data, PropagationScheme scheme, LossWeights lw,
                   const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (scheme == PropagationScheme::PC)
    throw ConfigError("PC propagation is inference-only; it is unreliable for training from scratch");
  if (data.train.empty()) throw InputError("no training samples");
  const int L = model.config.levels;
  TrainOutcome out;
  out.class_weights = ClassWeights::uniform(model.config.num_classes);
  Sgd<float> sgd(cfg.momentum);
  std::mt19937_64 engine(cfg.seed);
  if (log) write_log_header(*log, L);

  std::vector<Sample<float>> batch;
  for (std::uint64_t i = 0; i < cfg.i_max; ++i) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(data.train[engine() % data.train.size()]);
    const LossWeights used = lw;
    out.last_step = train_step(model, std::span<const Sample<float>>(batch), scheme, lw, out.class_weights, cfg, i, sgd);

    const std::uint64_t done = i + 1;
    const bool reweight = cfg.reweight_interval > 0 && done % cfg.reweight_interval == 0 && !data.validation.empty();
    const bool log_row = log && (done % std::max<std::uint64_t>(1, cfg.eval_interval) == 0 || done == cfg.i_max);
    if (!reweight && !log_row) continue;

    EvalResult eval;
    if (!data.validation.empty()) eval = evaluate(model, data.validation, scheme);
    if (reweight) out.class_weights = update_class_weights(eval.metrics.class_iou);
    if (log_row) {
      const StepResult& s = out.last_step;
      *log << done << '\t' << fmt_num(s.lr) << '\t' << fmt_num(s.total_loss);
      for (double v : s.level_losses) *log << '\t' << fmt_num(v);
      for (int l = 0; l <= L; ++l) *log << '\t' << fmt_num(used.beta[static_cast<std::size_t>(l)]);
      *log << '\t' << fmt_num(eval.metrics.mean_iou) << '\t' << fmt_num(eval.metrics.pixel_accuracy) << '\t'
           << s.decoder_scalars << '\n';
    }
  }
  out.loss_weights = lw;
  return out;
}

}  // namespace qgn
