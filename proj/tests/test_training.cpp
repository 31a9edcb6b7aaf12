#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "qgn/errors.hpp"
#include "qgn/training.hpp"
#include "qgn/verify.hpp"

using namespace qgn;

namespace {

QgnConfig tiny_config(int k = 3) {
  QgnConfig c;
  c.num_classes = k;
  c.encoder_channels = {4, 4, 6, 6, 8, 8};
  c.decoder_channels = {8, 8, 6, 6, 4, 4};
  c.units_per_block = 1;
  return c;
}

SparseActivation<double> level_logits(const TPyramid& tp, int level, int channels, std::mt19937_64& e) {
  const auto& g = tp.level(level);
  SparseActivation<double> a(level, channels, SiteSet::full(g.width, g.height));
  for (auto& v : a.values) v = double(e() % 2001) / 100.0 - 10.0;
  return a;
}

}  // namespace

TEST(LevelLoss, ConfidentCorrectIsZero) {
  Mask m = gen_synthetic(8, 8, 3, 3, 1);
  TPyramid tp = build_t_pyramid(m, 1);
  SparseActivation<double> a(0, 4, SiteSet::full(8, 8));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int c = 0; c < 4; ++c) a.row(i)[c] = c == m.data[i] ? 30.0 : -30.0;
  EXPECT_LT(level_loss(a, tp, ClassWeights::uniform(3)), 1e-9);
}

TEST(LevelLoss, UniformLogitsGiveLogChannels) {
  TPyramid tp = build_t_pyramid(gen_synthetic(8, 8, 3, 2, 4), 1);
  SparseActivation<float> a(1, 4, SiteSet::full(4, 4));
  EXPECT_NEAR(level_loss(a, tp, ClassWeights::uniform(3)), std::log(4.0), 1e-6);
}

TEST(LevelLoss, EmptyLevelIsZero) {
  TPyramid tp = build_t_pyramid(Mask{8, 8, 2}, 2);
  SparseActivation<float> a(2, 3, SiteSet::make(2, 2, {}));
  EXPECT_EQ(level_loss(a, tp, ClassWeights::uniform(2)), 0.0);
}

TEST(LevelLoss, MatchesReferenceCrossEntropy) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    std::mt19937_64 e(s);
    Mask m = oracle::random_mask(6, 4, 3, s);
    TPyramid tp = build_t_pyramid(m, 1);
    ClassWeights cw = ClassWeights::uniform(3);
    cw.weight[1 + e() % 3] = 2.0;
    std::vector<Site> sites;
    for (int i = 0; i < 6; ++i) sites.push_back({int(i % 3), int(i / 3)});
    SparseActivation<double> a(1, 4, SiteSet::make(3, 2, sites));
    for (auto& v : a.values) v = double(e() % 2001) / 200.0 - 5.0;
    double ref = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      const Site& st = (*a.sites)[i];
      int label = query(tp, 1, st.x, st.y);
      ref += oracle::cross_entropy({a.row(i).begin(), a.row(i).end()}, label, cw(label));
    }
    EXPECT_NEAR(level_loss(a, tp, cw), ref / 6, 1e-6);
  }
}

TEST(LevelLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 e(3);
  TPyramid tp = build_t_pyramid(gen_synthetic(8, 8, 4, 4, 3), 2);
  ClassWeights cw{{1, 2, 1, 1, 2}};
  auto a = level_logits(tp, 1, 5, e);
  auto g = a;
  level_loss(a, tp, cw, &g, 1.0);
  for (std::size_t i = 0; i < a.values.size(); i += 3) {
    auto p = a, q = a;
    p.values[i] += 1e-6;
    q.values[i] -= 1e-6;
    EXPECT_NEAR(g.values[i], (level_loss(p, tp, cw) - level_loss(q, tp, cw)) / 2e-6, 1e-7);
  }
}

TEST(LevelLoss, ChannelMismatch) {
  TPyramid tp = build_t_pyramid(Mask{4, 4, 3}, 1);
  SparseActivation<float> a(0, 3, SiteSet::full(4, 4));
  EXPECT_THROW(level_loss(a, tp, ClassWeights::uniform(3)), ShapeError);
}

TEST(TotalLoss, FixedAndAdaptiveWeights) {
  std::vector<double> ones(6, 1.0), v{0.5, 1.5, 2.0, 0.25, 3.0, 1.0};
  EXPECT_DOUBLE_EQ(total_loss(v, LossWeights::fixed(1.0, 5)), 8.25);
  EXPECT_EQ(total_loss(ones, LossWeights::fixed(0.75, 5)), 3.2880859375);
  EXPECT_DOUBLE_EQ(total_loss(v, LossWeights::adaptive(5)), 8.25);
}

TEST(TotalLoss, LinearInEachLevel) {
  LossWeights lw = LossWeights::fixed(0.6, 5);
  std::vector<double> v{0.5, 1.5, 2.0, 0.25, 3.0, 1.0};
  double base = total_loss(v, lw);
  for (int l = 0; l <= 5; ++l) {
    auto w = v;
    w[l] += 1.0;
    EXPECT_NEAR(total_loss(w, lw) - base, std::pow(0.6, l), 1e-12);
  }
}

TEST(Adaptive, OneStepAndClosedForm) {
  LossWeights lw = LossWeights::adaptive(5, 0.99);
  std::vector<double> three(6, 3.0);
  auto next = update_adaptive(lw, three);
  for (double b : next.beta) EXPECT_NEAR(b, 1.02, 1e-15);
  const double c = 0.37;
  std::vector<double> cs(6, c);
  for (int n = 1; n <= 200; ++n) {
    lw = update_adaptive(lw, cs);
    for (double b : lw.beta) ASSERT_NEAR(b, c + std::pow(0.99, n) * (1 - c), 1e-12);
  }
}

TEST(Adaptive, DeltaOneFreezesAndFixedModeRejects) {
  LossWeights lw = LossWeights::adaptive(5, 1.0);
  std::vector<double> v(6, 9.0);
  EXPECT_EQ(update_adaptive(lw, v).beta, lw.beta);
  EXPECT_THROW(update_adaptive(LossWeights::fixed(0.5, 5), v), ModeError);
}

TEST(LearningRate, Schedule) {
  TrainConfig cfg;
  cfg.alpha0 = 0.02;
  cfg.rho = 0.9;
  cfg.i_max = 1000;
  EXPECT_EQ(lr_at(cfg, 0), 0.02);
  EXPECT_EQ(lr_at(cfg, 1000), 0.0);
  EXPECT_NEAR(lr_at(cfg, 500), 0.010717, 1e-6);
  for (std::uint64_t i = 1; i <= 1000; ++i) ASSERT_LE(lr_at(cfg, i), lr_at(cfg, i - 1));
  EXPECT_THROW(lr_at(cfg, 1001), BoundsError);
}

TEST(ClassWeighting, BelowLowerMedianDoubles) {
  auto w = [](std::vector<double> iou) { return update_class_weights(iou).weight; };
  EXPECT_EQ(w({0.9, 0.9, 0.9}), (std::vector<double>{1, 1, 1, 1}));
  EXPECT_EQ(w({0.2, 0.5, 0.8}), (std::vector<double>{1, 2, 1, 1}));
  EXPECT_EQ(w({0.1, 0.2, 0.3, 0.4}), (std::vector<double>{1, 2, 1, 1, 1}));
  EXPECT_EQ(w({0.4, 0.3, 0.2, 0.1}), (std::vector<double>{1, 1, 1, 1, 2}));
}

TEST(Metrics, PerfectAndSwapped) {
  Mask m = gen_synthetic(16, 16, 3, 4, 2);
  auto r = metrics(m, m);
  EXPECT_EQ(r.pixel_accuracy, 1.0);
  EXPECT_EQ(r.mean_iou, 1.0);
  Mask a{4, 4, 2, 1}, b{4, 4, 2, 2};
  for (std::uint32_t x = 0; x < 4; ++x) a.at(x, 0) = 2, b.at(x, 0) = 1;
  auto s = metrics(b, a);
  EXPECT_EQ(s.pixel_accuracy, 0.0);
  EXPECT_EQ(s.mean_iou, 0.0);
  EXPECT_THROW(metrics(Mask{4, 4, 2}, Mask{4, 2, 2}), ShapeError);
}

TEST(Metrics, HandCountedIou) {
  // class 1: TP 4, FP 2, FN 2
  Mask gt{4, 4, 3, 3}, pred{4, 4, 3, 3};
  for (std::uint32_t x = 0; x < 4; ++x) gt.at(x, 0) = pred.at(x, 0) = 1;
  gt.at(0, 1) = gt.at(1, 1) = 1;
  pred.at(2, 1) = pred.at(3, 1) = 1;
  auto r = metrics(pred, gt);
  EXPECT_DOUBLE_EQ(r.class_iou[0], 0.5);
  EXPECT_DOUBLE_EQ(r.pixel_accuracy, 12.0 / 16);
  EXPECT_FALSE(r.class_present[1]);
  EXPECT_DOUBLE_EQ(r.class_iou[2], 8.0 / 12);
  EXPECT_DOUBLE_EQ(r.mean_iou, (0.5 + 8.0 / 12) / 2);
}

TEST(TrainStep, ZeroLearningRateKeepsParameters) {
  auto model = init_model<float>(tiny_config());
  std::vector<Sample<float>> batch{make_sample<float>(gen_synthetic(32, 32, 3, 3, 1), 5, 0.1, 1)};
  TrainConfig cfg;
  cfg.alpha0 = 1e-30;
  cfg.i_max = 10;
  auto before = encode_checkpoint(model);
  LossWeights lw = LossWeights::fixed(1.0, 5);
  Sgd<float> sgd;
  auto r = train_step(model, std::span<const Sample<float>>(batch), PropagationScheme::All, lw,
                      ClassWeights::uniform(3), cfg, 10, sgd);
  EXPECT_EQ(r.lr, 0.0);
  EXPECT_TRUE(std::isfinite(r.total_loss));
  EXPECT_EQ(encode_checkpoint(model), before);
}

TEST(TrainStep, PcIsRejected) {
  auto model = init_model<float>(tiny_config());
  std::vector<Sample<float>> batch{make_sample<float>(gen_synthetic(32, 32, 3, 3, 1), 5, 0.1, 1)};
  LossWeights lw = LossWeights::fixed(1.0, 5);
  Sgd<float> sgd;
  EXPECT_THROW(train_step(model, std::span<const Sample<float>>(batch), PropagationScheme::PC, lw,
                          ClassWeights::uniform(3), TrainConfig{}, 0, sgd),
               ConfigError);
}

TEST(TrainStep, LossDecreasesOnFixedBatch) {
  auto model = init_model<float>(tiny_config());
  std::vector<Sample<float>> batch{make_sample<float>(gen_synthetic(32, 32, 3, 3, 0), 5, 0.1, 0),
                                   make_sample<float>(gen_synthetic(32, 32, 3, 3, 1), 5, 0.1, 1)};
  TrainConfig cfg;
  cfg.i_max = 50;
  LossWeights lw = LossWeights::fixed(1.0, 5);
  Sgd<float> sgd;
  std::span<const Sample<float>> b(batch);
  double first = 0, last = 0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    auto r = train_step(model, b, PropagationScheme::All, lw, ClassWeights::uniform(3), cfg, i, sgd);
    if (i == 0) first = r.total_loss;
  }
  last = compute_loss(model, b, PropagationScheme::All, lw, ClassWeights::uniform(3), false).total_loss;
  EXPECT_LT(last, first);
}

TEST(TrainStep, GtcLossOnlyAtGtCompositeCells) {
  auto model = init_model<float>(tiny_config());
  Mask mask = gen_synthetic(64, 64, 3, 4, 6);
  std::vector<Sample<float>> batch{make_sample<float>(mask, 5, 0.1, 6)};
  auto r = compute_loss(model, std::span<const Sample<float>>(batch), PropagationScheme::GTC,
                        LossWeights::fixed(1.0, 5), ClassWeights::uniform(3), false);
  TPyramid tp = build_t_pyramid(mask, 5);
  EXPECT_EQ(r.active_cells[5], 4u);
  for (int l = 4; l >= 0; --l) {
    std::size_t composite = 0;
    for (auto v : tp.level(l + 1).cells) composite += v == kComposite;
    EXPECT_EQ(r.active_cells[l], 4 * composite) << l;
  }
}

TEST(TrainStep, ModelGradientMatchesFiniteDifferences) {
  for (auto scheme : {PropagationScheme::All, PropagationScheme::GTC}) {
    auto f32 = model_gradient_check<float>(tiny_config(), 32, scheme, 10, 1);
    EXPECT_GE(f32.checked, 10u);
    EXPECT_LT(f32.max_rel_error, 1e-2);
    auto f64 = model_gradient_check<double>(tiny_config(), 32, scheme, 10, 1);
    EXPECT_LT(f64.max_rel_error, 1e-5);
  }
}

TEST(Train, DeterministicLogAndCheckpoint) {
  SyntheticDataConfig dc;
  dc.width = dc.height = 32;
  dc.num_classes = 3;
  dc.train_count = 4;
  dc.val_count = 2;
  auto data = make_synthetic_data(dc, 5);
  TrainConfig cfg;
  cfg.i_max = 20;
  cfg.eval_interval = 10;
  std::string logs[2];
  std::vector<std::uint8_t> ckpt[2];
  for (int run = 0; run < 2; ++run) {
    auto model = init_model<float>(tiny_config());
    std::ostringstream log;
    train(model, data, PropagationScheme::All, LossWeights::adaptive(5), cfg, &log);
    logs[run] = log.str();
    ckpt[run] = encode_checkpoint(model);
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_EQ(ckpt[0], ckpt[1]);
  EXPECT_EQ(logs[0][0], '#');
}
