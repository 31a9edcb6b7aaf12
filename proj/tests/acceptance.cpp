// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "qgn/cli.hpp"
#include "qgn/model.hpp"
#include "qgn/quadtree.hpp"
#include "qgn/training.hpp"
#include "qgn/verify.hpp"

using namespace qgn;

namespace {

// Tolerances and budgets.
constexpr double kRatioTolerance = 0.03;  // percentage points
constexpr double kOracleTolerance = 1e-6;
constexpr double kGradTolF32 = 1e-2;
constexpr double kGradTolF64 = 1e-5;
constexpr double kEmaTolerance = 1e-12;
constexpr double kMinPcMiou = 0.70;
constexpr double kPcActivationShare = 0.6;
constexpr double kMaxCompositeShare = 0.10;
constexpr double kBudget1 = 1.0, kBudget2 = 30.0, kBudget3 = 60.0, kBudget4 = 120.0, kBudget6 = 600.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int run_cli_args(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "qgn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  int code = run_cli(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  return code;
}

// 1. Published per-level percentages -> published storage ratio, through the
//    stats subcommand.
Outcome table_ratios() {
  struct Row {
    const char* name;
    const char* percent;
    double ratio;
  };
  const Row rows[] = {
      {"cityscapes-train", "66.34,14.21,9.18,5.52,3.02,1.70", 3.07},
      {"cityscapes-val", "65.12,14.44,9.53,5.85,3.22,1.81", 3.25},
      {"sun13-train", "56.26,18.22,11.78,7.09,4.20,2.43", 4.24},
      {"sun13-val", "55.57,18.50,11.98,7.22,4.27,2.46", 4.29},
      {"sun37-train", "56.11,18.27,11.82,7.12,4.22,2.44", 4.25},
      {"sun37-val", "55.40,18.54,12.03,7.25,4.29,2.47", 4.31},
      {"ade-train", "47.48,21.40,14.44,8.68,5.05,2.93", 5.09},
      {"ade-val", "47.25,21.44,14.49,8.74,5.10,2.96", 5.14},
  };
  auto t0 = Clock::now();
  double worst = 0;
  std::string worst_row;
  bool ok = true;
  for (const auto& r : rows) {
    std::string out;
    if (run_cli_args({"stats", r.percent, "--format", "csv"}, &out) != 0) return {false, std::string(r.name) + " failed"};
    double got = std::stod(out.substr(out.find(',') + 1));
    double dev = std::abs(got - r.ratio);
    if (dev > worst) worst = dev, worst_row = r.name;
    ok = ok && dev <= kRatioTolerance;
  }
  double t = seconds_since(t0);
  return {ok && t < kBudget1,
          "8 rows, max |dev| " + fmt("%.4f", worst) + " pp (" + worst_row + "), " + fmt("%.3f", t) + " s"};
}

// 2. Codec round trip on 1000 masks up to 512x512 with 2..150 classes.
Outcome codec_round_trip() {
  auto t0 = Clock::now();
  std::size_t failures = 0, records = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    std::mt19937_64 e(s);
    std::uint32_t w = 32 * (1 + e() % 16), h = 32 * (1 + e() % 16);
    std::uint32_t k = 2 + e() % 149;
    std::uint32_t shapes = e() % 40;
    Mask m = gen_synthetic(w, h, k, shapes, e());
    Quadtree qt = decode_quadtree(encode_quadtree(quadtree_encode(build_t_pyramid(m, 5))));
    std::uint64_t area = 0;
    for (const auto& r : qt.records) area += std::uint64_t{1} << (2 * r.level);
    records += qt.records.size();
    if (area != std::uint64_t{w} * h || quadtree_decode(qt, w, h) != m) ++failures;
  }
  double t = seconds_since(t0);
  return {failures == 0 && t < kBudget2,
          "1000 masks, " + std::to_string(failures) + " failures, " + std::to_string(records) + " records, " +
              fmt("%.2f", t) + " s"};
}

// 3. Sparse conv against the masked dense conv, forward and backward.
Outcome sparse_dense_oracle() {
  auto t0 = Clock::now();
  double worst = 0, dmin = 1, dmax = 0;
  for (std::uint64_t s = 0; s < 500; ++s) {
    worst = std::max(worst, sparse_vs_masked_dense<float>(s).max());
    double d = oracle_case_from_seed(s).density;
    dmin = std::min(dmin, d);
    dmax = std::max(dmax, d);
  }
  double t = seconds_since(t0);
  return {worst < kOracleTolerance && t < kBudget3,
          "500 cases, densities " + fmt("%.2f", dmin) + ".." + fmt("%.2f", dmax) + ", max err " + fmt("%.3g", worst) +
              ", " + fmt("%.2f", t) + " s"};
}

// 4. End-to-end finite differences on a 32x32, k=3, L=5 model.
Outcome model_gradients() {
  auto t0 = Clock::now();
  QgnConfig cfg;
  cfg.num_classes = 3;
  cfg.levels = 5;
  cfg.encoder_channels = {4, 4, 6, 6, 8, 8};
  cfg.decoder_channels = {8, 8, 6, 6, 4, 4};
  cfg.units_per_block = 1;
  bool ok = true;
  std::string detail;
  for (auto scheme : {PropagationScheme::All, PropagationScheme::GTC}) {
    auto a = model_gradient_check<float>(cfg, 32, scheme, 12, 1);
    auto b = model_gradient_check<double>(cfg, 32, scheme, 12, 1);
    ok = ok && a.checked >= 10 && b.checked >= 10 && a.max_rel_error < kGradTolF32 && b.max_rel_error < kGradTolF64;
    detail += to_string(scheme) + ": f32 " + fmt("%.2e", a.max_rel_error) + " f64 " + fmt("%.2e", b.max_rel_error) +
              " (" + std::to_string(a.checked) + " params); ";
  }
  double t = seconds_since(t0);
  return {ok && t < kBudget4, detail + fmt("%.2f", t) + " s"};
}

// 5. Loss weighting and schedule identities.
Outcome loss_identities() {
  std::vector<double> v{0.3, 1.7, 0.25, 2.5, 0.9, 1.1};
  double plain = 0;
  for (double x : v) plain += x;
  bool fixed1 = total_loss(v, LossWeights::fixed(1.0, 5)) == plain;
  std::vector<double> ones(6, 1.0);
  double geo = total_loss(ones, LossWeights::fixed(0.75, 5));
  bool geometric = geo == 3.2880859375;
  double ema_err = 0;
  const double c = 2.5, delta = 0.99;
  LossWeights lw = LossWeights::adaptive(5, delta);
  std::vector<double> cs(6, c);
  for (int n = 1; n <= 500; ++n) {
    lw = update_adaptive(lw, cs);
    for (double b : lw.beta) ema_err = std::max(ema_err, std::abs(b - (c + std::pow(delta, n) * (1 - c))));
  }
  TrainConfig tc;
  tc.i_max = 2000;
  bool lr = lr_at(tc, 0) == tc.alpha0 && lr_at(tc, tc.i_max) == 0.0;
  bool ok = fixed1 && geometric && ema_err <= kEmaTolerance && lr;
  return {ok, std::string("gamma=1 ") + (fixed1 ? "ok" : "bad") + ", gamma=0.75 -> " + fmt("%.10f", geo) +
                  ", EMA max err " + fmt("%.2e", ema_err) + ", lr " + (lr ? "ok" : "bad")};
}

// Largest composite share over the levels with at least 16x16 cells.
double composite_share(const TPyramid& tp) {
  double worst = 0;
  for (int l = 1; l <= tp.max_level(); ++l) {
    const auto& g = tp.level(l);
    if (g.width < 16 || g.height < 16) continue;
    std::size_t n = 0;
    for (auto v : g.cells) n += v == kComposite;
    worst = std::max(worst, double(n) / double(g.cells.size()));
  }
  return worst;
}

// 6. Scheme ordering after training on the synthetic task.
Outcome scheme_ordering() {
  auto t0 = Clock::now();
  QgnConfig cfg;
  cfg.num_classes = 4;
  cfg.encoder_channels = {8, 16, 32, 32, 64, 64};
  cfg.decoder_channels = {64, 32, 32, 16, 8, 8};
  SyntheticDataConfig dc;
  dc.width = dc.height = 64;
  dc.num_classes = 4;
  dc.n_shapes = 3;
  dc.train_count = 256;
  dc.val_count = 64;
  const TrainingData data = make_synthetic_data(dc, cfg.levels);
  TrainConfig tc;
  tc.i_max = 2000;
  tc.batch_size = 2;
  tc.eval_interval = 500;

  auto train_with = [&](PropagationScheme scheme) {
    QgnModel<float> m = init_model<float>(cfg);
    train(m, data, scheme, LossWeights::fixed(1.0, cfg.levels), tc, nullptr);
    return m;
  };
  auto all_future = std::async(std::launch::async, train_with, PropagationScheme::All);
  auto gtc_future = std::async(std::launch::async, train_with, PropagationScheme::GTC);
  const QgnModel<float> all_model = all_future.get();
  const QgnModel<float> gtc_model = gtc_future.get();
  double t = seconds_since(t0);

  std::vector<Sample<float>> simple;
  for (const auto& s : data.validation)
    if (composite_share(s.pyramid) <= kMaxCompositeShare) simple.push_back(s);

  auto all_all = evaluate(all_model, data.validation, PropagationScheme::All);
  auto all_pc = evaluate(all_model, data.validation, PropagationScheme::PC);
  auto gtc_gtc = evaluate(gtc_model, data.validation, PropagationScheme::GTC);
  auto gtc_pc = evaluate(gtc_model, data.validation, PropagationScheme::PC);
  double share = 1.0;
  if (!simple.empty())
    share = double(evaluate(all_model, simple, PropagationScheme::PC).decoder_scalars) /
            double(evaluate(all_model, simple, PropagationScheme::All).decoder_scalars);

  bool ordering = all_all.metrics.mean_iou >= all_pc.metrics.mean_iou && all_pc.metrics.mean_iou >= kMinPcMiou;
  bool memory = !simple.empty() && share <= kPcActivationShare;
  bool upper = gtc_gtc.metrics.mean_iou >= gtc_pc.metrics.mean_iou;
  return {ordering && memory && upper && t < kBudget6,
          "train-all: all " + fmt("%.3f", all_all.metrics.mean_iou) + " >= pc " + fmt("%.3f", all_pc.metrics.mean_iou) +
              "; pc/all decoder scalars " + fmt("%.3f", share) + " on " + std::to_string(simple.size()) + "/" +
              std::to_string(data.validation.size()) + " masks; train-gtc: gtc " +
              fmt("%.3f", gtc_gtc.metrics.mean_iou) + " >= pc " + fmt("%.3f", gtc_pc.metrics.mean_iou) +
              "; training " + fmt("%.1f", t) + " s"};
}

// 7. Predicted activation counts equal the instrumented forward pass.
Outcome memory_accounting() {
  std::size_t mismatches = 0, violations = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    std::mt19937_64 e(s);
    QgnConfig cfg;
    cfg.levels = 1 + static_cast<int>(e() % 5);
    cfg.num_classes = 2 + static_cast<int>(e() % 5);
    cfg.units_per_block = 1 + static_cast<int>(e() % 2);
    cfg.encoder_channels.clear();
    cfg.decoder_channels.clear();
    for (int l = 0; l <= cfg.levels; ++l) {
      cfg.encoder_channels.push_back(1 + static_cast<int>(e() % 6));
      cfg.decoder_channels.push_back(1 + static_cast<int>(e() % 6));
    }
    cfg.seed = e();
    const std::uint32_t cell = 1u << cfg.levels;
    const std::uint32_t w = cell * (1 + e() % 3), h = cell * (1 + e() % 3);
    Mask mask = gen_synthetic(std::max(w, 8u), std::max(h, 8u), cfg.num_classes, e() % 6, e());
    if (mask.width % cell || mask.height % cell) mask = pad_to_multiple(mask, cell);
    const TPyramid tp = build_t_pyramid(mask, cfg.levels);
    const auto model = init_model<float>(cfg);
    const auto image = render_image<float>(mask, 0.2, s);
    for (auto scheme : {PropagationScheme::All, PropagationScheme::GTC, PropagationScheme::PC}) {
      ActivationReport measured;
      auto pred = forward<float>(model, image, {scheme, &tp}, nullptr, &measured);
      if (count_activations(cfg, image.width, image.height, pred.plan()).layers != measured.layers) ++mismatches;
    }
    auto all = count_activations(cfg, image.width, image.height, plan_all(cfg, image.width, image.height));
    auto gtc = count_activations(cfg, image.width, image.height, plan_from_pyramid(tp));
    for (std::size_t i = 0; i < all.layers.size(); ++i)
      if (gtc.layers[i].scalars > all.layers[i].scalars || gtc.layers[i].macs > all.layers[i].macs) ++violations;
  }
  return {mismatches == 0 && violations == 0, "50 configs x 3 schemes, " + std::to_string(mismatches) +
                                                  " count mismatches, " + std::to_string(violations) +
                                                  " layers with GTC > All"};
}

// 8. Two identical training runs produce identical bytes.
Outcome determinism() {
  auto dir = oracle::temp_dir("acceptance_determinism");
  {
    std::ofstream f(dir / "run.cfg");
    f << "classes = 4\nencoder_channels = 8,16,32,32,64,64\ndecoder_channels = 64,32,32,16,8,8\n"
         "train_count = 16\nval_count = 4\niterations = 100\neval_interval = 25\nbatch_size = 2\n"
         "loss = adaptive\nseed = 11\n";
  }
  std::vector<std::uint8_t> ckpt[2], log[2];
  for (int r = 0; r < 2; ++r) {
    auto tag = std::to_string(r);
    int code = run_cli_args({"train", "--config", (dir / "run.cfg").string(), "--out",
                             (dir / ("m" + tag + ".qgn")).string(), "--log", (dir / ("l" + tag + ".tsv")).string()});
    if (code != 0) return {false, "train exited with " + std::to_string(code)};
    ckpt[r] = read_file_bytes(dir / ("m" + tag + ".qgn"));
    log[r] = read_file_bytes(dir / ("l" + tag + ".tsv"));
  }
  bool ok = ckpt[0] == ckpt[1] && log[0] == log[1] && !log[0].empty();
  return {ok, "checkpoint " + std::to_string(ckpt[0].size()) + " B " + (ckpt[0] == ckpt[1] ? "identical" : "differs") +
                  ", log " + std::to_string(log[0].size()) + " B " + (log[0] == log[1] ? "identical" : "differs")};
}

}  // namespace

int main() {
  const std::array<std::pair<const char*, std::function<Outcome()>>, 8> criteria{{
      {"published ratios", table_ratios},
      {"lossless codec", codec_round_trip},
      {"sparse/dense oracle", sparse_dense_oracle},
      {"gradient check", model_gradients},
      {"loss identities", loss_identities},
      {"scheme ordering", scheme_ordering},
      {"memory accounting", memory_accounting},
      {"determinism", determinism},
  }};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
