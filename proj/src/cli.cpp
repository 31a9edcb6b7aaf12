#include "qgn/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "qgn/errors.hpp"
#include "qgn/mask.hpp"
#include "qgn/quadtree.hpp"

namespace qgn {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const ClassRangeError*>(&e) ||
      dynamic_cast<const IoError*>(&e))
    return exit_code::kFormat;
  if (dynamic_cast<const ShapeError*>(&e) || dynamic_cast<const BoundsError*>(&e)) return exit_code::kShape;
  if (dynamic_cast<const StructureError*>(&e)) return exit_code::kStructure;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ModeError*>(&e)) return exit_code::kConfig;
  if (dynamic_cast<const InputError*>(&e)) return exit_code::kInput;
  return exit_code::kFormat;
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw ConfigError("'" + key + "': expected an integer, got '" + value + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used == value.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "': expected a number, got '" + value + "'");
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "yes" || value == "on") return true;
  if (value == "0" || value == "false" || value == "no" || value == "off") return false;
  throw ConfigError("'" + key + "': expected a boolean, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> items;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

template <typename V>
std::string join(const std::vector<V>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<V>)
      out += fmt(values[i]);
    else
      out += std::to_string(values[i]);
  }
  return out;
}

// Keys in serialization order.
const std::vector<std::string>& keys() {
  static const std::vector<std::string> k{
      "subcommand",      "input",         "output",          "gt",          "checkpoint",    "log",
      "compare",         "dump_logits",   "seed",            "levels",      "classes",       "in_channels",
      "encoder_channels", "decoder_channels", "units_per_block", "scheme",    "format",        "alpha0",
      "rho",             "iterations",    "reweight_interval", "eval_interval", "momentum",   "batch_size",
      "loss",            "gamma",         "delta",           "width",       "height",        "n_shapes",
      "train_count",     "val_count",     "noise",           "auto_pad",    "percentages",   "verify.f64",
      "verify.cases",    "verify.fault",  "verify.suite",    "verify.case_seed", "verify.parallel"};
  return k;
}

std::string get(const RunConfig& c, const std::string& key) {
  if (key == "subcommand") return c.subcommand;
  if (key == "input") return c.input;
  if (key == "output") return c.output;
  if (key == "gt") return c.gt;
  if (key == "checkpoint") return c.checkpoint;
  if (key == "log") return c.log;
  if (key == "compare") return c.compare;
  if (key == "dump_logits") return c.dump_logits;
  if (key == "seed") return std::to_string(c.model.seed);
  if (key == "levels") return std::to_string(c.model.levels);
  if (key == "classes") return std::to_string(c.model.num_classes);
  if (key == "in_channels") return std::to_string(c.model.in_channels);
  if (key == "encoder_channels") return join(c.model.encoder_channels);
  if (key == "decoder_channels") return join(c.model.decoder_channels);
  if (key == "units_per_block") return std::to_string(c.model.units_per_block);
  if (key == "scheme") return to_string(c.scheme);
  if (key == "format") return c.format == ReportFormat::Csv ? "csv" : "text";
  if (key == "alpha0") return fmt(c.train.alpha0);
  if (key == "rho") return fmt(c.train.rho);
  if (key == "iterations") return std::to_string(c.train.i_max);
  if (key == "reweight_interval") return std::to_string(c.train.reweight_interval);
  if (key == "eval_interval") return std::to_string(c.train.eval_interval);
  if (key == "momentum") return fmt(c.train.momentum);
  if (key == "batch_size") return std::to_string(c.train.batch_size);
  if (key == "loss") return c.loss == LossWeights::Mode::Adaptive ? "adaptive" : "fixed";
  if (key == "gamma") return fmt(c.gamma);
  if (key == "delta") return fmt(c.delta);
  if (key == "width") return std::to_string(c.data.width);
  if (key == "height") return std::to_string(c.data.height);
  if (key == "n_shapes") return std::to_string(c.data.n_shapes);
  if (key == "train_count") return std::to_string(c.data.train_count);
  if (key == "val_count") return std::to_string(c.data.val_count);
  if (key == "noise") return fmt(c.data.noise);
  if (key == "auto_pad") return c.auto_pad ? "true" : "false";
  if (key == "percentages") return join(c.percentages);
  if (key == "verify.f64") return c.verify.f64 ? "true" : "false";
  if (key == "verify.cases") return std::to_string(c.verify.cases);
  if (key == "verify.fault") return c.verify.fault == KernelFault::TransposeKernel ? "transpose-kernel" : "none";
  if (key == "verify.suite") return c.verify.only_suite.value_or("");
  if (key == "verify.case_seed") return c.verify.case_seed ? std::to_string(*c.verify.case_seed) : "";
  if (key == "verify.parallel") return c.verify.parallel ? "true" : "false";
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<int> parse_channels(const std::string& key, const std::string& value) {
  std::vector<int> out;
  for (const auto& item : split_list(value)) out.push_back(parse_int<int>(key, item));
  return out;
}

}  // namespace

std::vector<std::string> config_keys() { return keys(); }

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  if (key == "subcommand") subcommand = value;
  else if (key == "input") input = value;
  else if (key == "output") output = value;
  else if (key == "gt") gt = value;
  else if (key == "checkpoint") checkpoint = value;
  else if (key == "log") log = value;
  else if (key == "compare") compare = value;
  else if (key == "dump_logits") dump_logits = value;
  else if (key == "seed") {
    const auto s = parse_int<std::uint64_t>(key, value);
    model.seed = train.seed = data.seed = verify.seed = s;
  } else if (key == "levels") model.levels = parse_int<int>(key, value);
  else if (key == "classes") {
    model.num_classes = parse_int<int>(key, value);
    data.num_classes = static_cast<std::uint32_t>(std::max(0, model.num_classes));
  } else if (key == "in_channels") model.in_channels = parse_int<int>(key, value);
  else if (key == "encoder_channels") model.encoder_channels = parse_channels(key, value);
  else if (key == "decoder_channels") model.decoder_channels = parse_channels(key, value);
  else if (key == "units_per_block") model.units_per_block = parse_int<int>(key, value);
  else if (key == "scheme") scheme = parse_scheme(value);
  else if (key == "format") {
    if (value == "text") format = ReportFormat::Text;
    else if (value == "csv") format = ReportFormat::Csv;
    else throw ConfigError("format must be text or csv, got '" + value + "'");
  } else if (key == "alpha0") train.alpha0 = parse_real(key, value);
  else if (key == "rho") train.rho = parse_real(key, value);
  else if (key == "iterations") train.i_max = parse_int<std::uint64_t>(key, value);
  else if (key == "reweight_interval") train.reweight_interval = parse_int<std::uint64_t>(key, value);
  else if (key == "eval_interval") train.eval_interval = parse_int<std::uint64_t>(key, value);
  else if (key == "momentum") train.momentum = parse_real(key, value);
  else if (key == "batch_size") train.batch_size = parse_int<int>(key, value);
  else if (key == "loss") {
    if (value == "fixed") loss = LossWeights::Mode::Fixed;
    else if (value == "adaptive") loss = LossWeights::Mode::Adaptive;
    else throw ConfigError("loss must be fixed or adaptive, got '" + value + "'");
  } else if (key == "gamma") gamma = parse_real(key, value);
  else if (key == "delta") delta = parse_real(key, value);
  else if (key == "width") data.width = parse_int<std::uint32_t>(key, value);
  else if (key == "height") data.height = parse_int<std::uint32_t>(key, value);
  else if (key == "n_shapes") data.n_shapes = parse_int<std::uint32_t>(key, value);
  else if (key == "train_count") data.train_count = parse_int<std::uint32_t>(key, value);
  else if (key == "val_count") data.val_count = parse_int<std::uint32_t>(key, value);
  else if (key == "noise") data.noise = parse_real(key, value);
  else if (key == "auto_pad") auto_pad = parse_bool(key, value);
  else if (key == "percentages") {
    percentages.clear();
    for (const auto& item : split_list(value)) percentages.push_back(parse_real(key, item));
  } else if (key == "verify.f64") verify.f64 = parse_bool(key, value);
  else if (key == "verify.cases") verify.cases = parse_int<std::size_t>(key, value);
  else if (key == "verify.fault") verify.fault = parse_fault(value);
  else if (key == "verify.suite") {
    if (value.empty()) verify.only_suite.reset();
    else verify.only_suite = value;
  } else if (key == "verify.case_seed") {
    if (value.empty()) verify.case_seed.reset();
    else verify.case_seed = parse_int<std::uint64_t>(key, value);
  } else if (key == "verify.parallel") verify.parallel = parse_bool(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& key : keys()) out += key + " = " + get(*this, key) + "\n";
  return out;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    c.set(trim(std::string_view(line).substr(0, eq)), line.substr(eq + 1));
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str());
}

LossWeights RunConfig::loss_weights() const {
  return loss == LossWeights::Mode::Adaptive ? LossWeights::adaptive(model.levels, delta)
                                             : LossWeights::fixed(gamma, model.levels);
}

// ---------------------------------------------------------------------------

namespace {

class Report {
 public:
  Report(std::ostream& out, ReportFormat format) : out_(out), format_(format) {}

  void row(const std::string& key, const std::string& value) {
    if (format_ == ReportFormat::Csv)
      out_ << key << ',' << value << '\n';
    else
      out_ << key << ": " << value << '\n';
  }
  void row(const std::string& key, double value) { row(key, fmt_short(value)); }
  void row(const std::string& key, std::uint64_t value) { row(key, std::to_string(value)); }

 private:
  std::ostream& out_;
  ReportFormat format_;
};

void print_sparsity(Report& r, const Quadtree& qt) {
  const SparsityStats s = sparsity_stats(qt, qt.width, qt.height);
  r.row("records", std::uint64_t{qt.records.size()});
  for (int l = static_cast<int>(s.pixel_percent.size()) - 1; l >= 0; --l)
    r.row("level_" + std::to_string(l) + "_percent", s.pixel_percent[static_cast<std::size_t>(l)]);
  r.row("ratio_percent", s.ratio_percent);
}

int cmd_encode(const RunConfig& c, std::ostream& out) {
  if (c.input.empty()) throw InputError("encode needs an input mask");
  Mask mask = read_mask(c.input);
  if (c.auto_pad) mask = pad_to_multiple(mask, 1u << c.model.levels);
  const Quadtree qt = quadtree_encode(build_t_pyramid(mask, c.model.levels));
  if (!c.output.empty()) write_quadtree(qt, c.output);
  Report r(out, c.format);
  print_sparsity(r, qt);
  return exit_code::kOk;
}

int cmd_decode(const RunConfig& c, std::ostream& out) {
  if (c.input.empty()) throw InputError("decode needs an input quadtree");
  const Quadtree qt = read_quadtree(c.input);
  const Mask mask = quadtree_decode(qt, qt.width, qt.height);
  if (!c.output.empty()) write_mask(mask, c.output);
  Report r(out, c.format);
  r.row("width", std::uint64_t{mask.width});
  r.row("height", std::uint64_t{mask.height});
  if (!c.compare.empty()) {
    const bool same = read_mask(c.compare) == mask;
    r.row("compare", same ? "identical" : "differs");
    if (!same) return exit_code::kVerify;
  }
  return exit_code::kOk;
}

int cmd_stats(const RunConfig& c, std::ostream& out) {
  const auto expected = static_cast<std::size_t>(c.model.levels) + 1;
  if (c.percentages.size() != expected)
    throw InputError("stats needs " + std::to_string(expected) + " per-level percentages, got " +
                     std::to_string(c.percentages.size()));
  double sum = 0.0;
  for (double p : c.percentages) {
    if (p < 0.0) throw InputError("negative percentage");
    sum += p;
  }
  if (std::abs(sum - 100.0) > 0.5) throw InputError("percentages sum to " + fmt_short(sum) + ", expected ~100");
  Report r(out, c.format);
  r.row("ratio_percent", ratio_from_percentages(c.percentages));
  return exit_code::kOk;
}

int cmd_gen(const RunConfig& c, std::ostream& out) {
  if (c.output.empty()) throw InputError("gen needs --out");
  const Mask m = gen_synthetic(c.data.width, c.data.height, c.data.num_classes, c.data.n_shapes, c.seed());
  write_mask(m, c.output);
  Report r(out, c.format);
  r.row("width", std::uint64_t{m.width});
  r.row("height", std::uint64_t{m.height});
  return exit_code::kOk;
}

int cmd_train(const RunConfig& c, std::ostream& out, std::ostream& err) {
  if (c.output.empty()) throw InputError("train needs --out for the checkpoint");
  if (c.scheme == PropagationScheme::PC)
    throw ConfigError("PC propagation is inference-only; train with all or gtc");
  c.model.validate();
  c.train.validate();
  SyntheticDataConfig dc = c.data;
  dc.num_classes = static_cast<std::uint32_t>(c.model.num_classes);
  const TrainingData data = make_synthetic_data(dc, c.model.levels);
  QgnModel<float> model = init_model<float>(c.model);

  std::unique_ptr<std::ofstream> log_file;
  std::ostream* log = &out;
  if (!c.log.empty()) {
    log_file = std::make_unique<std::ofstream>(c.log, std::ios::binary);
    if (!*log_file) throw IoError("cannot write log " + c.log);
    log = log_file.get();
  }
  const TrainOutcome outcome = train(model, data, c.scheme, c.loss_weights(), c.train, log);
  save_checkpoint(model, c.output);

  const EvalResult eval = evaluate(model, data.validation, c.scheme);
  err << "trained " << c.train.i_max << " iterations under " << to_string(c.scheme) << ", final loss "
      << fmt_short(outcome.last_step.total_loss) << ", validation mIoU " << fmt_short(eval.metrics.mean_iou) << '\n';
  return exit_code::kOk;
}

void dump_logits(const PredictionQuadtree<float>& pred, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "level,x,y,selected";
  for (int ch = 0; ch <= pred.num_classes; ++ch) f << ",c" << ch;
  f << '\n';
  for (int l = pred.max_level(); l >= 0; --l) {
    const auto& lvl = pred.levels[static_cast<std::size_t>(l)];
    const auto& sites = lvl.logits.sites->sites();
    for (std::size_t i = 0; i < sites.size(); ++i) {
      const bool selected = lvl.selected && lvl.selected->find(sites[i].x, sites[i].y) >= 0;
      f << l << ',' << sites[i].x << ',' << sites[i].y << ',' << (selected ? 1 : 0);
      const auto row = lvl.logits.row(i);
      for (int ch = 0; ch < lvl.logits.channels; ++ch) f << ',' << fmt(static_cast<double>(row[ch]));
      f << '\n';
    }
  }
}

int cmd_infer(const RunConfig& c, std::ostream& out) {
  if (c.checkpoint.empty()) throw InputError("infer needs --checkpoint");
  if (c.input.empty()) throw InputError("infer needs --mask");
  if (c.scheme == PropagationScheme::GTC && c.gt.empty())
    throw ModeError("GTC evaluation needs the ground truth (--gt); it is an upper-bound mode");
  const QgnModel<float> model = load_checkpoint(c.checkpoint);
  const Mask mask = read_mask(c.input);
  const auto image = render_image<float>(mask, c.data.noise, c.seed());

  std::optional<Mask> gt;
  std::optional<TPyramid> gt_pyramid;
  if (!c.gt.empty()) {
    gt = read_mask(c.gt);
    if (gt->width != mask.width || gt->height != mask.height) throw ShapeError("ground truth size differs from input");
    gt_pyramid = build_t_pyramid(*gt, model.config.levels);
  }

  Report r(out, c.format);
  r.row("scheme", to_string(c.scheme));
  ActivationReport activations;
  const auto pred =
      forward<float>(model, image, {c.scheme, gt_pyramid ? &*gt_pyramid : nullptr}, nullptr, &activations);
  const Mask predicted = assemble(pred, mask.width, mask.height);
  if (!c.output.empty()) write_mask(predicted, c.output);
  if (!c.dump_logits.empty()) dump_logits(pred, c.dump_logits);
  if (gt) {
    const SegmentationMetrics m = metrics(predicted, *gt);
    r.row("pixel_accuracy", m.pixel_accuracy);
    r.row("mean_iou", m.mean_iou);
  }

  // Activation counts for every scheme this input allows, the chosen one
  // coming from the run above.
  for (PropagationScheme s : {PropagationScheme::All, PropagationScheme::GTC, PropagationScheme::PC}) {
    if (s == PropagationScheme::GTC && !gt_pyramid) continue;
    ActivationReport rep;
    if (s == c.scheme) {
      rep = activations;
    } else {
      forward<float>(model, image, {s, gt_pyramid ? &*gt_pyramid : nullptr}, nullptr, &rep);
    }
    const std::string prefix = to_string(s) + ".";
    r.row(prefix + "encoder_scalars", rep.encoder_scalars());
    r.row(prefix + "decoder_scalars", rep.decoder_scalars());
    r.row(prefix + "encoder_macs", rep.encoder_macs());
    r.row(prefix + "decoder_macs", rep.decoder_macs());
  }
  return exit_code::kOk;
}

int cmd_verify(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const VerifyReport report = run_verify(c.verify);
  Report r(out, c.format);
  for (const auto& s : report.suites) {
    std::ostringstream line;
    line << (s.failures == 0 ? "PASS" : "FAIL") << " cases=" << s.cases << " failures=" << s.failures
         << " max_error=" << fmt_short(s.max_error) << " tolerance=" << fmt_short(s.tolerance);
    r.row(s.name, line.str());
  }
  if (report.passed()) return exit_code::kOk;

  for (const auto& s : report.suites) {
    if (!s.first_failure) continue;
    const SuiteFailure& f = *s.first_failure;
    RunConfig replay;
    replay.subcommand = "verify";
    replay.verify = c.verify;
    replay.verify.only_suite = f.suite;
    replay.verify.case_seed = f.case_seed;
    replay.set("seed", std::to_string(c.seed()));
    err << "failing case: suite=" << f.suite << " case_seed=" << f.case_seed << " " << f.detail << '\n';
    err << "replay: qgn verify --suite " << f.suite << " --case-seed " << f.case_seed
        << (c.verify.f64 ? " --f64" : "")
        << (c.verify.fault == KernelFault::TransposeKernel ? " --inject transpose-kernel" : "") << '\n';
    if (!c.output.empty()) {
      std::ofstream file(c.output, std::ios::binary);
      if (!file) throw IoError("cannot write " + c.output);
      file << "# replay with: qgn verify --config " << c.output << '\n' << replay.serialize();
    }
    break;
  }
  return exit_code::kVerify;
}

struct Flag {
  const char* name;
  const char* key;
  const char* help;
};

const Flag kCommonFlags[] = {
    {"--seed", "seed", "random seed"},
    {"--scheme", "scheme", "propagation scheme: all|gtc|pc"},
    {"--levels", "levels", "quadtree depth L"},
    {"--out", "output", "output path"},
    {"--format", "format", "report format: text|csv"},
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quadtree scene-parsing toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::vector<std::string> positional;

  const auto capture = [&overrides](CLI::App* sub, const char* name, const char* key, const char* help) {
    sub->add_option_function<std::string>(
        name, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); }, help);
  };
  const auto capture_flag = [&overrides](CLI::App* sub, const char* name, const char* key, const char* help) {
    sub->add_flag_callback(name, [&overrides, key] { overrides.emplace_back(key, "true"); }, help);
  };
  const auto add_sub = [&](const char* name, const char* help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "key=value config file");
    for (const Flag& f : kCommonFlags) capture(sub, f.name, f.key, f.help);
    return sub;
  };

  CLI::App* encode = add_sub("encode", "mask (QMR1) -> quadtree (QTR1), prints sparsity");
  encode->add_option("input", positional, "input mask");
  capture_flag(encode, "--auto-pad", "auto_pad", "pad to a multiple of 2^L by edge replication");

  CLI::App* decode = add_sub("decode", "quadtree (QTR1) -> mask (QMR1)");
  decode->add_option("input", positional, "input quadtree");
  capture(decode, "--compare", "compare", "mask to compare the decoded result with");

  CLI::App* stats = add_sub("stats", "storage ratio from per-level pixel percentages (coarsest first)");
  stats->add_option("percentages", positional, "L+1 percentages, separate or comma-joined");

  CLI::App* gen = add_sub("gen", "write a synthetic rectangle mask");
  capture(gen, "--width", "width", "width");
  capture(gen, "--height", "height", "height");
  capture(gen, "--classes", "classes", "number of classes");
  capture(gen, "--shapes", "n_shapes", "rectangles");

  CLI::App* trn = add_sub("train", "train on the synthetic task; writes a QGN1 checkpoint");
  capture(trn, "--iterations", "iterations", "training iterations");
  capture(trn, "--log", "log", "training log path (default stdout)");
  capture(trn, "--classes", "classes", "number of classes");

  CLI::App* infer = add_sub("infer", "predict a mask with a checkpoint");
  capture(infer, "--checkpoint", "checkpoint", "QGN1 checkpoint");
  capture(infer, "--mask", "input", "mask the input image is rendered from");
  capture(infer, "--gt", "gt", "ground-truth mask (required for gtc)");
  capture(infer, "--dump-logits", "dump_logits", "write per-level logits as CSV");

  CLI::App* verify = add_sub("verify", "oracle, gradient and codec self-checks");
  capture_flag(verify, "--f64", "verify.f64", "run the numeric suites in double precision");
  capture(verify, "--cases", "verify.cases", "cases per suite");
  capture(verify, "--inject", "verify.fault", "deliberate kernel fault: transpose-kernel");
  capture(verify, "--suite", "verify.suite", "run one suite: oracle|gradient|model-gradient|codec");
  capture(verify, "--case-seed", "verify.case_seed", "replay a single case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_code::kOk;
  } catch (const CLI::ParseError& e) {
    err << "qgn: " << e.what() << '\n';
    return exit_code::kInput;
  }

  try {
    RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    for (const auto& [key, value] : overrides) c.set(key, value);
    CLI::App* chosen = app.get_subcommands().front();
    c.subcommand = chosen->get_name();
    if (chosen == stats) {
      if (!positional.empty()) {
        std::string joined;
        for (const auto& p : positional) joined += p + ",";
        try {
          c.set("percentages", joined);
        } catch (const ConfigError& e) {
          throw InputError(e.what());
        }
      }
    } else if (!positional.empty()) {
      if (positional.size() > 1) throw InputError("expected one input path");
      c.input = positional.front();
    }

    if (chosen == encode) return cmd_encode(c, out);
    if (chosen == decode) return cmd_decode(c, out);
    if (chosen == stats) return cmd_stats(c, out);
    if (chosen == gen) return cmd_gen(c, out);
    if (chosen == trn) return cmd_train(c, out, err);
    if (chosen == infer) return cmd_infer(c, out);
    return cmd_verify(c, out, err);
  } catch (const std::exception& e) {
    err << "qgn: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

}  // namespace qgn
