#include "qgn/verify.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <random>
#include <sstream>

#include "qgn/errors.hpp"
#include "qgn/mask.hpp"
#include "qgn/ops.hpp"
#include "qgn/quadtree.hpp"
#include "qgn/training.hpp"

namespace qgn {

namespace {

double uniform01(std::mt19937_64& e) { return static_cast<double>(e() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& e, double lo, double hi) { return lo + (hi - lo) * uniform01(e); }

template <typename T>
void fill_uniform(std::vector<T>& v, std::mt19937_64& e, double lo = -1.0, double hi = 1.0) {
  for (T& x : v) x = static_cast<T>(uniform(e, lo, hi));
}

template <typename T>
ConvParams<T> random_params(std::mt19937_64& e, std::int32_t c_out, std::int32_t c_in, std::int32_t k) {
  ConvParams<T> p(c_out, c_in, k, k);
  fill_uniform(p.weight, e);
  fill_uniform(p.bias, e);
  return p;
}

SitesPtr random_sites(std::mt19937_64& e, std::int32_t width, std::int32_t height, double density) {
  std::vector<Site> sites;
  for (std::int32_t y = 0; y < height; ++y)
    for (std::int32_t x = 0; x < width; ++x)
      if (uniform01(e) < density) sites.push_back({x, y});
  return SiteSet::make(width, height, std::move(sites));
}

template <typename T>
double max_scaled_diff(const std::vector<T>& got, const std::vector<T>& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double d = std::abs(static_cast<double>(got[i]) - static_cast<double>(want[i]));
    worst = std::max(worst, d / std::max(1.0, std::abs(static_cast<double>(want[i]))));
  }
  if (got.size() != want.size()) worst = std::numeric_limits<double>::infinity();
  return worst;
}

// Scalar objective sum_i r_i * y_i, evaluated in double.
template <typename T>
double project(const std::vector<T>& y, const std::vector<T>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(r[i]) * static_cast<double>(y[i]);
  return s;
}

// Central differences over every scalar in `targets` against `analytic`.
template <typename T>
double fd_max_error(const std::vector<T*>& targets, const std::vector<double>& analytic,
                    const std::function<double()>& objective, double h) {
  double worst = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    T* p = targets[i];
    const T saved = *p;
    *p = static_cast<T>(static_cast<double>(saved) + h);
    const double plus = objective();
    *p = static_cast<T>(static_cast<double>(saved) - h);
    const double minus = objective();
    *p = saved;
    worst = std::max(worst, relative_error(analytic[i], (plus - minus) / (2.0 * h), 1.0));
  }
  return worst;
}

template <typename T>
void append(std::vector<T*>& targets, std::vector<double>& analytic, std::vector<T>& values,
            const std::vector<T>& grads) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    targets.push_back(&values[i]);
    analytic.push_back(static_cast<double>(grads[i]));
  }
}

template <typename T>
double fd_step() {
  return std::is_same_v<T, float> ? 1e-2 : 1e-5;
}

}  // namespace

KernelFault parse_fault(const std::string& name) {
  if (name.empty() || name == "none") return KernelFault::None;
  if (name == "transpose-kernel") return KernelFault::TransposeKernel;
  throw ConfigError("unknown fault '" + name + "' (expected none|transpose-kernel)");
}

template <typename T>
SparseConvFn<T> faulty_sparse_conv(KernelFault fault) {
  if (fault == KernelFault::None) return [](const SparseActivation<T>& in, const ConvParams<T>& p) {
      return sparse_conv_fwd(in, p);
    };
  return [](const SparseActivation<T>& in, const ConvParams<T>& p) {
    ConvParams<T> t = p;
    for (std::int32_t co = 0; co < p.c_out; ++co)
      for (std::int32_t ci = 0; ci < p.c_in; ++ci)
        for (std::int32_t ky = 0; ky < p.kh; ++ky)
          for (std::int32_t kx = 0; kx < p.kw; ++kx) t.w(co, ci, ky, kx) = p.w(co, ci, kx, ky);
    return sparse_conv_fwd(in, t);
  };
}

template SparseConvFn<float> faulty_sparse_conv<float>(KernelFault);
template SparseConvFn<double> faulty_sparse_conv<double>(KernelFault);

OracleCase oracle_case_from_seed(std::uint64_t seed) {
  std::mt19937_64 e(seed);
  OracleCase c;
  c.width = 1 + static_cast<std::int32_t>(e() % 12);
  c.height = 1 + static_cast<std::int32_t>(e() % 12);
  c.c_in = 1 + static_cast<std::int32_t>(e() % 5);
  c.c_out = 1 + static_cast<std::int32_t>(e() % 5);
  static constexpr std::int32_t kernels[] = {1, 3, 3, 3, 5};
  c.kernel = kernels[e() % 5];
  c.density = static_cast<double>(e() % 101) / 100.0;
  return c;
}

double OracleError::max() const { return std::max({forward, grad_input, grad_weight, grad_bias}); }

template <typename T>
OracleError sparse_vs_masked_dense(std::uint64_t seed, const SparseConvFn<T>& sparse) {
  const OracleCase oc = oracle_case_from_seed(seed);
  std::mt19937_64 e(seed ^ 0x9e3779b97f4a7c15ULL);
  const SitesPtr sites = random_sites(e, oc.width, oc.height, oc.density);
  SparseActivation<T> input(0, oc.c_in, sites);
  fill_uniform(input.values, e);
  ConvParams<T> params = random_params<T>(e, oc.c_out, oc.c_in, oc.kernel);
  SparseActivation<T> upstream(0, oc.c_out, sites);
  fill_uniform(upstream.values, e);

  OracleError err;
  err.active_sites = sites->size();

  const auto out_sparse = sparse ? sparse(input, params) : sparse_conv_fwd(input, params);
  const DenseTensor<T> masked = to_dense(input);
  const auto out_dense = from_dense(dense_conv_fwd(masked, params, 1), sites, 0);
  err.forward = max_scaled_diff(out_sparse.values, out_dense.values);

  ConvParams<T> ps = params, pd = params;
  ps.zero_grad();
  pd.zero_grad();
  const auto gin_sparse = sparse_conv_bwd(input, ps, upstream);
  const auto gin_dense = from_dense(dense_conv_bwd(masked, pd, 1, to_dense(upstream)), sites, 0);
  err.grad_input = max_scaled_diff(gin_sparse.values, gin_dense.values);
  err.grad_weight = max_scaled_diff(ps.grad_weight, pd.grad_weight);
  err.grad_bias = max_scaled_diff(ps.grad_bias, pd.grad_bias);
  return err;
}

template OracleError sparse_vs_masked_dense<float>(std::uint64_t, const SparseConvFn<float>&);
template OracleError sparse_vs_masked_dense<double>(std::uint64_t, const SparseConvFn<double>&);

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

std::vector<std::string> gradient_ops() {
  return {"sparse_conv", "dense_conv", "dense_conv_s2", "upsample", "gather_skip", "relu", "add"};
}

template <typename T>
double op_gradient_error(const std::string& op, std::uint64_t seed) {
  std::mt19937_64 e(seed);
  const double h = fd_step<T>();
  std::vector<T*> targets;
  std::vector<double> analytic;

  if (op == "sparse_conv") {
    const SitesPtr sites = random_sites(e, 5, 5, 0.6);
    SparseActivation<T> x(0, 2, sites);
    fill_uniform(x.values, e);
    ConvParams<T> p = random_params<T>(e, 3, 2, 3);
    SparseActivation<T> r(0, 3, sites);
    fill_uniform(r.values, e);
    auto gx = sparse_conv_bwd(x, p, r);
    append(targets, analytic, x.values, gx.values);
    append(targets, analytic, p.weight, p.grad_weight);
    append(targets, analytic, p.bias, p.grad_bias);
    return fd_max_error<T>(targets, analytic, [&] { return project(sparse_conv_fwd(x, p).values, r.values); }, h);
  }
  if (op == "dense_conv" || op == "dense_conv_s2") {
    const int stride = op == "dense_conv" ? 1 : 2;
    DenseTensor<T> x(6, 5, 2);
    fill_uniform(x.values, e);
    ConvParams<T> p = random_params<T>(e, 3, 2, 3);
    const auto y = dense_conv_fwd(x, p, stride);
    DenseTensor<T> r(y.height, y.width, y.channels);
    fill_uniform(r.values, e);
    auto gx = dense_conv_bwd(x, p, stride, r);
    append(targets, analytic, x.values, gx.values);
    append(targets, analytic, p.weight, p.grad_weight);
    append(targets, analytic, p.bias, p.grad_bias);
    return fd_max_error<T>(targets, analytic, [&] { return project(dense_conv_fwd(x, p, stride).values, r.values); },
                           h);
  }
  if (op == "upsample") {
    SparseActivation<T> x(2, 2, random_sites(e, 3, 3, 0.5));
    fill_uniform(x.values, e);
    const auto y = upsample2x_fwd(x);
    SparseActivation<T> r(1, 2, y.sites);
    fill_uniform(r.values, e);
    auto gx = upsample2x_bwd(x, r);
    append(targets, analytic, x.values, gx.values);
    return fd_max_error<T>(targets, analytic, [&] { return project(upsample2x_fwd(x).values, r.values); }, h);
  }
  if (op == "gather_skip") {
    DenseTensor<T> enc(4, 4, 3);
    fill_uniform(enc.values, e);
    const SitesPtr sites = random_sites(e, 4, 4, 0.5);
    ConvParams<T> p = random_params<T>(e, 2, 3, 1);
    SparseActivation<T> r(1, 2, sites);
    fill_uniform(r.values, e);
    DenseTensor<T> genc(4, 4, 3);
    gather_skip_bwd(enc, p, r, genc);
    append(targets, analytic, enc.values, genc.values);
    append(targets, analytic, p.weight, p.grad_weight);
    append(targets, analytic, p.bias, p.grad_bias);
    return fd_max_error<T>(targets, analytic,
                           [&] { return project(gather_skip_fwd(enc, sites, 1, p).values, r.values); }, h);
  }
  if (op == "relu") {
    SparseActivation<T> x(0, 3, random_sites(e, 4, 4, 0.7));
    // Keep inputs at least 0.1 away from the kink.
    for (T& v : x.values) v = static_cast<T>(uniform(e, 0.1, 1.0) * ((e() & 1) ? 1.0 : -1.0));
    SparseActivation<T> r(0, 3, x.sites);
    fill_uniform(r.values, e);
    auto gx = relu_bwd(relu_fwd(x), r);
    append(targets, analytic, x.values, gx.values);
    return fd_max_error<T>(targets, analytic, [&] { return project(relu_fwd(x).values, r.values); }, h);
  }
  if (op == "add") {
    const SitesPtr sites = random_sites(e, 4, 4, 0.7);
    SparseActivation<T> a(0, 2, sites), b(0, 2, sites), r(0, 2, sites);
    fill_uniform(a.values, e);
    fill_uniform(b.values, e);
    fill_uniform(r.values, e);
    add_bwd(a, b, r);
    // d/da = d/db = upstream.
    append(targets, analytic, a.values, r.values);
    append(targets, analytic, b.values, r.values);
    return fd_max_error<T>(targets, analytic, [&] { return project(add_fwd(a, b).values, r.values); }, h);
  }
  throw ConfigError("unknown op '" + op + "'");
}

template double op_gradient_error<float>(const std::string&, std::uint64_t);
template double op_gradient_error<double>(const std::string&, std::uint64_t);

template <typename T>
ModelGradCheck model_gradient_check(const QgnConfig& cfg, std::int32_t size, PropagationScheme scheme,
                                    std::size_t samples, std::uint64_t seed) {
  QgnModel<T> model = init_model<T>(cfg);
  const Mask mask = gen_synthetic(static_cast<std::uint32_t>(size), static_cast<std::uint32_t>(size),
                                  static_cast<std::uint32_t>(cfg.num_classes), 3, seed);
  const std::vector<Sample<T>> batch{make_sample<T>(mask, cfg.levels, 0.1, seed + 1)};
  const LossWeights lw = LossWeights::fixed(0.75, cfg.levels);
  ClassWeights cw = ClassWeights::uniform(cfg.num_classes);
  cw.weight[1] = 2.0;

  compute_loss(model, std::span<const Sample<T>>(batch), scheme, lw, cw, true);

  // Differences are taken on a double copy holding exactly the same values,
  // so an f32 backward is judged against an FD estimate free of f32 noise.
  QgnModel<double> reference;
  std::vector<Sample<double>> reference_batch;
  if constexpr (std::is_same_v<T, float>) {
    reference = convert_model<double>(model);
    Sample<double> s{batch[0].mask, batch[0].pyramid, DenseTensor<double>(batch[0].image.height, batch[0].image.width,
                                                                         batch[0].image.channels)};
    std::copy(batch[0].image.values.begin(), batch[0].image.values.end(), s.image.values.begin());
    reference_batch.push_back(std::move(s));
  } else {
    reference = model;
    reference_batch = batch;
  }

  struct Entry {
    double* value;
    double grad;
    std::string name;
  };
  std::vector<double> grads;
  model.for_each_param([&grads](ConvParams<T>& p, const std::string&) {
    grads.insert(grads.end(), p.grad_weight.begin(), p.grad_weight.end());
    grads.insert(grads.end(), p.grad_bias.begin(), p.grad_bias.end());
  });
  std::vector<Entry> entries;
  reference.for_each_param([&entries, &grads](ConvParams<double>& p, const std::string& name) {
    for (std::size_t i = 0; i < p.weight.size(); ++i)
      entries.push_back({&p.weight[i], grads[entries.size()], name + ".w[" + std::to_string(i) + "]"});
    for (std::size_t i = 0; i < p.bias.size(); ++i)
      entries.push_back({&p.bias[i], grads[entries.size()], name + ".b[" + std::to_string(i) + "]"});
  });
  double largest = 0.0;
  for (const auto& en : entries) largest = std::max(largest, std::abs(en.grad));
  std::vector<const Entry*> candidates;
  for (const auto& en : entries)
    if (std::abs(en.grad) >= 1e-3 * largest) candidates.push_back(&en);

  std::mt19937_64 e(seed);
  std::shuffle(candidates.begin(), candidates.end(), e);
  candidates.resize(std::min(samples, candidates.size()));

  const double h = 1e-6;
  const auto objective = [&] {
    return compute_loss(reference, std::span<const Sample<double>>(reference_batch), scheme, lw, cw, false)
        .total_loss;
  };
  ModelGradCheck out;
  for (const Entry* en : candidates) {
    const double saved = *en->value;
    *en->value = saved + h;
    const double plus = objective();
    *en->value = saved - h;
    const double minus = objective();
    *en->value = saved;
    const double numeric = (plus - minus) / (2.0 * h);
    const double err = relative_error(en->grad, numeric, 1e-12);
    ++out.checked;
    if (err > out.max_rel_error) out.max_rel_error = err;
    std::ostringstream line;
    line << en->name << ": analytic " << en->grad << " numeric " << numeric << " rel " << err;
    out.worst.push_back(line.str());
  }
  return out;
}

template ModelGradCheck model_gradient_check<float>(const QgnConfig&, std::int32_t, PropagationScheme, std::size_t,
                                                    std::uint64_t);
template ModelGradCheck model_gradient_check<double>(const QgnConfig&, std::int32_t, PropagationScheme, std::size_t,
                                                     std::uint64_t);

// ---------------------------------------------------------------------------

namespace {

std::uint64_t case_seed(const VerifyOptions& o, std::size_t i) {
  return o.case_seed ? *o.case_seed : o.seed * 1000003ULL + i;
}

std::size_t case_count(const VerifyOptions& o) { return o.case_seed ? 1 : o.cases; }

void note(SuiteResult& r, double err, std::uint64_t seed, const std::string& detail) {
  ++r.cases;
  r.max_error = std::max(r.max_error, err);
  if (!(err <= r.tolerance)) {
    ++r.failures;
    if (!r.first_failure) r.first_failure = SuiteFailure{r.name, seed, detail};
  }
}

template <typename T>
SuiteResult oracle_suite(const VerifyOptions& o) {
  SuiteResult r;
  r.name = "oracle";
  r.tolerance = std::is_same_v<T, float> ? 1e-6 : 1e-12;
  const SparseConvFn<T> fn = faulty_sparse_conv<T>(o.fault);
  for (std::size_t i = 0; i < case_count(o); ++i) {
    const std::uint64_t seed = case_seed(o, i);
    const OracleError err = sparse_vs_masked_dense<T>(seed, fn);
    const OracleCase c = oracle_case_from_seed(seed);
    std::ostringstream d;
    d << "width=" << c.width << " height=" << c.height << " c_in=" << c.c_in << " c_out=" << c.c_out
      << " kernel=" << c.kernel << " density=" << c.density << " forward=" << err.forward
      << " grad_input=" << err.grad_input << " grad_weight=" << err.grad_weight << " grad_bias=" << err.grad_bias;
    note(r, err.max(), seed, d.str());
  }
  return r;
}

template <typename T>
SuiteResult gradient_suite(const VerifyOptions& o) {
  SuiteResult r;
  r.name = "gradient";
  r.tolerance = std::is_same_v<T, float> ? 1e-3 : 1e-7;
  const std::size_t per_op = o.case_seed ? 1 : std::max<std::size_t>(1, o.cases / 10);
  for (const std::string& op : gradient_ops()) {
    for (std::size_t i = 0; i < per_op; ++i) {
      const std::uint64_t seed = case_seed(o, i);
      const double err = op_gradient_error<T>(op, seed);
      note(r, err, seed, "op=" + op + " rel_error=" + std::to_string(err));
    }
  }
  return r;
}

SuiteResult model_gradient_suite(const VerifyOptions& o) {
  SuiteResult r;
  r.name = "model-gradient";
  r.tolerance = o.f64 ? 1e-5 : 1e-2;
  QgnConfig cfg;
  cfg.levels = 5;
  cfg.num_classes = 3;
  cfg.encoder_channels = {4, 4, 6, 6, 8, 8};
  cfg.decoder_channels = {8, 8, 6, 6, 4, 4};
  cfg.units_per_block = 1;
  cfg.seed = o.case_seed.value_or(o.seed);
  for (PropagationScheme scheme : {PropagationScheme::All, PropagationScheme::GTC}) {
    const ModelGradCheck chk = o.f64 ? model_gradient_check<double>(cfg, 32, scheme, 12, cfg.seed)
                                     : model_gradient_check<float>(cfg, 32, scheme, 12, cfg.seed);
    note(r, chk.max_rel_error, cfg.seed,
         "scheme=" + to_string(scheme) + " max_rel_error=" + std::to_string(chk.max_rel_error));
  }
  return r;
}

SuiteResult codec_suite(const VerifyOptions& o) {
  SuiteResult r;
  r.name = "codec";
  r.tolerance = 0.0;
  for (std::size_t i = 0; i < case_count(o); ++i) {
    const std::uint64_t seed = case_seed(o, i);
    std::mt19937_64 e(seed);
    const int levels = static_cast<int>(e() % 6);
    const std::uint32_t block = 1u << levels;
    const std::uint32_t w = block * (1 + static_cast<std::uint32_t>(e() % std::max<std::uint32_t>(1, 128 / block)));
    const std::uint32_t h = block * (1 + static_cast<std::uint32_t>(e() % std::max<std::uint32_t>(1, 128 / block)));
    const std::uint32_t k = 2 + static_cast<std::uint32_t>(e() % 149);
    const auto n_shapes = static_cast<std::uint32_t>(e() % 12);
    double err = 0.0;
    std::string detail;
    if (w >= 8 && h >= 8) {
      const Mask m = gen_synthetic(w, h, k, n_shapes, e());
      const bool mask_ok = decode_mask(encode_mask(m)) == m;
      const Quadtree qt = quadtree_encode(build_t_pyramid(m, levels));
      std::uint64_t area = 0;
      for (const auto& rec : qt.records) area += std::uint64_t{1} << (2 * rec.level);
      const bool lossless = quadtree_decode(qt, w, h) == m;
      const bool qtr_ok = decode_quadtree(encode_quadtree(qt)) == qt;
      err = (mask_ok && lossless && qtr_ok && area == std::uint64_t{w} * h) ? 0.0 : 1.0;
      detail = "width=" + std::to_string(w) + " height=" + std::to_string(h) + " k=" + std::to_string(k) +
               " levels=" + std::to_string(levels);
    }
    note(r, err, seed, detail);
  }
  return r;
}

}  // namespace

bool VerifyReport::passed() const {
  return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.failures == 0; });
}

VerifyReport run_verify(const VerifyOptions& options) {
  std::vector<std::function<SuiteResult()>> jobs;
  const auto wanted = [&options](const char* name) { return !options.only_suite || *options.only_suite == name; };
  if (options.only_suite && *options.only_suite != "oracle" && *options.only_suite != "gradient" &&
      *options.only_suite != "model-gradient" && *options.only_suite != "codec")
    throw ConfigError("unknown suite '" + *options.only_suite + "'");
  if (wanted("oracle"))
    jobs.emplace_back([&] { return options.f64 ? oracle_suite<double>(options) : oracle_suite<float>(options); });
  if (wanted("gradient"))
    jobs.emplace_back([&] { return options.f64 ? gradient_suite<double>(options) : gradient_suite<float>(options); });
  if (wanted("model-gradient")) jobs.emplace_back([&] { return model_gradient_suite(options); });
  if (wanted("codec")) jobs.emplace_back([&] { return codec_suite(options); });

  VerifyReport report;
  if (options.parallel) {
    std::vector<std::future<SuiteResult>> running;
    for (auto& job : jobs) running.push_back(std::async(std::launch::async, job));
    for (auto& f : running) report.suites.push_back(f.get());
  } else {
    for (auto& job : jobs) report.suites.push_back(job());
  }
  return report;
}

}  // namespace qgn
