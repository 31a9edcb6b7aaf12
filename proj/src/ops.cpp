#include "qgn/ops.hpp"

#include <algorithm>
#include <cstring>
#include <string>
#include <type_traits>

#include "qgn/errors.hpp"

namespace qgn {

namespace {

template <typename T>
void check_kernel(const ConvParams<T>& p, std::int32_t in_channels) {
  if (p.c_in != in_channels)
    throw ShapeError("conv expects " + std::to_string(p.c_in) + " input channels, got " + std::to_string(in_channels));
  if (p.kh % 2 == 0 || p.kw % 2 == 0) throw ShapeError("kernel must be odd-sized");
}

// Every conv (dense, sparse, 1x1 skip) runs through the kernels below on a
// neighbour table nb[i * taps + t] = input row or -1. Each output, input
// gradient and weight gradient is a sum taken in a fixed order that does not
// depend on which other rows exist, so a sparse conv and the same conv on a
// zero-masked dense grid agree bit for bit at the active sites.

// [tap][ci][co]
template <typename T>
std::vector<T> pack_forward(const ConvParams<T>& p) {
  const int taps = p.kh * p.kw;
  std::vector<T> packed(p.weight.size());
  for (std::int32_t co = 0; co < p.c_out; ++co)
    for (std::int32_t ci = 0; ci < p.c_in; ++ci)
      for (int t = 0; t < taps; ++t)
        packed[(static_cast<std::size_t>(t) * p.c_in + ci) * p.c_out + co] =
            p.weight[(static_cast<std::size_t>(co) * p.c_in + ci) * taps + t];
  return packed;
}

// [tap][co][ci]
template <typename T>
std::vector<T> pack_backward(const ConvParams<T>& p) {
  const int taps = p.kh * p.kw;
  std::vector<T> packed(p.weight.size());
  for (std::int32_t co = 0; co < p.c_out; ++co)
    for (std::int32_t ci = 0; ci < p.c_in; ++ci)
      for (int t = 0; t < taps; ++t)
        packed[(static_cast<std::size_t>(t) * p.c_out + co) * p.c_in + ci] =
            p.weight[(static_cast<std::size_t>(co) * p.c_in + ci) * taps + t];
  return packed;
}

int block_width(std::int32_t channels) {
  for (int b : {32, 16, 8, 4})
    if (channels % b == 0) return b;
  return 1;
}

// Channel blocks are held in 16-byte vectors; a block of B channels takes
// B / lanes registers and R rows are processed together so that about eight
// accumulators are live.
template <typename T>
struct Simd {
  typedef T vec __attribute__((vector_size(16)));
  static constexpr int lanes = 16 / sizeof(T);

  static vec load(const T* p) {
    vec v;
    std::memcpy(&v, p, sizeof v);
    return v;
  }
  static void store(T* p, const vec& v) { std::memcpy(p, &v, sizeof v); }
};

template <typename T, int B>
struct Block {
  static constexpr bool vectorized = B % Simd<T>::lanes == 0;
  static constexpr int regs = vectorized ? B / Simd<T>::lanes : B;
  static constexpr int rows = regs >= 8 ? 1 : 8 / regs;
  using reg = std::conditional_t<vectorized, typename Simd<T>::vec, T>;

  static reg load(const T* p) {
    if constexpr (vectorized)
      return Simd<T>::load(p);
    else
      return *p;
  }
  static void store(T* p, const reg& v) {
    if constexpr (vectorized)
      Simd<T>::store(p, v);
    else
      *p = v;
  }
  static constexpr int width = vectorized ? Simd<T>::lanes : 1;
};

// out[i][co] = bias[co] + sum over (t, ci) of W[t][ci][co] * x[nb(i,t)][ci]
template <typename T, int B>
void forward_kernel(const T* input, std::size_t n_out, const std::int32_t* nb, int taps, std::int32_t c_in,
                    std::int32_t c_out, const T* w, const T* bias, const T* zeros, T* out) {
  using K = Block<T, B>;
  constexpr int R = K::rows, NV = K::regs, W = K::width;
  for (std::size_t i0 = 0; i0 < n_out; i0 += R) {
    const int rows = static_cast<int>(std::min<std::size_t>(R, n_out - i0));
    for (std::int32_t cb = 0; cb < c_out; cb += B) {
      typename K::reg acc[R][NV];
      for (int v = 0; v < NV; ++v) acc[0][v] = K::load(bias + cb + v * W);
      for (int r = 1; r < R; ++r)
        for (int v = 0; v < NV; ++v) acc[r][v] = acc[0][v];
      for (int t = 0; t < taps; ++t) {
        const T* x[R];
        bool any = false;
        for (int r = 0; r < R; ++r) {
          const std::int32_t j = r < rows ? nb[(i0 + r) * taps + t] : -1;
          x[r] = j < 0 ? zeros : input + static_cast<std::size_t>(j) * c_in;
          any |= j >= 0;
        }
        if (!any) continue;
        const T* wt = w + static_cast<std::size_t>(t) * c_in * c_out + cb;
        for (std::int32_t ci = 0; ci < c_in; ++ci) {
          const T* wr = wt + static_cast<std::size_t>(ci) * c_out;
          typename K::reg wv[NV];
          for (int v = 0; v < NV; ++v) wv[v] = K::load(wr + v * W);
          for (int r = 0; r < R; ++r) {
            const T s = x[r][ci];
            for (int v = 0; v < NV; ++v) acc[r][v] += wv[v] * s;
          }
        }
      }
      for (int r = 0; r < rows; ++r)
        for (int v = 0; v < NV; ++v) K::store(out + (i0 + r) * c_out + cb + v * W, acc[r][v]);
    }
  }
}

// grad_in[j][ci] += sum over (t, co) of W[t][co][ci] * g[rev(j,t)][co]
template <typename T, int B>
void input_grad_kernel(std::size_t n_in, const std::int32_t* rev, int taps, std::int32_t c_in, std::int32_t c_out,
                       const T* wb, const T* grad_output, const T* zeros, T* grad_input) {
  using K = Block<T, B>;
  constexpr int R = K::rows, NV = K::regs, W = K::width;
  for (std::size_t j0 = 0; j0 < n_in; j0 += R) {
    const int rows = static_cast<int>(std::min<std::size_t>(R, n_in - j0));
    for (std::int32_t cb = 0; cb < c_in; cb += B) {
      typename K::reg acc[R][NV];
      for (int r = 0; r < R; ++r)
        for (int v = 0; v < NV; ++v)
          acc[r][v] = K::load(r < rows ? grad_input + (j0 + r) * c_in + cb + v * W : zeros);
      for (int t = 0; t < taps; ++t) {
        const T* g[R];
        bool any = false;
        for (int r = 0; r < R; ++r) {
          const std::int32_t i = r < rows ? rev[(j0 + r) * taps + t] : -1;
          g[r] = i < 0 ? zeros : grad_output + static_cast<std::size_t>(i) * c_out;
          any |= i >= 0;
        }
        if (!any) continue;
        const T* wt = wb + static_cast<std::size_t>(t) * c_out * c_in + cb;
        for (std::int32_t co = 0; co < c_out; ++co) {
          const T* wr = wt + static_cast<std::size_t>(co) * c_in;
          typename K::reg wv[NV];
          for (int v = 0; v < NV; ++v) wv[v] = K::load(wr + v * W);
          for (int r = 0; r < R; ++r) {
            const T s = g[r][co];
            for (int v = 0; v < NV; ++v) acc[r][v] += wv[v] * s;
          }
        }
      }
      for (int r = 0; r < rows; ++r)
        for (int v = 0; v < NV; ++v) K::store(grad_input + (j0 + r) * c_in + cb + v * W, acc[r][v]);
    }
  }
}

// gw[t][ci][co] += sum over i of x[nb(i,t)][ci] * g[i][co]
template <typename T, int B>
void weight_grad_kernel(const T* input, std::size_t n_out, const std::int32_t* nb, int taps, std::int32_t c_in,
                        std::int32_t c_out, const T* grad_output, const T* zeros, T* gw) {
  using K = Block<T, B>;
  constexpr int R = K::rows, NV = K::regs, W = K::width;
  for (int t = 0; t < taps; ++t) {
    for (std::int32_t c0 = 0; c0 < c_in; c0 += R) {
      const int lanes = std::min<int>(R, c_in - c0);
      for (std::int32_t cb = 0; cb < c_out; cb += B) {
        typename K::reg acc[R][NV];
        for (int r = 0; r < R; ++r)
          for (int v = 0; v < NV; ++v)
            acc[r][v] = K::load(r < lanes ? gw + (static_cast<std::size_t>(t) * c_in + c0 + r) * c_out + cb + v * W
                                          : zeros);
        for (std::size_t i = 0; i < n_out; ++i) {
          const std::int32_t j = nb[i * taps + t];
          if (j < 0) continue;
          const T* x = input + static_cast<std::size_t>(j) * c_in + c0;
          const T* g = grad_output + i * c_out + cb;
          typename K::reg gv[NV];
          for (int v = 0; v < NV; ++v) gv[v] = K::load(g + v * W);
          for (int r = 0; r < R; ++r) {
            const T s = r < lanes ? x[r] : T(0);
            for (int v = 0; v < NV; ++v) acc[r][v] += gv[v] * s;
          }
        }
        for (int r = 0; r < lanes; ++r)
          for (int v = 0; v < NV; ++v)
            K::store(gw + (static_cast<std::size_t>(t) * c_in + c0 + r) * c_out + cb + v * W, acc[r][v]);
      }
    }
  }
}

template <typename T, typename Fn>
void dispatch_block(std::int32_t channels, Fn&& fn) {
  switch (block_width(channels)) {
    case 32: fn(std::integral_constant<int, 32>{}); break;
    case 16: fn(std::integral_constant<int, 16>{}); break;
    case 8: fn(std::integral_constant<int, 8>{}); break;
    case 4: fn(std::integral_constant<int, 4>{}); break;
    default: fn(std::integral_constant<int, 1>{}); break;
  }
}

template <typename T>
void gathered_conv_fwd(const T* input, std::size_t n_out, const std::int32_t* nb, const ConvParams<T>& p, T* out) {
  const auto w = pack_forward(p);
  const std::vector<T> zeros(static_cast<std::size_t>(std::max(p.c_in, p.c_out)) + 32, T(0));
  dispatch_block<T>(p.c_out, [&](auto b) {
    forward_kernel<T, decltype(b)::value>(input, n_out, nb, p.kh * p.kw, p.c_in, p.c_out, w.data(), p.bias.data(),
                                          zeros.data(), out);
  });
}

// Accumulates parameter gradients and the input gradient (n_in rows).
template <typename T>
void gathered_conv_bwd(const T* input, std::size_t n_in, std::size_t n_out, const std::int32_t* nb, ConvParams<T>& p,
                       const T* grad_output, T* grad_input) {
  const int taps = p.kh * p.kw;
  for (std::size_t i = 0; i < n_out; ++i)
    for (std::int32_t co = 0; co < p.c_out; ++co) p.grad_bias[co] += grad_output[i * p.c_out + co];

  std::vector<std::int32_t> rev(n_in * taps, -1);
  for (std::size_t i = 0; i < n_out; ++i)
    for (int t = 0; t < taps; ++t) {
      const std::int32_t j = nb[i * taps + t];
      if (j >= 0) rev[static_cast<std::size_t>(j) * taps + t] = static_cast<std::int32_t>(i);
    }
  const auto wb = pack_backward(p);
  const std::vector<T> zeros(static_cast<std::size_t>(std::max(p.c_in, p.c_out)) + 32, T(0));
  dispatch_block<T>(p.c_in, [&](auto b) {
    input_grad_kernel<T, decltype(b)::value>(n_in, rev.data(), taps, p.c_in, p.c_out, wb.data(), grad_output,
                                             zeros.data(), grad_input);
  });

  std::vector<T> gw(p.weight.size(), T(0));
  dispatch_block<T>(p.c_out, [&](auto b) {
    weight_grad_kernel<T, decltype(b)::value>(input, n_out, nb, taps, p.c_in, p.c_out, grad_output, zeros.data(),
                                              gw.data());
  });
  for (std::int32_t co = 0; co < p.c_out; ++co)
    for (std::int32_t ci = 0; ci < p.c_in; ++ci)
      for (int t = 0; t < taps; ++t)
        p.grad_weight[(static_cast<std::size_t>(co) * p.c_in + ci) * taps + t] +=
            gw[(static_cast<std::size_t>(t) * p.c_in + ci) * p.c_out + co];
}

// Neighbour table of a dense "same" convolution: input pixel index per
// (output pixel, tap), -1 in the zero padding.
std::vector<std::int32_t> dense_neighbors(std::int32_t height, std::int32_t width, int kh, int kw, int stride,
                                          std::uint64_t& pairs) {
  const std::int32_t oh = (height + stride - 1) / stride;
  const std::int32_t ow = (width + stride - 1) / stride;
  std::vector<std::int32_t> nb(static_cast<std::size_t>(oh) * ow * kh * kw, -1);
  pairs = 0;
  std::size_t k = 0;
  for (std::int32_t oy = 0; oy < oh; ++oy)
    for (std::int32_t ox = 0; ox < ow; ++ox)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx, ++k) {
          const std::int32_t sy = oy * stride + ky - kh / 2;
          const std::int32_t sx = ox * stride + kx - kw / 2;
          if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
          nb[k] = sy * width + sx;
          ++pairs;
        }
  return nb;
}

std::vector<std::int32_t> pixel_indices(const SiteSet& sites, std::int32_t width) {
  std::vector<std::int32_t> nb;
  nb.reserve(sites.size());
  for (const Site& s : sites.sites()) nb.push_back(s.y * width + s.x);
  return nb;
}

void check_same_sites(const SitesPtr& a, const SitesPtr& b, const char* what) {
  if (!same_sites(a, b)) throw ShapeError(std::string(what) + ": active site sets differ");
}

}  // namespace

template <typename T>
DenseTensor<T> dense_conv_fwd(const DenseTensor<T>& input, const ConvParams<T>& p, int stride) {
  check_kernel(p, input.channels);
  if (stride != 1 && stride != 2) throw ShapeError("stride must be 1 or 2");
  DenseTensor<T> out((input.height + stride - 1) / stride, (input.width + stride - 1) / stride, p.c_out);
  std::uint64_t pairs = 0;
  const auto nb = dense_neighbors(input.height, input.width, p.kh, p.kw, stride, pairs);
  gathered_conv_fwd(input.values.data(), static_cast<std::size_t>(out.height) * out.width, nb.data(), p,
                    out.values.data());
  record_op_stats(0, 0, pairs * static_cast<std::uint64_t>(p.c_in) * p.c_out);
  return out;
}

template <typename T>
DenseTensor<T> dense_conv_bwd(const DenseTensor<T>& input, ConvParams<T>& p, int stride,
                              const DenseTensor<T>& grad_output) {
  check_kernel(p, input.channels);
  if (stride != 1 && stride != 2) throw ShapeError("stride must be 1 or 2");
  const std::int32_t oh = (input.height + stride - 1) / stride;
  const std::int32_t ow = (input.width + stride - 1) / stride;
  if (grad_output.height != oh || grad_output.width != ow || grad_output.channels != p.c_out)
    throw ShapeError("dense_conv_bwd: upstream gradient shape mismatch");
  DenseTensor<T> grad_in(input.height, input.width, input.channels);
  std::uint64_t pairs = 0;
  const auto nb = dense_neighbors(input.height, input.width, p.kh, p.kw, stride, pairs);
  gathered_conv_bwd(input.values.data(), static_cast<std::size_t>(input.height) * input.width,
                    static_cast<std::size_t>(oh) * ow, nb.data(), p, grad_output.values.data(), grad_in.values.data());
  record_op_stats(0, 0, 2 * pairs * static_cast<std::uint64_t>(p.c_in) * p.c_out);
  return grad_in;
}

template <typename T>
DenseTensor<T> dense_relu_fwd(const DenseTensor<T>& input) {
  DenseTensor<T> out = input;
  for (T& v : out.values) v = v > T(0) ? v : T(0);
  return out;
}

template <typename T>
DenseTensor<T> dense_relu_bwd(const DenseTensor<T>& output, const DenseTensor<T>& grad_output) {
  if (output.values.size() != grad_output.values.size()) throw ShapeError("dense_relu_bwd: shape mismatch");
  DenseTensor<T> grad = grad_output;
  for (std::size_t i = 0; i < grad.values.size(); ++i)
    if (!(output.values[i] > T(0))) grad.values[i] = T(0);
  return grad;
}

template <typename T>
SparseActivation<T> sparse_conv_fwd(const SparseActivation<T>& input, const ConvParams<T>& p) {
  check_kernel(p, input.channels);
  SparseActivation<T> out(input.level, p.c_out, input.sites);
  const std::size_t n = input.size();
  if (n == 0) return out;
  const Rulebook& rb = input.sites->rulebook(p.kh, p.kw);
  gathered_conv_fwd(input.values.data(), n, rb.neighbors.data(), p, out.values.data());
  record_op_stats(rb.active_pairs, n, rb.active_pairs * static_cast<std::uint64_t>(p.c_in) * p.c_out);
  return out;
}

template <typename T>
SparseActivation<T> sparse_conv_bwd(const SparseActivation<T>& input, ConvParams<T>& p,
                                    const SparseActivation<T>& grad_output) {
  check_kernel(p, input.channels);
  check_same_sites(input.sites, grad_output.sites, "sparse_conv_bwd");
  if (grad_output.channels != p.c_out) throw ShapeError("sparse_conv_bwd: upstream channel mismatch");
  SparseActivation<T> grad_in(input.level, input.channels, input.sites);
  const std::size_t n = input.size();
  if (n == 0) return grad_in;
  const Rulebook& rb = input.sites->rulebook(p.kh, p.kw);
  gathered_conv_bwd(input.values.data(), n, n, rb.neighbors.data(), p, grad_output.values.data(),
                    grad_in.values.data());
  record_op_stats(rb.active_pairs + n, rb.active_pairs, 2 * rb.active_pairs * static_cast<std::uint64_t>(p.c_in) * p.c_out);
  return grad_in;
}

SitesPtr upsample_sites(const SiteSet& parents) {
  std::vector<Site> children;
  children.reserve(parents.size() * 4);
  for (const Site& s : parents.sites()) {
    children.push_back({2 * s.x, 2 * s.y});
    children.push_back({2 * s.x + 1, 2 * s.y});
    children.push_back({2 * s.x, 2 * s.y + 1});
    children.push_back({2 * s.x + 1, 2 * s.y + 1});
  }
  return SiteSet::make(2 * parents.width(), 2 * parents.height(), std::move(children));
}

template <typename T>
SparseActivation<T> upsample2x_fwd(const SparseActivation<T>& input) {
  SparseActivation<T> out(input.level - 1, input.channels, upsample_sites(*input.sites));
  const auto children = out.sites->sites();
  for (std::size_t i = 0; i < children.size(); ++i) {
    const std::int32_t parent = input.sites->find(children[i].x / 2, children[i].y / 2);
    const auto src = input.row(static_cast<std::size_t>(parent));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  record_op_stats(children.size(), children.size(), 0);
  return out;
}

template <typename T>
SparseActivation<T> upsample2x_bwd(const SparseActivation<T>& input, const SparseActivation<T>& grad_output) {
  if (grad_output.size() != 4 * input.size() || grad_output.channels != input.channels)
    throw ShapeError("upsample2x_bwd: upstream gradient does not match the upsampled sites");
  SparseActivation<T> grad_in(input.level, input.channels, input.sites);
  const auto children = grad_output.sites->sites();
  for (std::size_t i = 0; i < children.size(); ++i) {
    const std::int32_t parent = input.sites->find(children[i].x / 2, children[i].y / 2);
    if (parent < 0) throw ShapeError("upsample2x_bwd: child without an active parent");
    auto dst = grad_in.row(static_cast<std::size_t>(parent));
    const auto g = grad_output.row(i);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += g[c];
  }
  record_op_stats(children.size(), children.size(), 0);
  return grad_in;
}

template <typename T>
SparseActivation<T> restrict_fwd(const SparseActivation<T>& input, const SitesPtr& subset) {
  if (subset->width() != input.width() || subset->height() != input.height())
    throw ShapeError("restrict: grid dims differ");
  SparseActivation<T> out(input.level, input.channels, subset);
  for (std::size_t i = 0; i < subset->size(); ++i) {
    const Site& s = (*subset)[i];
    const std::int32_t j = input.sites->find(s.x, s.y);
    if (j < 0) throw ShapeError("restrict: subset site is not active in the input");
    const auto src = input.row(static_cast<std::size_t>(j));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  record_op_stats(subset->size(), subset->size(), 0);
  return out;
}

template <typename T>
SparseActivation<T> restrict_bwd(const SparseActivation<T>& input, const SparseActivation<T>& grad_output) {
  SparseActivation<T> grad_in(input.level, input.channels, input.sites);
  for (std::size_t i = 0; i < grad_output.size(); ++i) {
    const Site& s = (*grad_output.sites)[i];
    const std::int32_t j = input.sites->find(s.x, s.y);
    if (j < 0) throw ShapeError("restrict_bwd: subset site is not active in the input");
    const auto g = grad_output.row(i);
    std::copy(g.begin(), g.end(), grad_in.row(static_cast<std::size_t>(j)).begin());
  }
  record_op_stats(grad_output.size(), grad_output.size(), 0);
  return grad_in;
}

template <typename T>
SparseActivation<T> gather_skip_fwd(const DenseTensor<T>& encoder_feat, const SitesPtr& sites, int level,
                                    const ConvParams<T>& p) {
  if (encoder_feat.width != sites->width() || encoder_feat.height != sites->height())
    throw ShapeError("gather_skip: encoder feature dims differ from the level dims");
  if (p.kh != 1 || p.kw != 1) throw ShapeError("gather_skip needs a 1x1 kernel");
  check_kernel(p, encoder_feat.channels);
  SparseActivation<T> out(level, p.c_out, sites);
  const auto nb = pixel_indices(*sites, encoder_feat.width);
  gathered_conv_fwd(encoder_feat.values.data(), sites->size(), nb.data(), p, out.values.data());
  record_op_stats(sites->size(), sites->size(), sites->size() * static_cast<std::uint64_t>(p.c_in) * p.c_out);
  return out;
}

template <typename T>
void gather_skip_bwd(const DenseTensor<T>& encoder_feat, ConvParams<T>& p, const SparseActivation<T>& grad_output,
                     DenseTensor<T>& grad_encoder) {
  if (grad_encoder.width != encoder_feat.width || grad_encoder.height != encoder_feat.height ||
      grad_encoder.channels != encoder_feat.channels)
    throw ShapeError("gather_skip_bwd: encoder gradient shape mismatch");
  if (grad_output.channels != p.c_out) throw ShapeError("gather_skip_bwd: upstream channel mismatch");
  check_kernel(p, encoder_feat.channels);
  const auto nb = pixel_indices(*grad_output.sites, encoder_feat.width);
  gathered_conv_bwd(encoder_feat.values.data(), static_cast<std::size_t>(encoder_feat.height) * encoder_feat.width,
                    grad_output.size(), nb.data(), p, grad_output.values.data(), grad_encoder.values.data());
  record_op_stats(grad_output.size(), grad_output.size(),
                  2 * grad_output.size() * static_cast<std::uint64_t>(p.c_in) * p.c_out);
}

template <typename T>
SparseActivation<T> relu_fwd(const SparseActivation<T>& input) {
  SparseActivation<T> out = input;
  for (T& v : out.values) v = v > T(0) ? v : T(0);
  record_op_stats(input.size(), input.size(), 0);
  return out;
}

template <typename T>
SparseActivation<T> relu_bwd(const SparseActivation<T>& output, const SparseActivation<T>& grad_output) {
  check_same_sites(output.sites, grad_output.sites, "relu_bwd");
  SparseActivation<T> grad = grad_output;
  for (std::size_t i = 0; i < grad.values.size(); ++i)
    if (!(output.values[i] > T(0))) grad.values[i] = T(0);
  record_op_stats(output.size(), output.size(), 0);
  return grad;
}

template <typename T>
SparseActivation<T> add_fwd(const SparseActivation<T>& a, const SparseActivation<T>& b) {
  check_same_sites(a.sites, b.sites, "add");
  if (a.channels != b.channels) throw ShapeError("add: channel mismatch");
  SparseActivation<T> out = a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += b.values[i];
  record_op_stats(2 * a.size(), a.size(), 0);
  return out;
}

template <typename T>
void add_bwd(const SparseActivation<T>& a, const SparseActivation<T>& b, const SparseActivation<T>& grad_output) {
  check_same_sites(a.sites, b.sites, "add_bwd");
  check_same_sites(a.sites, grad_output.sites, "add_bwd");
}

template <typename T>
DenseTensor<T> to_dense(const SparseActivation<T>& input) {
  DenseTensor<T> out(input.height(), input.width(), input.channels);
  for (std::size_t i = 0; i < input.size(); ++i) {
    const Site& s = (*input.sites)[i];
    const auto src = input.row(i);
    std::copy(src.begin(), src.end(), out.pixel(s.x, s.y).begin());
  }
  return out;
}

template <typename T>
SparseActivation<T> from_dense(const DenseTensor<T>& input, const SitesPtr& sites, int level) {
  if (input.width != sites->width() || input.height != sites->height()) throw ShapeError("from_dense: dims differ");
  SparseActivation<T> out(level, input.channels, sites);
  for (std::size_t i = 0; i < sites->size(); ++i) {
    const Site& s = (*sites)[i];
    const auto src = input.pixel(s.x, s.y);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

#define QGN_INSTANTIATE_OPS(T)                                                                                  \
  template DenseTensor<T> dense_conv_fwd(const DenseTensor<T>&, const ConvParams<T>&, int);                     \
  template DenseTensor<T> dense_conv_bwd(const DenseTensor<T>&, ConvParams<T>&, int, const DenseTensor<T>&);    \
  template DenseTensor<T> dense_relu_fwd(const DenseTensor<T>&);                                                \
  template DenseTensor<T> dense_relu_bwd(const DenseTensor<T>&, const DenseTensor<T>&);                         \
  template SparseActivation<T> sparse_conv_fwd(const SparseActivation<T>&, const ConvParams<T>&);               \
  template SparseActivation<T> sparse_conv_bwd(const SparseActivation<T>&, ConvParams<T>&,                      \
                                               const SparseActivation<T>&);                                     \
  template SparseActivation<T> upsample2x_fwd(const SparseActivation<T>&);                                      \
  template SparseActivation<T> upsample2x_bwd(const SparseActivation<T>&, const SparseActivation<T>&);           \
  template SparseActivation<T> restrict_fwd(const SparseActivation<T>&, const SitesPtr&);                       \
  template SparseActivation<T> restrict_bwd(const SparseActivation<T>&, const SparseActivation<T>&);            \
  template SparseActivation<T> gather_skip_fwd(const DenseTensor<T>&, const SitesPtr&, int, const ConvParams<T>&); \
  template void gather_skip_bwd(const DenseTensor<T>&, ConvParams<T>&, const SparseActivation<T>&,              \
                                DenseTensor<T>&);                                                               \
  template SparseActivation<T> relu_fwd(const SparseActivation<T>&);                                            \
  template SparseActivation<T> relu_bwd(const SparseActivation<T>&, const SparseActivation<T>&);                \
  template SparseActivation<T> add_fwd(const SparseActivation<T>&, const SparseActivation<T>&);                 \
  template void add_bwd(const SparseActivation<T>&, const SparseActivation<T>&, const SparseActivation<T>&);    \
  template DenseTensor<T> to_dense(const SparseActivation<T>&);                                                 \
  template SparseActivation<T> from_dense(const DenseTensor<T>&, const SitesPtr&, int);

QGN_INSTANTIATE_OPS(float)
QGN_INSTANTIATE_OPS(double)

#undef QGN_INSTANTIATE_OPS

}  // namespace qgn
