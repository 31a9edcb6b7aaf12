#pragma once

// Forward/backward kernels for the dense encoder and the sparse decoder.
//
// Every *_bwd function returns the gradient w.r.t. the op's activation input
// and adds parameter gradients into ConvParams::grad_*. Sparse ops read and
// write active sites only.

#include "qgn/tensor.hpp"

namespace qgn {

// Dense cross-correlation, zero padding kh/2, kw/2. Output is
// ceil(H/stride) x ceil(W/stride).
template <typename T>
DenseTensor<T> dense_conv_fwd(const DenseTensor<T>& input, const ConvParams<T>& p, int stride = 1);

template <typename T>
DenseTensor<T> dense_conv_bwd(const DenseTensor<T>& input, ConvParams<T>& p, int stride,
                              const DenseTensor<T>& grad_output);

template <typename T>
DenseTensor<T> dense_relu_fwd(const DenseTensor<T>& input);

template <typename T>
DenseTensor<T> dense_relu_bwd(const DenseTensor<T>& output, const DenseTensor<T>& grad_output);

// Submanifold convolution: output sites equal input sites; inactive
// neighbours contribute nothing and bias lands on active sites only.
template <typename T>
SparseActivation<T> sparse_conv_fwd(const SparseActivation<T>& input, const ConvParams<T>& p);

template <typename T>
SparseActivation<T> sparse_conv_bwd(const SparseActivation<T>& input, ConvParams<T>& p,
                                    const SparseActivation<T>& grad_output);

// Nearest-neighbour 2x upsampling to level - 1; each site spawns its four
// children with copied vectors.
template <typename T>
SparseActivation<T> upsample2x_fwd(const SparseActivation<T>& input);

template <typename T>
SparseActivation<T> upsample2x_bwd(const SparseActivation<T>& input, const SparseActivation<T>& grad_output);

SitesPtr upsample_sites(const SiteSet& parents);

// Keeps the rows of `subset` (which must be a subset of input's sites).
template <typename T>
SparseActivation<T> restrict_fwd(const SparseActivation<T>& input, const SitesPtr& subset);

template <typename T>
SparseActivation<T> restrict_bwd(const SparseActivation<T>& input, const SparseActivation<T>& grad_output);

// 1x1 convolution of the encoder feature map evaluated at `sites` only.
template <typename T>
SparseActivation<T> gather_skip_fwd(const DenseTensor<T>& encoder_feat, const SitesPtr& sites, int level,
                                    const ConvParams<T>& p);

// Adds the encoder-feature gradient into `grad_encoder` (same shape as the
// encoder feature map).
template <typename T>
void gather_skip_bwd(const DenseTensor<T>& encoder_feat, ConvParams<T>& p, const SparseActivation<T>& grad_output,
                     DenseTensor<T>& grad_encoder);

template <typename T>
SparseActivation<T> relu_fwd(const SparseActivation<T>& input);

template <typename T>
SparseActivation<T> relu_bwd(const SparseActivation<T>& output, const SparseActivation<T>& grad_output);

template <typename T>
SparseActivation<T> add_fwd(const SparseActivation<T>& a, const SparseActivation<T>& b);

// The gradient of a sum flows unchanged to both operands; this only checks
// that the sites agree.
template <typename T>
void add_bwd(const SparseActivation<T>& a, const SparseActivation<T>& b, const SparseActivation<T>& grad_output);

// Scatter into a zero-filled dense tensor / gather dense values at sites.
template <typename T>
DenseTensor<T> to_dense(const SparseActivation<T>& input);

template <typename T>
SparseActivation<T> from_dense(const DenseTensor<T>& input, const SitesPtr& sites, int level);

}  // namespace qgn
