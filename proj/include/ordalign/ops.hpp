#pragma once

#include <vector>

#include "ordalign/tensor.hpp"

namespace ordalign {

// Differentiable ops. Every op validates shapes up front, computes eagerly,
// and registers its backward closure on the active tape when an input tracks
// gradients. Shapes never broadcast implicitly except 1-element-vs-tensor in
// the binary elementwise ops.

// x[b,i] @ w[i,o]
template <typename T>
TensorT<T> matmul(const TensorT<T>& x, const TensorT<T>& w);

// x[b,k] + bias[k] per row
template <typename T>
TensorT<T> add_row_bias(const TensorT<T>& x, const TensorT<T>& bias);

// matmul + row bias
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias);

// x[b,ci,h,w] * k[co,ci,kh,kw], zero padding; out spatial = (d+2p-k)/s+1
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& k, int stride, int pad);

// x[b,c,h,w] + bias[c]
template <typename T>
TensorT<T> add_channel_bias(const TensorT<T>& x, const TensorT<T>& bias);

template <typename T>
TensorT<T> relu(const TensorT<T>& x);
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x);
template <typename T>
TensorT<T> exp(const TensorT<T>& x);
// Elementwise natural log; rejects non-positive inputs.
template <typename T>
TensorT<T> log(const TensorT<T>& x);
template <typename T>
TensorT<T> square(const TensorT<T>& x);
template <typename T>
TensorT<T> sqrt(const TensorT<T>& x);
template <typename T>
TensorT<T> neg(const TensorT<T>& x);
// Clamp to [lo, hi]; gradient passes through strictly inside the range.
template <typename T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi);

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, T c);
template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& x, T c);
// c - x
template <typename T>
TensorT<T> sub_from(T c, const TensorT<T>& x);

template <typename T>
struct BatchNormStateT {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool initialized = false;
};

// Per-channel batch normalization on [b,c,h,w]. Train mode normalizes by
// batch statistics (epsilon 1e-5) and updates running stats with momentum
// 0.1; eval mode uses running stats and requires at least one train step.
template <typename T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       BatchNormStateT<T>& state, bool train);

// Row softmax on [b,k] with max-subtraction.
template <typename T>
TensorT<T> softmax(const TensorT<T>& x);

// Bilinear warp of f[b,c,h,w] by per-pixel displacements phi[b,2,h,w]
// (channel 0 = dy, channel 1 = dx, pixel units). Out-of-bounds samples
// clamp to the border. Differentiable in both f and phi.
template <typename T>
TensorT<T> spatial_transform(const TensorT<T>& f, const TensorT<T>& phi);

template <typename T>
struct AttnPoolT {
  TensorT<T> a;  // [b,h,w], sums to 1 over the grid per sample
  TensorT<T> v;  // [b,c], attention-weighted feature sum
};

// Scores each location with score_w[c], softmaxes over the h*w grid, and
// returns the attention map plus the attention-weighted pooled vector.
template <typename T>
AttnPoolT<T> attention_softmax_pool(const TensorT<T>& f, const TensorT<T>& score_w);

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x);
template <typename T>
TensorT<T> mean_all(const TensorT<T>& x);

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape);

// Concatenate [b,k_i] blocks along the column axis.
template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts);

// Row r of x[b,k] as a [1,k] tensor.
template <typename T>
TensorT<T> slice_row(const TensorT<T>& x, std::size_t r);

// Repeat the single column of x[b,1] k times.
template <typename T>
TensorT<T> expand_cols(const TensorT<T>& x, std::size_t k);

// Stack two [b,h,w] maps into a [b,2,h,w] image (map a = channel 0).
template <typename T>
TensorT<T> stack_pair(const TensorT<T>& a, const TensorT<T>& b);

}  // namespace ordalign
