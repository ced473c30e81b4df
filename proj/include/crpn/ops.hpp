#pragma once
// Forward and analytic backward passes for every layer the network uses.
// All functions are pure; rank-3 tensors are (C, H, W).

#include "crpn/tensor.hpp"

namespace crpn::ops {

/// Which gradients a backward call should produce. Skipping the input
/// gradient saves a GEMM plus col2im for frozen or leaf layers.
struct GradRequest {
  bool input = true;
  bool weights = true;
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;    // empty when not requested
  Tensor<T> weights;  // empty when not requested
  Tensor<T> bias;     // empty when the forward had no bias
};

/// Correlation-style convolution (no kernel flip). weights: (Cout, Cin, kh, kw);
/// bias: (Cout) or empty.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int stride,
                 int pad);

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weights, bool has_bias,
                             const Tensor<T>& grad_out, int stride, int pad,
                             GradRequest request = {});

/// Adjoint of conv2d with the same geometry and pad 0. weights: (Cin, Cout, kh, kw).
/// Output extent (H - 1) * stride + kh.
template <typename T>
Tensor<T> transposed_conv(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                          int stride);

template <typename T>
ConvGrads<T> transposed_conv_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                      bool has_bias, const Tensor<T>& grad_out, int stride,
                                      GradRequest request = {});

/// Bilinear resampling with align-corners semantics.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int out_h, int out_w);

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& grad_out, int in_h, int in_w);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Subgradient 0 at x == 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// In-place a += b with a shape check.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void scale_inplace(Tensor<T>& a, T factor);

/// Valid-mode sliding dot product with the kernel unflipped.
/// kernel (C, kh, kw) -> (1, H', W'); kernel (K, C, kh, kw) -> (K, H', W').
/// A stride above 1 samples every stride-th offset.
template <typename T>
Tensor<T> cross_correlate(const Tensor<T>& kernel, const Tensor<T>& search, int stride = 1);

template <typename T>
struct CorrGrads {
  Tensor<T> kernel;
  Tensor<T> search;
};

template <typename T>
CorrGrads<T> cross_correlate_backward(const Tensor<T>& kernel, const Tensor<T>& search,
                                      const Tensor<T>& grad_out, int stride = 1);

/// Channels (2i, 2i+1) hold one (neg, pos) logit pair per site.
template <typename T>
Tensor<T> softmax_pair(const Tensor<T>& logits);

template <typename T>
Tensor<T> softmax_pair_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs);

}  // namespace crpn::ops
