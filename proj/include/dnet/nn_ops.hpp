#pragma once

#include <cstddef>

#include "dnet/tensor.hpp"

namespace dnet {

/// Stride-1, zero "same"-padded convolution. Kernels are 3x3 (1x1 is allowed
/// for score layers). The dilation inserts (dilation - 1) zeros between taps.
struct Conv2dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t dilation = 1;

  std::size_t effective_extent() const { return kernel + (kernel - 1) * (dilation - 1); }
  std::size_t padding() const { return (effective_extent() - 1) / 2; }
  void validate() const;
};

struct ActivationSpec {
  double alpha = 0.1;
  void validate() const;
};

/// input [C,H,W], weight [O,C,k,k], bias [O] -> [O,H,W].
/// Lowered to a patch matrix with a dilation-aware gather, then a GEMM.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const Conv2dSpec& spec);
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t dilation = 1);

/// f(x) = x for x > 0, alpha * x otherwise. Slope at 0 is alpha.
Tensor leaky_relu(const Tensor& input, double alpha = 0.1);

/// 2x2 window, stride 2. Ties route the gradient to the first element in
/// row-major window order.
Tensor max_pool2(const Tensor& input);

bool is_supported_upsample_factor(std::size_t factor);

/// Learnable transposed convolution (kernel 2f, stride f) over an
/// edge-replicated input. weight is [C,C,2f,2f].
Tensor upsample(const Tensor& input, const Tensor& weight, std::size_t factor);

/// Bilinear interpolation weights for `upsample`: channel-diagonal, each
/// output phase sums to one so constants are preserved.
Tensor bilinear_upsample_weights(std::size_t channels, std::size_t factor, bool requires_grad = false);

/// Softmax over axis 0 of a [K, ...] tensor, computed with max-shifted
/// exponentials.
Tensor softmax_channels(const Tensor& logits);
Tensor log_softmax_channels(const Tensor& logits);

/// Elementwise sum of two identically shaped score maps.
Tensor sum_fusion(const Tensor& a, const Tensor& b);

}  // namespace dnet
