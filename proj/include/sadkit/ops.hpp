#pragma once

#include "sadkit/tensor.hpp"

namespace sadkit {

// Image ops take [C,H,W] or batched [N,C,H,W] tensors and keep the rank of
// their input. Spatial ops act on the trailing two dimensions.

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

/// Output extent of a convolution along one axis; throws ShapeError when the
/// geometry does not produce a positive integer extent.
Index conv_output_extent(Index in, Index kernel, const Conv2dOptions& opt);

/// Zero-padded cross-correlation. Each output element accumulates
/// bias, then taps in (c_in, ky, kx) row-major order.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, const Conv2dOptions& opt = {});

/// Pixel-center bilinear resampling with edge clamping.
template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& input, Index out_h, Index out_w);

/// Softmax over all H*W positions of each trailing 2-D slice.
template <typename Scalar>
Tensor<Scalar> spatial_softmax(const Tensor<Scalar>& map);

/// Per-pixel softmax across the channel dimension.
template <typename Scalar>
Tensor<Scalar> channel_softmax(const Tensor<Scalar>& input);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a);
/// Mean of squared differences over all elements.
template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// 2x2 windows, stride 2; odd trailing rows/columns are dropped.
template <typename Scalar>
Tensor<Scalar> max_pool2(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& x);

/// y = W x + b for x of shape [F] or [N,F]; W is [O,F], b is [O].
template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& x, const Tensor<Scalar>& weights,
                               const Tensor<Scalar>& bias);

/// [C,H,W] -> [C*H*W]; [N,C,H,W] -> [N,C*H*W].
template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& x);

/// Channel-wise concatenation of two image tensors with equal N, H, W.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
struct NormStats {
  ArrayX<Scalar> running_mean;
  ArrayX<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);

  static NormStats identity(Index channels) {
    return {ArrayX<Scalar>::Zero(channels), ArrayX<Scalar>::Ones(channels)};
  }
};

/// Per-channel standardization with learned scale/shift. Training uses the
/// statistics of the batch (and updates the running averages); inference uses
/// the running averages.
template <typename Scalar>
Tensor<Scalar> channel_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& scale,
                            const Tensor<Scalar>& shift, NormStats<Scalar>& stats, bool training);

}  // namespace sadkit
