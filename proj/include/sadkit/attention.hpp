#pragma once

#include "sadkit/tensor.hpp"

#include <string>

namespace sadkit {

// Activation-based attention mapping functions. Each collapses the channel
// dimension of a [C,H,W] (or batched [N,C,H,W]) activation into a nonnegative
// [H,W] (or [N,H,W]) map.

/// Sum over channels of |A_c|.
template <typename Scalar>
Tensor<Scalar> g_sum(const Tensor<Scalar>& activation);

/// Sum over channels of |A_c|^p, p > 1.
template <typename Scalar>
Tensor<Scalar> g_sum_p(const Tensor<Scalar>& activation, double p);

/// Max over channels of |A_c|^p, p >= 1.
template <typename Scalar>
Tensor<Scalar> g_max_p(const Tensor<Scalar>& activation, double p);

/// Attention generator: spatial softmax of the (resampled) G^2_sum map.
/// Resampling to the target size happens only when the sizes differ.
template <typename Scalar>
Tensor<Scalar> atgen(const Tensor<Scalar>& activation, Index target_h, Index target_w);

enum class MappingFunction { kSum, kSumP, kMaxP };

MappingFunction parse_mapping_function(const std::string& name);

/// Unnormalized attention map for figure export.
template <typename Scalar>
Tensor<Scalar> attention_map(const Tensor<Scalar>& activation, MappingFunction fn, double p);

}  // namespace sadkit
