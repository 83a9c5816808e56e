#pragma once

#include "sadkit/ops.hpp"
#include "sadkit/tensor.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sadkit {

struct ModelConfig {
  Index input_h = 128;
  Index input_w = 256;
  Index input_channels = 3;
  int num_classes = 5;  // background + lane slots
  int lane_slots = 4;
  std::array<Index, 4> encoder_widths{8, 16, 32, 32};
  std::array<Index, 2> decoder_widths{16, 8};
  Index exist_channels = 16;  // dilated conv width in the existence branch
  Index exist_hidden = 32;    // first fully connected layer
  bool enable_e3_e4_concat = true;
  bool existence_branch = true;
  std::vector<int> deep_supervision_blocks;  // subset of {2, 3, 4}

  void validate() const;
  /// Flattened length entering the existence branch's first FC layer.
  Index exist_flatten_size() const;
};

template <typename Scalar>
struct ForwardOutput {
  Tensor<Scalar> seg_scores;               // [N,N_c,H,W] logits
  Tensor<Scalar> exist_probs;              // [N,L]; undefined without the branch
  std::array<Tensor<Scalar>, 4> activations;  // A_1..A_4, post-block
  std::vector<Tensor<Scalar>> deep_heads;  // one [N,N_c,H,W] map per configured block
};

enum class FenceBranch { kExistence };

template <typename Scalar>
struct ConvLayer {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
  Conv2dOptions options;

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return conv2d(x, weight, bias, options); }
};

template <typename Scalar>
struct NormLayer {
  Tensor<Scalar> scale;
  Tensor<Scalar> shift;
  std::shared_ptr<NormStats<Scalar>> stats;

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, bool training) {
    return channel_norm(x, scale, shift, *stats, training);
  }
};

template <typename Scalar>
struct LinearLayer {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return fully_connected(x, weight, bias); }
};

/// Conv -> norm -> relu.
template <typename Scalar>
struct ConvUnit {
  ConvLayer<Scalar> conv;
  NormLayer<Scalar> norm;

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, bool training) { return relu(norm(conv(x), training)); }
};

/// Miniature ENet-style lane segmentation network: encoder blocks E1..E4,
/// decoder D1..D2, lane existence branch P1 and optional deep-supervision
/// heads. Copies share parameters and running statistics.
template <typename Scalar>
class LaneModel {
 public:
  static LaneModel build(const ModelConfig& config, std::uint64_t seed);

  /// Accepts [3,H,W] or [N,3,H,W]; outputs are batched either way.
  ForwardOutput<Scalar> forward(const Tensor<Scalar>& x, bool training);

  const ModelConfig& config() const { return config_; }
  bool existence_fence() const { return fence_existence_; }
  void set_existence_fence(bool on) { fence_existence_ = on; }

  /// Trainable tensors in declared order.
  std::vector<Tensor<Scalar>> parameters() const;
  /// Deep-supervision head parameters only.
  std::vector<Tensor<Scalar>> head_parameters() const;

  /// Every persistent array (parameters, then running statistics) in
  /// declared order, with a stable name.
  void visit_state(const std::function<void(const std::string&, const Shape&, ArrayX<Scalar>&)>& fn);

 private:
  LaneModel() = default;

  ModelConfig config_;
  bool fence_existence_ = false;

  std::array<ConvUnit<Scalar>, 3> down_;   // E1..E3 stride-2 entry
  std::array<ConvUnit<Scalar>, 3> inner_;  // E1..E3 3x3 body
  std::array<ConvUnit<Scalar>, 2> e4_;     // dilated, resolution preserving
  std::array<ConvLayer<Scalar>, 2> dec_reduce_;
  std::array<ConvUnit<Scalar>, 2> dec_body_;
  ConvLayer<Scalar> classifier_;
  ConvUnit<Scalar> exist_conv_;
  ConvLayer<Scalar> exist_reduce_;
  LinearLayer<Scalar> exist_fc1_;
  LinearLayer<Scalar> exist_fc2_;
  std::vector<ConvLayer<Scalar>> heads_;
};

/// Copy of `model` (sharing parameters) whose P1 branch passes no gradient
/// back into the encoder.
template <typename Scalar>
LaneModel<Scalar> block_gradient_fence(LaneModel<Scalar> model, FenceBranch branch = FenceBranch::kExistence);

extern template class LaneModel<float>;
extern template class LaneModel<double>;

}  // namespace sadkit
