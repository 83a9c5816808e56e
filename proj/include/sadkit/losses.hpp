#pragma once

#include "sadkit/paths.hpp"
#include "sadkit/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace sadkit {

/// Numerator convention of the IoU loss.
///  - kPublished: 1 - N_p / (N_p + N_g - N_o)
///  - kOverlap:   1 - N_o / (N_p + N_g - N_o)
enum class IouForm { kPublished, kOverlap };

IouForm parse_iou_form(const std::string& name);
std::string to_string(IouForm form);

struct LossWeights {
  double alpha = 0.1;  // IoU
  double beta = 0.1;   // lane existence
  double gamma = 0.1;  // distillation
  double background_ce_weight = 0.4;
  IouForm iou_form = IouForm::kPublished;

  void validate() const;
};

/// Class labels, row-major, one byte per pixel; batched labels are the
/// per-image maps laid end to end.
using LabelSpan = std::span<const std::uint8_t>;

/// Mean over pixels of -w(l) log softmax(scores)_l with w(0) = bg_weight and
/// w(l > 0) = 1. Scores are [N_c,H,W] or [N,N_c,H,W].
template <typename Scalar>
Tensor<Scalar> seg_ce_loss(const Tensor<Scalar>& scores, LabelSpan labels, double bg_weight);

/// IoU loss on soft counts: q = 1 - p(background), y = [label > 0],
/// N_p = sum q, N_g = sum y, N_o = sum q*y. Zero when N_p + N_g - N_o = 0.
/// Batched scores average the per-image losses.
template <typename Scalar>
Tensor<Scalar> iou_loss(const Tensor<Scalar>& scores, LabelSpan labels, IouForm form = IouForm::kPublished);

double iou_loss_from_counts(double n_pred, double n_gt, double n_overlap, IouForm form = IouForm::kPublished);

/// Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7].
template <typename Scalar>
Tensor<Scalar> exist_loss(const Tensor<Scalar>& probs, std::span<const std::uint8_t> bits);

/// Sum over paths of mean((Psi(A_from) - Psi(A_to))^2), both maps at the
/// target's spatial size. With detach_target the target map passes no gradient.
template <typename Scalar>
Tensor<Scalar> distill_loss(std::span<const Tensor<Scalar>> activations, const PathSet& paths,
                            bool detach_target = true, bool allow_backward = false);

template <typename Scalar>
struct LossTerms {
  Tensor<Scalar> seg;
  Tensor<Scalar> iou;
  Tensor<Scalar> exist;    // zero when there is no existence branch
  Tensor<Scalar> distill;  // zero when distillation is inactive
  Tensor<Scalar> total;
};

template <typename Scalar>
struct LossInputs {
  Tensor<Scalar> seg_scores;
  LabelSpan labels;
  Tensor<Scalar> exist_probs;  // may be undefined
  std::span<const std::uint8_t> exist_bits;
  std::span<const Tensor<Scalar>> activations;
};

struct DistillSettings {
  PathSet paths;
  bool active = false;
  bool detach_target = true;
  bool allow_backward = false;
};

/// L_seg + alpha L_IoU + beta L_exist + gamma L_distill. The distillation term
/// is left out entirely (not multiplied by zero) when inactive, when there are
/// no paths, or when gamma is 0.
template <typename Scalar>
LossTerms<Scalar> total_loss(const LossInputs<Scalar>& in, const LossWeights& weights, const DistillSettings& sad);

}  // namespace sadkit
