#include "sadkit/losses.hpp"

#include "sadkit/attention.hpp"
#include "sadkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sadkit {

namespace {

struct ScoreDims {
  Index n, c, area;
};

template <typename Scalar>
ScoreDims score_dims(const Tensor<Scalar>& scores, LabelSpan labels, const char* op) {
  ScoreDims d{};
  if (scores.rank() == 3) {
    d = {1, scores.dim(0), scores.dim(1) * scores.dim(2)};
  } else if (scores.rank() == 4) {
    d = {scores.dim(0), scores.dim(1), scores.dim(2) * scores.dim(3)};
  } else {
    throw ShapeError(std::string(op) + ": scores must be [N_c,H,W] or [N,N_c,H,W], got " + to_string(scores.shape()));
  }
  if (d.c < 2) throw ShapeError(std::string(op) + ": need at least 2 classes");
  if (static_cast<Index>(labels.size()) != d.n * d.area) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for scores " +
                     to_string(scores.shape()));
  }
  for (std::uint8_t l : labels) {
    if (l >= d.c) {
      throw std::invalid_argument(std::string(op) + ": label " + std::to_string(l) + " out of range for " +
                                  std::to_string(d.c) + " classes");
    }
  }
  return d;
}

// Per-pixel class probabilities, same layout as the scores.
template <typename Scalar>
ArrayX<Scalar> class_probabilities(const Tensor<Scalar>& scores, const ScoreDims& d) {
  ArrayX<Scalar> p(scores.size());
  const auto& v = scores.value();
  for (Index n = 0; n < d.n; ++n) {
    const Index base = n * d.c * d.area;
    ArrayX<Scalar> m = v.segment(base, d.area);
    for (Index c = 1; c < d.c; ++c) m = m.max(v.segment(base + c * d.area, d.area));
    ArrayX<Scalar> total = ArrayX<Scalar>::Zero(d.area);
    for (Index c = 0; c < d.c; ++c) {
      p.segment(base + c * d.area, d.area) = (v.segment(base + c * d.area, d.area) - m).exp();
      total += p.segment(base + c * d.area, d.area);
    }
    for (Index c = 0; c < d.c; ++c) p.segment(base + c * d.area, d.area) /= total;
  }
  return p;
}

}  // namespace

IouForm parse_iou_form(const std::string& name) {
  if (name == "published") return IouForm::kPublished;
  if (name == "overlap") return IouForm::kOverlap;
  throw std::invalid_argument("unknown iou form '" + name + "' (expected published or overlap)");
}

std::string to_string(IouForm form) { return form == IouForm::kPublished ? "published" : "overlap"; }

void LossWeights::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0 || background_ce_weight < 0) {
    throw std::invalid_argument("loss weights must be nonnegative");
  }
}

template <typename Scalar>
Tensor<Scalar> seg_ce_loss(const Tensor<Scalar>& scores, LabelSpan labels, double bg_weight) {
  const ScoreDims d = score_dims(scores, labels, "seg_ce_loss");
  const Scalar bg = static_cast<Scalar>(bg_weight);
  ArrayX<Scalar> prob = class_probabilities(scores, d);
  const Index pixels = d.n * d.area;
  Scalar total = 0;
  for (Index n = 0; n < d.n; ++n) {
    for (Index i = 0; i < d.area; ++i) {
      const std::uint8_t l = labels[static_cast<std::size_t>(n * d.area + i)];
      const Scalar w = l == 0 ? bg : Scalar(1);
      // log p_l from the logits directly keeps precision for confident scores.
      const Index base = n * d.c * d.area + i;
      Scalar m = scores.value()[base];
      for (Index c = 1; c < d.c; ++c) m = std::max(m, scores.value()[base + c * d.area]);
      Scalar s = 0;
      for (Index c = 0; c < d.c; ++c) s += std::exp(scores.value()[base + c * d.area] - m);
      total += -w * (scores.value()[base + l * d.area] - m - std::log(s));
    }
  }
  ArrayX<Scalar> v(1);
  v[0] = total / static_cast<Scalar>(pixels);
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  return make_op_result<Scalar>(
      {1}, std::move(v), {scores},
      [scores, prob = std::move(prob), lab = std::move(lab), d, bg, pixels](const ArrayX<Scalar>& g) {
        ArrayX<Scalar> gi = prob;
        for (Index n = 0; n < d.n; ++n) {
          for (Index i = 0; i < d.area; ++i) {
            const std::uint8_t l = lab[static_cast<std::size_t>(n * d.area + i)];
            const Index base = n * d.c * d.area + i;
            gi[base + l * d.area] -= Scalar(1);
            if (l == 0) {
              for (Index c = 0; c < d.c; ++c) gi[base + c * d.area] *= bg;
            }
          }
        }
        gi *= g[0] / static_cast<Scalar>(pixels);
        scores.accumulate_grad(gi);
      });
}

double iou_loss_from_counts(double n_pred, double n_gt, double n_overlap, IouForm form) {
  const double denom = n_pred + n_gt - n_overlap;
  if (denom == 0.0) return 0.0;
  const double numer = form == IouForm::kPublished ? n_pred : n_overlap;
  return 1.0 - numer / denom;
}

template <typename Scalar>
Tensor<Scalar> iou_loss(const Tensor<Scalar>& scores, LabelSpan labels, IouForm form) {
  const ScoreDims d = score_dims(scores, labels, "iou_loss");
  ArrayX<Scalar> prob = class_probabilities(scores, d);
  std::vector<Scalar> np(static_cast<std::size_t>(d.n)), ng(np.size()), no(np.size());
  Scalar total = 0;
  for (Index n = 0; n < d.n; ++n) {
    auto p0 = prob.segment(n * d.c * d.area, d.area);
    Scalar sp = 0, sg = 0, so = 0;
    for (Index i = 0; i < d.area; ++i) {
      const Scalar q = Scalar(1) - p0[i];
      const Scalar y = labels[static_cast<std::size_t>(n * d.area + i)] > 0 ? Scalar(1) : Scalar(0);
      sp += q;
      sg += y;
      so += q * y;
    }
    np[n] = sp;
    ng[n] = sg;
    no[n] = so;
    const Scalar denom = sp + sg - so;
    if (denom != Scalar(0)) total += Scalar(1) - (form == IouForm::kPublished ? sp : so) / denom;
  }
  ArrayX<Scalar> v(1);
  v[0] = total / static_cast<Scalar>(d.n);
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  return make_op_result<Scalar>(
      {1}, std::move(v), {scores},
      [scores, prob = std::move(prob), lab = std::move(lab), d, form, np, ng, no](const ArrayX<Scalar>& g) {
        ArrayX<Scalar> gi = ArrayX<Scalar>::Zero(scores.size());
        const Scalar k = g[0] / static_cast<Scalar>(d.n);
        for (Index n = 0; n < d.n; ++n) {
          const Scalar denom = np[n] + ng[n] - no[n];
          if (denom == Scalar(0)) continue;
          const Scalar d2 = denom * denom;
          const Index base = n * d.c * d.area;
          for (Index i = 0; i < d.area; ++i) {
            const Scalar y = lab[static_cast<std::size_t>(n * d.area + i)] > 0 ? Scalar(1) : Scalar(0);
            // dL/dq_i
            const Scalar dq = form == IouForm::kPublished ? -(denom - np[n] * (Scalar(1) - y)) / d2
                                                          : -(y * denom - no[n] * (Scalar(1) - y)) / d2;
            // q = 1 - p0, dp0/ds_c = p0 (delta_c0 - p_c)
            const Scalar p0 = prob[base + i];
            for (Index c = 0; c < d.c; ++c) {
              const Scalar delta = c == 0 ? Scalar(1) : Scalar(0);
              gi[base + c * d.area + i] = k * dq * (-p0 * (delta - prob[base + c * d.area + i]));
            }
          }
        }
        scores.accumulate_grad(gi);
      });
}

template <typename Scalar>
Tensor<Scalar> exist_loss(const Tensor<Scalar>& probs, std::span<const std::uint8_t> bits) {
  if (static_cast<Index>(bits.size()) != probs.size()) {
    throw ShapeError("exist_loss: " + std::to_string(bits.size()) + " bits for probabilities " +
                     to_string(probs.shape()));
  }
  const Scalar lo = Scalar(1e-7), hi = Scalar(1) - Scalar(1e-7);
  const Index count = probs.size();
  Scalar total = 0;
  for (Index i = 0; i < count; ++i) {
    const Scalar p = std::clamp(probs.value()[i], lo, hi);
    total += bits[static_cast<std::size_t>(i)] ? -std::log(p) : -std::log(Scalar(1) - p);
  }
  ArrayX<Scalar> v(1);
  v[0] = total / static_cast<Scalar>(count);
  std::vector<std::uint8_t> b(bits.begin(), bits.end());
  return make_op_result<Scalar>({1}, std::move(v), {probs}, [probs, b = std::move(b), lo, hi, count](const ArrayX<Scalar>& g) {
    ArrayX<Scalar> gi = ArrayX<Scalar>::Zero(count);
    for (Index i = 0; i < count; ++i) {
      const Scalar p = probs.value()[i];
      if (p < lo || p > hi) continue;
      gi[i] = (b[static_cast<std::size_t>(i)] ? -Scalar(1) / p : Scalar(1) / (Scalar(1) - p)) * g[0] /
              static_cast<Scalar>(count);
    }
    probs.accumulate_grad(gi);
  });
}

template <typename Scalar>
Tensor<Scalar> distill_loss(std::span<const Tensor<Scalar>> activations, const PathSet& paths, bool detach_target,
                            bool allow_backward) {
  if (paths.empty()) return Tensor<Scalar>::scalar(Scalar(0));
  validate_paths(paths, static_cast<int>(activations.size()), allow_backward);
  Tensor<Scalar> total;
  for (const DistillPath& p : paths) {
    const Tensor<Scalar>& mimic = activations[static_cast<std::size_t>(p.from - 1)];
    const Tensor<Scalar>& source = activations[static_cast<std::size_t>(p.to - 1)];
    const Index h = source.dim(-2), w = source.dim(-1);
    Tensor<Scalar> target = atgen(detach_target ? source.detach() : source, h, w);
    Tensor<Scalar> term = mse(atgen(mimic, h, w), target);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <typename Scalar>
LossTerms<Scalar> total_loss(const LossInputs<Scalar>& in, const LossWeights& weights, const DistillSettings& sad) {
  weights.validate();
  LossTerms<Scalar> t;
  t.seg = seg_ce_loss(in.seg_scores, in.labels, weights.background_ce_weight);
  t.iou = iou_loss(in.seg_scores, in.labels, weights.iou_form);
  Tensor<Scalar> total = add(t.seg, scale(t.iou, static_cast<Scalar>(weights.alpha)));
  if (in.exist_probs.defined()) {
    t.exist = exist_loss(in.exist_probs, in.exist_bits);
    total = add(total, scale(t.exist, static_cast<Scalar>(weights.beta)));
  } else {
    t.exist = Tensor<Scalar>::scalar(Scalar(0));
  }
  if (sad.active && !sad.paths.empty() && weights.gamma != 0.0) {
    t.distill = distill_loss(in.activations, sad.paths, sad.detach_target, sad.allow_backward);
    total = add(total, scale(t.distill, static_cast<Scalar>(weights.gamma)));
  } else {
    t.distill = Tensor<Scalar>::scalar(Scalar(0));
  }
  t.total = total;
  return t;
}

#define SADKIT_INSTANTIATE_LOSSES(S)                                                                        \
  template Tensor<S> seg_ce_loss(const Tensor<S>&, LabelSpan, double);                                      \
  template Tensor<S> iou_loss(const Tensor<S>&, LabelSpan, IouForm);                                        \
  template Tensor<S> exist_loss(const Tensor<S>&, std::span<const std::uint8_t>);                           \
  template Tensor<S> distill_loss(std::span<const Tensor<S>>, const PathSet&, bool, bool);                  \
  template LossTerms<S> total_loss(const LossInputs<S>&, const LossWeights&, const DistillSettings&);

SADKIT_INSTANTIATE_LOSSES(float)
SADKIT_INSTANTIATE_LOSSES(double)

#undef SADKIT_INSTANTIATE_LOSSES

}  // namespace sadkit
