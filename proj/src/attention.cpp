#include "sadkit/attention.hpp"

#include "sadkit/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace sadkit {

namespace {

struct ActDims {
  Index n, c, area;
  Shape map_shape;
};

template <typename Scalar>
ActDims activation_dims(const Tensor<Scalar>& a, const char* op) {
  if (a.rank() == 3) return {1, a.dim(0), a.dim(1) * a.dim(2), {a.dim(1), a.dim(2)}};
  if (a.rank() == 4) return {a.dim(0), a.dim(1), a.dim(2) * a.dim(3), {a.dim(0), a.dim(2), a.dim(3)}};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + to_string(a.shape()));
}

// Shared by g_sum and g_sum_p; p == 1 uses sign(a) as the derivative of |a|.
template <typename Scalar>
Tensor<Scalar> abs_power_sum(const Tensor<Scalar>& a, double p, const char* op) {
  const ActDims d = activation_dims(a, op);
  const Scalar ps = static_cast<Scalar>(p);
  ArrayX<Scalar> out = ArrayX<Scalar>::Zero(d.n * d.area);
  for (Index n = 0; n < d.n; ++n) {
    auto o = out.segment(n * d.area, d.area);
    for (Index c = 0; c < d.c; ++c) {
      auto x = a.value().segment((n * d.c + c) * d.area, d.area);
      if (p == 1.0) {
        o += x.abs();
      } else if (p == 2.0) {
        o += x.square();
      } else {
        o += x.abs().pow(ps);
      }
    }
  }
  return make_op_result<Scalar>(d.map_shape, std::move(out), {a}, [a, d, p, ps](const ArrayX<Scalar>& g) {
    ArrayX<Scalar> gi(a.size());
    for (Index n = 0; n < d.n; ++n) {
      auto gs = g.segment(n * d.area, d.area);
      for (Index c = 0; c < d.c; ++c) {
        const Index o = (n * d.c + c) * d.area;
        auto x = a.value().segment(o, d.area);
        if (p == 1.0) {
          gi.segment(o, d.area) = gs * x.sign();
        } else if (p == 2.0) {
          gi.segment(o, d.area) = Scalar(2) * gs * x;
        } else {
          gi.segment(o, d.area) = gs * ps * x.sign() * x.abs().pow(ps - Scalar(1));
        }
      }
    }
    a.accumulate_grad(gi);
  });
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> g_sum(const Tensor<Scalar>& activation) {
  return abs_power_sum(activation, 1.0, "g_sum");
}

template <typename Scalar>
Tensor<Scalar> g_sum_p(const Tensor<Scalar>& activation, double p) {
  if (!(p > 1.0)) throw std::invalid_argument("g_sum_p: p must exceed 1 (use g_sum for p = 1)");
  return abs_power_sum(activation, p, "g_sum_p");
}

template <typename Scalar>
Tensor<Scalar> g_max_p(const Tensor<Scalar>& activation, double p) {
  if (!(p >= 1.0)) throw std::invalid_argument("g_max_p: p must be at least 1");
  const ActDims d = activation_dims(activation, "g_max_p");
  const Scalar ps = static_cast<Scalar>(p);
  ArrayX<Scalar> out(d.n * d.area);
  std::vector<Index> arg(static_cast<std::size_t>(d.n * d.area));
  const Scalar* v = activation.data();
  for (Index n = 0; n < d.n; ++n) {
    for (Index i = 0; i < d.area; ++i) {
      Index best = n * d.c * d.area + i;
      for (Index c = 1; c < d.c; ++c) {
        const Index k = (n * d.c + c) * d.area + i;
        if (std::abs(v[k]) > std::abs(v[best])) best = k;
      }
      out[n * d.area + i] = std::pow(std::abs(v[best]), ps);
      arg[static_cast<std::size_t>(n * d.area + i)] = best;
    }
  }
  return make_op_result<Scalar>(d.map_shape, std::move(out), {activation},
                                [activation, arg = std::move(arg), ps](const ArrayX<Scalar>& g) {
                                  ArrayX<Scalar> gi = ArrayX<Scalar>::Zero(activation.size());
                                  for (std::size_t o = 0; o < arg.size(); ++o) {
                                    const Scalar x = activation.value()[arg[o]];
                                    const Scalar sgn = x > 0 ? Scalar(1) : (x < 0 ? Scalar(-1) : Scalar(0));
                                    gi[arg[o]] += g[static_cast<Index>(o)] * ps * sgn * std::pow(std::abs(x), ps - Scalar(1));
                                  }
                                  activation.accumulate_grad(gi);
                                });
}

template <typename Scalar>
Tensor<Scalar> atgen(const Tensor<Scalar>& activation, Index target_h, Index target_w) {
  if (target_h < 1 || target_w < 1) throw ShapeError("atgen: target extents must be positive");
  Tensor<Scalar> map = g_sum_p(activation, 2.0);
  if (map.dim(-2) != target_h || map.dim(-1) != target_w) {
    map = bilinear_upsample(map, target_h, target_w);
  }
  return spatial_softmax(map);
}

MappingFunction parse_mapping_function(const std::string& name) {
  if (name == "sum") return MappingFunction::kSum;
  if (name == "sum_p") return MappingFunction::kSumP;
  if (name == "max_p") return MappingFunction::kMaxP;
  throw std::invalid_argument("unknown mapping function '" + name + "' (expected sum, sum_p or max_p)");
}

template <typename Scalar>
Tensor<Scalar> attention_map(const Tensor<Scalar>& activation, MappingFunction fn, double p) {
  switch (fn) {
    case MappingFunction::kSum:
      return g_sum(activation);
    case MappingFunction::kSumP:
      return g_sum_p(activation, p);
    case MappingFunction::kMaxP:
      return g_max_p(activation, p);
  }
  throw std::logic_error("attention_map: unhandled mapping function");
}

#define SADKIT_INSTANTIATE_ATTENTION(S)                                     \
  template Tensor<S> g_sum(const Tensor<S>&);                               \
  template Tensor<S> g_sum_p(const Tensor<S>&, double);                     \
  template Tensor<S> g_max_p(const Tensor<S>&, double);                     \
  template Tensor<S> atgen(const Tensor<S>&, Index, Index);                 \
  template Tensor<S> attention_map(const Tensor<S>&, MappingFunction, double);

SADKIT_INSTANTIATE_ATTENTION(float)
SADKIT_INSTANTIATE_ATTENTION(double)

#undef SADKIT_INSTANTIATE_ATTENTION

}  // namespace sadkit
