#pragma once

// Test-only oracles for the autodiff core: central finite differences and a
// direct loop convolution.

#include "sadkit/ops.hpp"
#include "sadkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace sadkit::testing {

using TensorD = Tensor<double>;

inline TensorD random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  ArrayX<double> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = u(rng);
  return TensorD(std::move(shape), std::move(v), requires_grad);
}

/// Scalar projection sum(r * y) with a fixed random r, so any op output can be
/// checked through a scalar loss.
inline TensorD project(const TensorD& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TensorD r = random_tensor(rng, y.shape(), -1.0, 1.0, false);
  return sum(mul(y, r));
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  Index coordinates = 0;
};

/// Compares tape gradients against central differences (step eps) for every
/// coordinate of every input, or for `max_coords` sampled coordinates per
/// input when positive. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult gradcheck(std::vector<TensorD> inputs, const std::function<TensorD()>& loss_fn,
                                 double eps = 1e-5, int max_coords = 0, std::uint64_t seed = 1,
                                 double floor = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    TensorD loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<ArrayX<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());

  GradCheckResult res;
  std::mt19937_64 rng(seed);
  NoGrad<double> no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    TensorD& t = inputs[k];
    std::vector<Index> coords;
    if (max_coords <= 0 || t.size() <= max_coords) {
      for (Index i = 0; i < t.size(); ++i) coords.push_back(i);
    } else {
      std::uniform_int_distribution<Index> pick(0, t.size() - 1);
      for (int i = 0; i < max_coords; ++i) coords.push_back(pick(rng));
    }
    for (Index i : coords) {
      const double orig = t.value()[i];
      t.value_mut()[i] = orig + eps;
      const double up = loss_fn().item();
      t.value_mut()[i] = orig - eps;
      const double down = loss_fn().item();
      t.value_mut()[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
      ++res.coordinates;
    }
  }
  return res;
}

/// Direct six-deep loop convolution; accumulates bias then taps in
/// (c_in, ky, kx) order.
inline ArrayX<double> naive_conv2d(const ArrayX<double>& in, Index ci_n, Index h, Index w, const ArrayX<double>& ker,
                                   Index co_n, Index kh, Index kw, const ArrayX<double>& bias, int stride, int pad,
                                   int dil, Index& ho, Index& wo) {
  ho = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
  wo = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
  ArrayX<double> out(co_n * ho * wo);
  for (Index co = 0; co < co_n; ++co) {
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) {
        double acc = bias[co];
        for (Index ci = 0; ci < ci_n; ++ci) {
          for (Index ky = 0; ky < kh; ++ky) {
            for (Index kx = 0; kx < kw; ++kx) {
              const Index iy = oy * stride - pad + ky * dil;
              const Index ix = ox * stride - pad + kx * dil;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += ker[((co * ci_n + ci) * kh + ky) * kw + kx] * in[(ci * h + iy) * w + ix];
            }
          }
        }
        out[(co * ho + oy) * wo + ox] = acc;
      }
    }
  }
  return out;
}

}  // namespace sadkit::testing
