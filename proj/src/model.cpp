#include "sadkit/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace sadkit {

void ModelConfig::validate() const {
  if (input_channels < 1) throw std::invalid_argument("model: input_channels must be positive");
  if (input_h < 16 || input_w < 16 || input_h % 16 != 0 || input_w % 16 != 0) {
    throw std::invalid_argument("model: input size must be a positive multiple of 16, got " +
                                std::to_string(input_h) + "x" + std::to_string(input_w));
  }
  if (num_classes < 2) throw std::invalid_argument("model: num_classes must be at least 2");
  if (lane_slots < 1) throw std::invalid_argument("model: lane_slots must be positive");
  for (Index w : encoder_widths) {
    if (w < 1) throw std::invalid_argument("model: encoder widths must be positive");
  }
  for (Index w : decoder_widths) {
    if (w < 1) throw std::invalid_argument("model: decoder widths must be positive");
  }
  if (existence_branch && (exist_channels < 1 || exist_hidden < 1)) {
    throw std::invalid_argument("model: existence branch widths must be positive");
  }
  for (std::size_t i = 0; i < deep_supervision_blocks.size(); ++i) {
    const int b = deep_supervision_blocks[i];
    if (b < 2 || b > 4) {
      throw std::invalid_argument("model: deep supervision blocks must lie in {2,3,4}, got " + std::to_string(b));
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (deep_supervision_blocks[j] == b) throw std::invalid_argument("model: duplicate deep supervision block");
    }
  }
}

Index ModelConfig::exist_flatten_size() const {
  return static_cast<Index>(num_classes) * (input_h / 16) * (input_w / 16);
}

namespace {

template <typename Scalar>
Tensor<Scalar> uniform_fan_in(std::mt19937_64& rng, Shape shape, Index fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  ArrayX<Scalar> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(u(rng));
  return Tensor<Scalar>(std::move(shape), std::move(v), true);
}

template <typename Scalar>
ConvLayer<Scalar> make_conv(std::mt19937_64& rng, Index in, Index out, Index k, Conv2dOptions opt) {
  return {uniform_fan_in<Scalar>(rng, {out, in, k, k}, in * k * k), Tensor<Scalar>::zeros({out}, true), opt};
}

template <typename Scalar>
NormLayer<Scalar> make_norm(Index channels) {
  return {Tensor<Scalar>::constant({channels}, Scalar(1), true), Tensor<Scalar>::zeros({channels}, true),
          std::make_shared<NormStats<Scalar>>(NormStats<Scalar>::identity(channels))};
}

template <typename Scalar>
ConvUnit<Scalar> make_unit(std::mt19937_64& rng, Index in, Index out, Index k, Conv2dOptions opt) {
  // The norm's shift makes a conv bias redundant.
  ConvLayer<Scalar> conv{uniform_fan_in<Scalar>(rng, {out, in, k, k}, in * k * k), Tensor<Scalar>(), opt};
  return {std::move(conv), make_norm<Scalar>(out)};
}

template <typename Scalar>
LinearLayer<Scalar> make_linear(std::mt19937_64& rng, Index in, Index out) {
  return {uniform_fan_in<Scalar>(rng, {out, in}, in), Tensor<Scalar>::zeros({out}, true)};
}

template <typename Scalar>
Tensor<Scalar> drop_batch(const Tensor<Scalar>& t) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  return t.reshape(std::move(s));
}

}  // namespace

template <typename Scalar>
LaneModel<Scalar> LaneModel<Scalar>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  LaneModel m;
  m.config_ = config;
  std::mt19937_64 rng(seed);
  const auto& ew = config.encoder_widths;
  const Conv2dOptions down{.stride = 2, .padding = 0, .dilation = 1};
  const Conv2dOptions same{.stride = 1, .padding = 1, .dilation = 1};
  const Conv2dOptions dil2{.stride = 1, .padding = 2, .dilation = 2};
  const Conv2dOptions point{};
  Index in = config.input_channels;
  for (int b = 0; b < 3; ++b) {
    m.down_[b] = make_unit<Scalar>(rng, in, ew[b], 2, down);
    m.inner_[b] = make_unit<Scalar>(rng, ew[b], ew[b], 3, same);
    in = ew[b];
  }
  m.e4_[0] = make_unit<Scalar>(rng, ew[2], ew[3], 3, dil2);
  m.e4_[1] = make_unit<Scalar>(rng, ew[3], ew[3], 3, dil2);

  Index dec_in = config.enable_e3_e4_concat ? ew[2] + ew[3] : ew[3];
  for (int b = 0; b < 2; ++b) {
    const Index w = config.decoder_widths[b];
    m.dec_reduce_[b] = make_conv<Scalar>(rng, dec_in, w, 1, point);
    m.dec_body_[b] = make_unit<Scalar>(rng, w, w, 3, same);
    dec_in = w;
  }
  m.classifier_ = make_conv<Scalar>(rng, dec_in, config.num_classes, 1, point);

  if (config.existence_branch) {
    m.exist_conv_ = make_unit<Scalar>(rng, ew[3], config.exist_channels, 3,
                                      {.stride = 1, .padding = 4, .dilation = 4});
    m.exist_reduce_ = make_conv<Scalar>(rng, config.exist_channels, config.num_classes, 1, point);
    m.exist_fc1_ = make_linear<Scalar>(rng, config.exist_flatten_size(), config.exist_hidden);
    m.exist_fc2_ = make_linear<Scalar>(rng, config.exist_hidden, config.lane_slots);
  }
  for (int b : config.deep_supervision_blocks) {
    m.heads_.push_back(make_conv<Scalar>(rng, ew[static_cast<std::size_t>(b - 1)], config.num_classes, 1, point));
  }
  return m;
}

template <typename Scalar>
ForwardOutput<Scalar> LaneModel<Scalar>::forward(const Tensor<Scalar>& input, bool training) {
  Tensor<Scalar> x = input;
  if (x.rank() == 3) {
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    x = x.reshape(std::move(s));
  }
  if (x.rank() != 4 || x.dim(1) != config_.input_channels || x.dim(2) != config_.input_h ||
      x.dim(3) != config_.input_w) {
    throw ShapeError("model: expected input [" + std::to_string(config_.input_channels) + "," +
                     std::to_string(config_.input_h) + "," + std::to_string(config_.input_w) + "], got " +
                     to_string(input.shape()));
  }
  const Index h = config_.input_h, w = config_.input_w;
  ForwardOutput<Scalar> out;

  Tensor<Scalar> a = x;
  for (int b = 0; b < 3; ++b) {
    a = inner_[b](down_[b](a, training), training);
    out.activations[b] = a;
  }
  const Tensor<Scalar> e3 = a;
  Tensor<Scalar> e4 = e4_[1](e4_[0](e3, training), training);
  out.activations[3] = e4;

  Tensor<Scalar> enc = config_.enable_e3_e4_concat
                           ? concat_channels(e3, bilinear_upsample(e4, e3.dim(2), e3.dim(3)))
                           : e4;
  Tensor<Scalar> d = enc;
  for (int b = 0; b < 2; ++b) {
    const Index scale_div = b == 0 ? 4 : 2;
    // A 1x1 conv commutes with bilinear resampling, so reduce channels first.
    d = dec_body_[b](bilinear_upsample(dec_reduce_[b](d), h / scale_div, w / scale_div), training);
  }
  out.seg_scores = bilinear_upsample(classifier_(d), h, w);

  if (config_.existence_branch) {
    Tensor<Scalar> p = fence_existence_ ? e4.detach() : e4;
    p = channel_softmax(exist_reduce_(exist_conv_(p, training)));
    p = flatten(avg_pool2(p));
    out.exist_probs = sigmoid(exist_fc2_(relu(exist_fc1_(p))));
  }
  for (std::size_t k = 0; k < heads_.size(); ++k) {
    const int b = config_.deep_supervision_blocks[k];
    out.deep_heads.push_back(bilinear_upsample(heads_[k](out.activations[static_cast<std::size_t>(b - 1)]), h, w));
  }

  if (input.rank() == 3) {
    out.seg_scores = drop_batch(out.seg_scores);
    if (out.exist_probs.defined()) out.exist_probs = drop_batch(out.exist_probs);
    for (auto& t : out.activations) t = drop_batch(t);
    for (auto& t : out.deep_heads) t = drop_batch(t);
  }
  return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> LaneModel<Scalar>::parameters() const {
  std::vector<Tensor<Scalar>> p;
  auto unit = [&p](const ConvUnit<Scalar>& u) {
    p.insert(p.end(), {u.conv.weight, u.norm.scale, u.norm.shift});
  };
  auto conv = [&p](const ConvLayer<Scalar>& c) { p.insert(p.end(), {c.weight, c.bias}); };
  for (int b = 0; b < 3; ++b) {
    unit(down_[b]);
    unit(inner_[b]);
  }
  for (const auto& u : e4_) unit(u);
  for (int b = 0; b < 2; ++b) {
    conv(dec_reduce_[b]);
    unit(dec_body_[b]);
  }
  conv(classifier_);
  if (config_.existence_branch) {
    unit(exist_conv_);
    conv(exist_reduce_);
    p.insert(p.end(), {exist_fc1_.weight, exist_fc1_.bias, exist_fc2_.weight, exist_fc2_.bias});
  }
  for (const auto& hd : heads_) conv(hd);
  return p;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> LaneModel<Scalar>::head_parameters() const {
  std::vector<Tensor<Scalar>> p;
  for (const auto& hd : heads_) p.insert(p.end(), {hd.weight, hd.bias});
  return p;
}

template <typename Scalar>
void LaneModel<Scalar>::visit_state(
    const std::function<void(const std::string&, const Shape&, ArrayX<Scalar>&)>& fn) {
  auto tensor = [&fn](const std::string& name, Tensor<Scalar>& t) { fn(name, t.shape(), t.value_mut()); };
  auto conv = [&](const std::string& name, ConvLayer<Scalar>& c) {
    tensor(name + ".weight", c.weight);
    tensor(name + ".bias", c.bias);
  };
  auto unit = [&](const std::string& name, ConvUnit<Scalar>& u) {
    tensor(name + ".conv.weight", u.conv.weight);
    tensor(name + ".norm.scale", u.norm.scale);
    tensor(name + ".norm.shift", u.norm.shift);
  };
  auto stats = [&fn](const std::string& name, ConvUnit<Scalar>& u) {
    const Shape s{u.norm.stats->running_mean.size()};
    fn(name + ".norm.running_mean", s, u.norm.stats->running_mean);
    fn(name + ".norm.running_var", s, u.norm.stats->running_var);
  };
  const auto for_units = [&](auto&& visit) {
    for (int b = 0; b < 3; ++b) {
      visit("e" + std::to_string(b + 1) + ".down", down_[b]);
      visit("e" + std::to_string(b + 1) + ".inner", inner_[b]);
    }
    visit("e4.0", e4_[0]);
    visit("e4.1", e4_[1]);
    for (int b = 0; b < 2; ++b) visit("d" + std::to_string(b + 1) + ".body", dec_body_[b]);
    if (config_.existence_branch) visit("p1.conv", exist_conv_);
  };
  for_units(unit);
  for (int b = 0; b < 2; ++b) conv("d" + std::to_string(b + 1) + ".reduce", dec_reduce_[b]);
  conv("classifier", classifier_);
  if (config_.existence_branch) {
    conv("p1.reduce", exist_reduce_);
    tensor("p1.fc1.weight", exist_fc1_.weight);
    tensor("p1.fc1.bias", exist_fc1_.bias);
    tensor("p1.fc2.weight", exist_fc2_.weight);
    tensor("p1.fc2.bias", exist_fc2_.bias);
  }
  for (std::size_t k = 0; k < heads_.size(); ++k) {
    conv("head" + std::to_string(config_.deep_supervision_blocks[k]), heads_[k]);
  }
  for_units(stats);
}

template <typename Scalar>
LaneModel<Scalar> block_gradient_fence(LaneModel<Scalar> model, FenceBranch branch) {
  if (branch == FenceBranch::kExistence && !model.config().existence_branch) {
    throw std::invalid_argument("block_gradient_fence: model has no existence branch");
  }
  model.set_existence_fence(true);
  return model;
}

template class LaneModel<float>;
template class LaneModel<double>;
template LaneModel<float> block_gradient_fence(LaneModel<float>, FenceBranch);
template LaneModel<double> block_gradient_fence(LaneModel<double>, FenceBranch);

}  // namespace sadkit
