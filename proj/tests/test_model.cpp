#include "gradcheck.hpp"
#include "sadkit/losses.hpp"
#include "sadkit/model.hpp"

#include <doctest.h>

#include <map>
#include <random>

using namespace sadkit;
using sadkit::testing::gradcheck;
using sadkit::testing::random_tensor;
using sadkit::testing::TensorD;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.input_h = 16;
  c.input_w = 32;
  c.encoder_widths = {3, 4, 4, 4};
  c.decoder_widths = {3, 3};
  c.exist_channels = 3;
  c.exist_hidden = 4;
  return c;
}

std::map<std::string, Shape> state_shapes(LaneModel<float>& m) {
  std::map<std::string, Shape> out;
  m.visit_state([&](const std::string& name, const Shape& s, ArrayX<float>&) { out[name] = s; });
  return out;
}

std::vector<std::uint8_t> random_labels(std::mt19937_64& rng, Index count) {
  std::uniform_int_distribution<int> pick(0, 4);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(count));
  for (auto& l : out) l = static_cast<std::uint8_t>(pick(rng));
  return out;
}

}  // namespace

TEST_CASE("paper-scale existence branch shapes") {
  ModelConfig c;
  c.input_h = 288;
  c.input_w = 800;
  c.exist_channels = 32;
  c.exist_hidden = 128;
  CHECK(c.exist_flatten_size() == 4500);
  auto m = LaneModel<float>::build(c, 1);
  auto shapes = state_shapes(m);
  CHECK(shapes["p1.reduce.weight"] == Shape{5, 32, 1, 1});
  CHECK(shapes["p1.fc1.weight"] == Shape{128, 4500});
  CHECK(shapes["p1.fc2.weight"] == Shape{4, 128});

  NoGrad<float> ng;
  auto out = m.forward(Tensor<float>::zeros({3, 288, 800}), false);
  CHECK(out.seg_scores.shape() == Shape{5, 288, 800});
  CHECK(out.exist_probs.shape() == Shape{4});
  CHECK(out.activations[3].shape() == Shape{32, 36, 100});
}

TEST_CASE("desk-scale dry run") {
  ModelConfig c;
  c.deep_supervision_blocks = {2, 3, 4};
  CHECK(c.exist_flatten_size() == 5 * (128 / 16) * (256 / 16));
  auto m = LaneModel<float>::build(c, 7);
  NoGrad<float> ng;
  std::mt19937_64 rng(1);
  ArrayX<float> v = ArrayX<float>::Random(2 * 3 * 128 * 256);
  auto out = m.forward(Tensor<float>({2, 3, 128, 256}, v), true);
  CHECK(out.seg_scores.shape() == Shape{2, 5, 128, 256});
  CHECK(out.exist_probs.shape() == Shape{2, 4});
  CHECK(out.activations[0].shape() == Shape{2, 8, 64, 128});
  CHECK(out.activations[1].shape() == Shape{2, 16, 32, 64});
  CHECK(out.activations[2].shape() == Shape{2, 32, 16, 32});
  CHECK(out.activations[3].shape() == Shape{2, 32, 16, 32});
  REQUIRE(out.deep_heads.size() == 3);
  for (const auto& h : out.deep_heads) CHECK(h.shape() == Shape{2, 5, 128, 256});
  CHECK(out.exist_probs.value().minCoeff() > 0.0f);
  CHECK(out.exist_probs.value().maxCoeff() < 1.0f);

  CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({3, 64, 256}), false), ShapeError);
  CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 128, 256}), false), ShapeError);
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.input_h = 100;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.deep_supervision_blocks = {1};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.deep_supervision_blocks = {2, 2};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.encoder_widths[2] = 0;
  CHECK_THROWS_AS(LaneModel<float>::build(c, 1), std::invalid_argument);
}

TEST_CASE("same seed builds identical parameters") {
  auto a = LaneModel<float>::build(ModelConfig{}, 42);
  auto b = LaneModel<float>::build(ModelConfig{}, 42);
  auto c = LaneModel<float>::build(ModelConfig{}, 43);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK((pa[i].value() == pb[i].value()).all());
    if (pa[i].size() > 1 && !(pa[i].value() == pc[i].value()).all()) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("gradient reaches every parameter") {
  ModelConfig c = tiny_config();
  c.deep_supervision_blocks = {2, 3, 4};
  auto m = LaneModel<double>::build(c, 3);
  std::mt19937_64 rng(5);
  TensorD x = random_tensor(rng, {2, 3, 16, 32}, 0, 1, false);
  auto labels = random_labels(rng, 2 * 16 * 32);
  std::vector<std::uint8_t> bits{1, 0, 1, 1, 0, 1, 1, 0};
  for (auto& p : m.parameters()) p.zero_grad();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto out = m.forward(x, true);
  LossInputs<double> in{out.seg_scores, labels, out.exist_probs, bits, out.activations};
  TensorD loss = total_loss(in, LossWeights{}, DistillSettings{{{2, 3}, {3, 4}}, true}).total;
  for (const auto& h : out.deep_heads) loss = add(loss, seg_ce_loss(h, labels, 1.0));
  tape.backward(loss);
  int dead = 0;
  for (const auto& p : m.parameters()) dead += p.grad().abs().maxCoeff() == 0.0;
  CHECK(dead == 0);
  CHECK(m.head_parameters().size() == 6);
}

TEST_CASE("existence fence") {
  auto m = LaneModel<double>::build(tiny_config(), 9);
  auto fenced = block_gradient_fence(m);
  CHECK(fenced.existence_fence());
  CHECK_FALSE(m.existence_fence());
  std::mt19937_64 rng(2);
  TensorD x = random_tensor(rng, {2, 3, 16, 32}, 0, 1, false);
  std::vector<std::uint8_t> bits{1, 1, 0, 0, 0, 1, 0, 1};

  auto encoder_grad = [&](LaneModel<double>& model) {
    for (auto& p : model.parameters()) p.zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto out = model.forward(x, false);
    tape.backward(exist_loss(out.exist_probs, bits));
    double g = 0;
    // The first 24 tensors belong to E1..E4.
    auto params = model.parameters();
    for (std::size_t i = 0; i < 24; ++i) g = std::max(g, params[i].grad().abs().maxCoeff());
    return std::make_pair(g, out.exist_probs.value());
  };
  auto [open_g, open_v] = encoder_grad(m);
  auto [fenced_g, fenced_v] = encoder_grad(fenced);
  CHECK(open_g > 0.0);
  CHECK(fenced_g == 0.0);
  CHECK((open_v == fenced_v).all());

  ModelConfig no_branch = tiny_config();
  no_branch.existence_branch = false;
  CHECK_THROWS_AS(block_gradient_fence(LaneModel<double>::build(no_branch, 1)), std::invalid_argument);
}

TEST_CASE("whole-model gradient check") {
  auto m = LaneModel<double>::build(tiny_config(), 11);
  std::mt19937_64 rng(13);
  TensorD x = random_tensor(rng, {3, 16, 32}, 0, 1, true);
  auto labels = random_labels(rng, 16 * 32);
  std::vector<std::uint8_t> bits{1, 0, 0, 1};
  auto loss_fn = [&] {
    auto out = m.forward(x, true);
    LossInputs<double> in{out.seg_scores, labels, out.exist_probs, bits, out.activations};
    return total_loss(in, LossWeights{}, DistillSettings{{{1, 2}, {2, 3}, {3, 4}}, true, false}).total;
  };
  std::vector<TensorD> inputs = m.parameters();
  inputs.push_back(x);
  auto res = gradcheck(inputs, loss_fn, 1e-5, 6, 17);
  CHECK(res.coordinates > 100);
  CHECK(res.max_rel_error < 1e-4);
}
