#include "gradcheck.hpp"
#include "sadkit/attention.hpp"
#include "sadkit/losses.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace sadkit;
using sadkit::testing::gradcheck;
using sadkit::testing::random_tensor;
using sadkit::testing::TensorD;

namespace {

std::vector<std::uint8_t> random_labels(std::mt19937_64& rng, Index count, int classes) {
  std::uniform_int_distribution<int> pick(0, classes - 1);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(count));
  for (auto& l : out) l = static_cast<std::uint8_t>(pick(rng));
  return out;
}

// Logits whose softmax is exactly one-hot in double: lane pixels put all mass
// on class 1, the rest on background.
TensorD hard_scores(const std::vector<bool>& lane, Index h, Index w) {
  ArrayX<double> v = ArrayX<double>::Zero(2 * h * w);
  for (Index i = 0; i < h * w; ++i) v[(lane[static_cast<std::size_t>(i)] ? 1 : 0) * h * w + i] = 2000.0;
  return TensorD({2, h, w}, v);
}

// Unweighted cross-entropy computed pixel by pixel.
double plain_ce(const TensorD& scores, const std::vector<std::uint8_t>& labels) {
  const Index c = scores.dim(0), area = scores.dim(1) * scores.dim(2);
  double total = 0;
  for (Index i = 0; i < area; ++i) {
    double z = 0;
    for (Index k = 0; k < c; ++k) z += std::exp(scores.value()[k * area + i]);
    total -= std::log(std::exp(scores.value()[labels[static_cast<std::size_t>(i)] * area + i]) / z);
  }
  return total / static_cast<double>(area);
}

}  // namespace

TEST_CASE("seg_ce_loss examples") {
  std::vector<std::uint8_t> bg(12, 0);
  TensorD uniform = TensorD::zeros({5, 3, 4});
  CHECK(seg_ce_loss(uniform, bg, 0.4).item() == doctest::Approx(0.4 * std::log(5.0)).epsilon(1e-14));

  std::mt19937_64 rng(4);
  TensorD s = random_tensor(rng, {5, 3, 4}, -2, 2);
  auto labels = random_labels(rng, 12, 5);
  CHECK(seg_ce_loss(s, labels, 1.0).item() == doctest::Approx(plain_ce(s, labels)).epsilon(1e-13));

  double prev = 1e9;
  for (double peak : {1.0, 5.0, 20.0, 60.0}) {
    ArrayX<double> v = ArrayX<double>::Zero(5 * 12);
    for (Index i = 0; i < 12; ++i) v[labels[static_cast<std::size_t>(i)] * 12 + i] = peak;
    const double l = seg_ce_loss(TensorD({5, 3, 4}, v), labels, 0.4).item();
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-20);

  std::vector<std::uint8_t> bad(12, 0);
  bad[3] = 5;
  CHECK_THROWS_AS(seg_ce_loss(uniform, bad, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(seg_ce_loss(uniform, std::vector<std::uint8_t>(11, 0), 0.4), ShapeError);
}

TEST_CASE("iou_loss examples") {
  CHECK(iou_loss_from_counts(10, 10, 5) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(iou_loss_from_counts(0, 0, 0) == 0.0);

  const Index h = 4, w = 5;
  std::vector<bool> lane(20, false);
  std::vector<std::uint8_t> labels(20, 0);
  for (Index i = 0; i < 6; ++i) {
    lane[static_cast<std::size_t>(i)] = true;
    labels[static_cast<std::size_t>(i)] = 1;
  }
  CHECK(iou_loss(hard_scores(lane, h, w), labels).item() == 0.0);
  CHECK(iou_loss(hard_scores(lane, h, w), labels, IouForm::kOverlap).item() == 0.0);

  // Disjoint supports under the overlap numerator.
  std::vector<bool> other(20, false);
  for (Index i = 10; i < 16; ++i) other[static_cast<std::size_t>(i)] = true;
  CHECK(iou_loss(hard_scores(other, h, w), labels, IouForm::kOverlap).item() == 1.0);

  // No lane mass anywhere.
  std::vector<std::uint8_t> none(20, 0);
  CHECK(iou_loss(hard_scores(std::vector<bool>(20, false), h, w), none).item() == 0.0);

  CHECK(parse_iou_form("published") == IouForm::kPublished);
  CHECK(parse_iou_form("overlap") == IouForm::kOverlap);
  CHECK_THROWS(parse_iou_form("dice"));
}

TEST_CASE("iou_loss on hard predictions matches the count formula") {
  std::mt19937_64 rng(21);
  const Index h = 6, w = 7, area = h * w;
  std::uniform_int_distribution<int> coin(0, 2);
  for (int t = 0; t < 100; ++t) {
    std::vector<bool> lane(static_cast<std::size_t>(area));
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(area));
    int np = 0, ng = 0, no = 0;
    for (std::size_t i = 0; i < lane.size(); ++i) {
      lane[i] = coin(rng) == 0;
      labels[i] = coin(rng) == 0 ? 1 : 0;
      np += lane[i];
      ng += labels[i];
      no += lane[i] && labels[i];
    }
    const double expected = np + ng - no == 0 ? 0.0 : 1.0 - static_cast<double>(np) / (np + ng - no);
    CHECK(iou_loss(hard_scores(lane, h, w), labels).item() == expected);
  }
}

TEST_CASE("iou_loss range and zero condition under the overlap form") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    TensorD s = random_tensor(rng, {3, 4, 4}, -3, 3);
    auto labels = random_labels(rng, 16, 3);
    const double a = iou_loss(s, labels, IouForm::kOverlap).item();
    const double b = iou_loss(s, labels, IouForm::kPublished).item();
    CHECK(a > 0.0);
    CHECK(a <= 1.0);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
  }
}

TEST_CASE("exist_loss examples") {
  std::vector<std::uint8_t> bits{1, 0, 1, 1};
  TensorD exact({4}, (ArrayX<double>(4) << 1, 0, 1, 1).finished());
  CHECK(exist_loss(exact, bits).item() <= 1e-6);
  CHECK(exist_loss(TensorD::constant({4}, 0.5), bits).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  std::vector<std::uint8_t> one{1};
  CHECK(exist_loss(TensorD::constant({1}, 0.75), one).item() == doctest::Approx(-std::log(0.75)).epsilon(1e-15));
  CHECK_THROWS_AS(exist_loss(exact, one), ShapeError);
}

TEST_CASE("distill_loss examples") {
  TensorD a1({1, 1, 2}, (ArrayX<double>(2) << 0.0, std::sqrt(std::log(3.0))).finished());
  TensorD a2 = TensorD::constant({1, 1, 2}, 1.0);
  std::vector<TensorD> acts{a1, a2};
  // ((0.25)^2 + (0.25)^2) / 2
  CHECK(distill_loss<double>(acts, {{1, 2}}).item() == doctest::Approx(0.0625).epsilon(1e-12));

  std::vector<TensorD> same{a1, a1};
  CHECK(distill_loss<double>(same, {{1, 2}}).item() == 0.0);
  CHECK(distill_loss<double>(acts, {}).item() == 0.0);

  CHECK_THROWS_AS(distill_loss<double>(acts, {{1, 2}, {1, 2}}), PathError);
  CHECK_THROWS_AS(distill_loss<double>(acts, {{1, 3}}), PathError);
  CHECK_THROWS_AS(distill_loss<double>(acts, {{2, 1}}), PathError);
  CHECK_NOTHROW(distill_loss<double>(acts, {{2, 1}}, true, true));

  PathSet adj = adjacent_paths(4);
  REQUIRE(adj.size() == 3);
  CHECK(adj[0] == DistillPath{1, 2});
  CHECK(adj[1] == DistillPath{2, 3});
  CHECK(adj[2] == DistillPath{3, 4});

  // Different sizes: the mimic map is brought to the target's size.
  std::mt19937_64 rng(9);
  std::vector<TensorD> pyramid{random_tensor(rng, {2, 8, 8}), random_tensor(rng, {3, 4, 4}),
                               random_tensor(rng, {4, 2, 2}), random_tensor(rng, {4, 2, 2})};
  const double total = distill_loss<double>(pyramid, adj).item();
  double manual = 0;
  for (const auto& p : adj) {
    const TensorD& t = pyramid[static_cast<std::size_t>(p.to - 1)];
    manual += mse(atgen(pyramid[static_cast<std::size_t>(p.from - 1)], t.dim(1), t.dim(2)), atgen(t, t.dim(1), t.dim(2)))
                  .item();
  }
  CHECK(total == doctest::Approx(manual).epsilon(1e-14));
  CHECK(total >= 0.0);
}

TEST_CASE("detached targets pass no gradient") {
  std::mt19937_64 rng(12);
  TensorD x = random_tensor(rng, {1, 6, 6}, -1, 1, false);
  TensorD w1 = random_tensor(rng, {2, 1, 3, 3});
  TensorD w2 = random_tensor(rng, {2, 2, 3, 3});
  TensorD b1 = TensorD::zeros({2}, true), b2 = TensorD::zeros({2}, true);
  const Conv2dOptions same{1, 1, 1};

  auto run = [&](bool detach) {
    for (auto* t : {&w1, &w2, &b1, &b2}) t->zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    TensorD a1 = relu(conv2d(x, w1, b1, same));
    TensorD a2 = relu(conv2d(a1, w2, b2, same));
    std::vector<TensorD> acts{a1, a2};
    tape.backward(distill_loss<double>(acts, {{1, 2}}, detach));
  };
  run(true);
  CHECK(w2.grad().abs().maxCoeff() == 0.0);
  CHECK(b2.grad().abs().maxCoeff() == 0.0);
  CHECK(w1.grad().abs().maxCoeff() > 0.0);
  run(false);
  CHECK(w2.grad().abs().maxCoeff() > 0.0);
}

namespace {

struct LossFixture {
  TensorD scores, exist_logits;
  std::vector<std::uint8_t> labels, bits;
  std::vector<TensorD> acts;

  explicit LossFixture(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    scores = random_tensor(rng, {2, 5, 4, 6}, -2, 2);
    exist_logits = random_tensor(rng, {2, 4}, -2, 2);
    labels = random_labels(rng, 2 * 24, 5);
    bits = random_labels(rng, 8, 2);
    acts = {random_tensor(rng, {2, 2, 8, 8}), random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 3, 2, 2}),
            random_tensor(rng, {2, 3, 2, 2})};
  }

  LossTerms<double> eval(const LossWeights& w, const DistillSettings& sad) const {
    LossInputs<double> in{scores, labels, sigmoid(exist_logits), bits, acts};
    return total_loss(in, w, sad);
  }
};

}  // namespace

TEST_CASE("total_loss is the weighted sum of its terms") {
  DistillSettings sad{{{2, 3}, {3, 4}}, true};
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    LossFixture f(seed);
    LossWeights w;
    w.alpha = 0.1 + 0.05 * static_cast<double>(seed % 3);
    LossTerms<double> t = f.eval(w, sad);
    const double seg = seg_ce_loss(f.scores, f.labels, w.background_ce_weight).item();
    const double iou = iou_loss(f.scores, f.labels, w.iou_form).item();
    const double ex = exist_loss(sigmoid(f.exist_logits), f.bits).item();
    const double dist = distill_loss<double>(f.acts, sad.paths).item();
    CHECK(std::abs(t.total.item() - (seg + w.alpha * iou + w.beta * ex + w.gamma * dist)) < 1e-9);
    CHECK(t.seg.item() == seg);
    CHECK(t.distill.item() == dist);
  }
}

TEST_CASE("total_loss distillation switches") {
  LossFixture f(3);
  LossWeights w;
  DistillSettings off{{{2, 3}, {3, 4}}, false};
  DistillSettings empty{{}, true};
  DistillSettings on{{{2, 3}, {3, 4}}, true};
  const double base = f.eval(w, off).total.item();
  CHECK(f.eval(w, empty).total.item() == base);
  CHECK(f.eval(w, on).total.item() != base);
  LossWeights w0 = w;
  w0.gamma = 0.0;
  CHECK(f.eval(w0, on).total.item() == base);

  LossInputs<double> no_exist{f.scores, f.labels, TensorD(), {}, f.acts};
  LossTerms<double> t = total_loss(no_exist, w, off);
  CHECK(t.exist.item() == 0.0);
  CHECK(t.total.item() == doctest::Approx(t.seg.item() + w.alpha * t.iou.item()).epsilon(1e-15));

  LossWeights neg;
  neg.beta = -1;
  CHECK_THROWS_AS(f.eval(neg, off), std::invalid_argument);
}

TEST_CASE("loss gradients") {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    LossFixture f(seed);
    for (IouForm form : {IouForm::kPublished, IouForm::kOverlap}) {
      LossWeights w;
      w.iou_form = form;
      // A detached target is a deliberate stop-gradient, so differences only
      // agree with the tape when the target stays attached.
      DistillSettings sad{{{1, 2}, {2, 4}, {3, 4}}, true, false};
      std::vector<TensorD> inputs{f.scores, f.exist_logits};
      for (const auto& a : f.acts) inputs.push_back(a);
      worst = std::max(worst, gradcheck(inputs, [&] { return f.eval(w, sad).total; }).max_rel_error);
    }
    worst = std::max(worst, gradcheck({f.scores}, [&] { return seg_ce_loss(f.scores, f.labels, 0.4); }).max_rel_error);
    worst = std::max(worst, gradcheck({f.scores}, [&] { return iou_loss(f.scores, f.labels); }).max_rel_error);
    worst = std::max(worst,
                     gradcheck({f.exist_logits}, [&] { return exist_loss(sigmoid(f.exist_logits), f.bits); }).max_rel_error);
  }
  CHECK(worst < 1e-4);
}
