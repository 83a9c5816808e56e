#include "sadkit/metrics.hpp"
#include "sadkit/postprocess.hpp"

#include <doctest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace sadkit;

namespace {

LanePoints vertical(double col, double top, double bottom) {
  LanePoints l;
  for (double r = bottom; r >= top; r -= 1) l.push_back({r, col});
  return l;
}

// Pixels whose centre lies within half the width of a vertical segment.
std::vector<std::uint8_t> vertical_band(double col, double top, double bottom, double width, Index h, Index w) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(h * w), 0);
  const double half = width / 2;
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      const double y = static_cast<double>(r), x = static_cast<double>(c);
      const double dy = y < top ? top - y : (y > bottom ? y - bottom : 0.0);
      m[static_cast<std::size_t>(r * w + c)] = dy * dy + (x - col) * (x - col) < half * half;
    }
  }
  return m;
}

}  // namespace

TEST_CASE("smooth: an impulse spreads to a 9x9 block of 1/81") {
  Map2D m = Map2D::Zero(20, 20);
  m(10, 10) = 1;
  Map2D s = smooth(m);
  for (Index r = 0; r < 20; ++r) {
    for (Index c = 0; c < 20; ++c) {
      const bool inside = std::abs(r - 10) <= 4 && std::abs(c - 10) <= 4;
      CHECK(s(r, c) == doctest::Approx(inside ? 1.0 / 81 : 0.0).epsilon(1e-12));
    }
  }
  Map2D ones = Map2D::Ones(12, 12);
  CHECK(smooth(ones)(0, 0) == doctest::Approx(25.0 / 81));
}

TEST_CASE("extract_points: sampled rows and argmax") {
  Map2D p = Map2D::Zero(100, 50);
  for (Index r = 0; r < 100; ++r) p(r, 7 + r / 10) = 0.9;
  auto pts = extract_points(p, 0.8);
  REQUIRE(pts);
  std::vector<double> rows;
  for (const auto& q : *pts) {
    rows.push_back(q.row);
    CHECK(q.col == 7 + static_cast<int>(q.row) / 10);
  }
  CHECK(rows == std::vector<double>{99, 79, 59, 39, 19});
  CHECK_FALSE(extract_points(p, 0.5));
  p.row(79).setConstant(0.1);
  CHECK(extract_points(p, 0.8)->size() == 4);

  Map2D tie = Map2D::Zero(1, 6);
  tie(0, 2) = tie(0, 4) = 0.7;
  CHECK(extract_points(tie, 1.0, 20)->front().col == 2);
}

TEST_CASE("spline: matches a dense tridiagonal solve") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-30, 30);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 3 + trial % 6;
    LanePoints knots;
    for (int i = 0; i < n; ++i) knots.push_back({10.0 * i + (trial % 3), 100 + u(rng)});
    NaturalSpline s = NaturalSpline::fit(knots);

    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
    a(0, 0) = a(n - 1, n - 1) = 1;
    for (int i = 1; i < n - 1; ++i) {
      const double h0 = knots[i].row - knots[i - 1].row, h1 = knots[i + 1].row - knots[i].row;
      a(i, i - 1) = h0;
      a(i, i) = 2 * (h0 + h1);
      a(i, i + 1) = h1;
      rhs(i) = 6 * ((knots[i + 1].col - knots[i].col) / h1 - (knots[i].col - knots[i - 1].col) / h0);
    }
    const Eigen::VectorXd m = a.fullPivLu().solve(rhs);
    CHECK((s.second_derivatives() - m).cwiseAbs().maxCoeff() < 1e-9);
    for (const auto& k : knots) CHECK(s(k.row) == doctest::Approx(k.col).epsilon(1e-12));
  }
}

TEST_CASE("spline: collinear knots and two points give a line") {
  LanePoints knots{{90, 10}, {70, 20}, {50, 30}, {30, 40}};
  NaturalSpline s = NaturalSpline::fit(knots);
  for (double r = 0; r <= 120; r += 3.5) CHECK(s(r) == doctest::Approx(55 - 0.5 * r).epsilon(1e-12));
  LanePolyline two = fit_spline({{40, 5}, {20, 15}});
  const LanePoints d = two.sample(5);
  CHECK(d.size() == 5);
  for (const auto& p : d) CHECK(p.col == doctest::Approx(25 - 0.5 * p.row));
  LanePolyline one = fit_spline({{12, 3}});
  CHECK_FALSE(one.spline);
  CHECK(one.sample().size() == 1);
  CHECK_THROWS_AS(NaturalSpline::fit({{1, 1}, {1, 2}}), std::invalid_argument);
}

TEST_CASE("decode_lanes and lanes_from_labels") {
  const Index h = 60, w = 40, cls = 5;
  std::vector<float> probs(static_cast<std::size_t>(cls * h * w), 0.0f);
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) probs[static_cast<std::size_t>(r * w + c)] = 1.0f;
    probs[static_cast<std::size_t>(r * w + 12)] = 0.0f;
    probs[static_cast<std::size_t>(2 * h * w + r * w + 12)] = 1.0f;
  }
  const float exist[4] = {0.1f, 0.9f, 0.2f, 0.3f};
  PostprocessConfig cfg;
  cfg.row_stride = 10;
  cfg.smooth = false;
  auto lanes = decode_lanes(probs.data(), cls, h, w, exist, cfg);
  REQUIRE(lanes.size() == 1);
  for (const auto& p : lanes[0].sample(1)) CHECK(p.col == doctest::Approx(12));

  std::vector<std::uint8_t> labels(static_cast<std::size_t>(h * w), 0);
  for (Index r = 20; r < h; ++r) {
    for (Index c = 4; c < 7; ++c) labels[static_cast<std::size_t>(r * w + c)] = 3;
  }
  auto gt = lanes_from_labels(labels, h, w, 5, 1);
  REQUIRE(gt.size() == 1);
  CHECK(gt[0].size() == 40);
  CHECK(gt[0].front().row == 59);
  CHECK(gt[0].front().col == 5);

  const auto back = polylines_from_json(polylines_to_json(gt));
  CHECK(back == gt);
}

TEST_CASE("culane IoU of vertical lines against pixel counts") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> col(20, 80);
  std::uniform_real_distribution<double> shift(-20, 20);
  const Index h = 60, w = 100;
  const double width = 9;
  for (int trial = 0; trial < 50; ++trial) {
    // Half-integer centres keep every pixel strictly off the band edge.
    const double a = std::floor(col(rng)) + 0.5;
    const double b = std::clamp(std::floor(a + shift(rng)) + 0.5, 5.5, 94.5);
    const auto ma = rasterize_lane(vertical(a, 5, 54), h, w, width);
    const auto mb = rasterize_lane(vertical(b, 5, 54), h, w, width);
    const auto oa = vertical_band(a, 5, 54, width, h, w);
    const auto ob = vertical_band(b, 5, 54, width, h, w);
    CHECK(ma == oa);
    CHECK(mb == ob);
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < oa.size(); ++i) {
      inter += oa[i] && ob[i];
      uni += oa[i] || ob[i];
    }
    CHECK(mask_iou(ma, mb) == doctest::Approx(static_cast<double>(inter) / static_cast<double>(uni)));
    // Each straight row holds 8 columns; shifted bands share 8 - |a - b| of them.
    const long shared = std::max(0L, 8 - static_cast<long>(std::abs(a - b)));
    long row_inter = 0;
    for (Index c = 0; c < w; ++c) row_inter += oa[static_cast<std::size_t>(30 * w + c)] && ob[static_cast<std::size_t>(30 * w + c)];
    CHECK(row_inter == shared);
  }
}

TEST_CASE("culane f1: counts and greedy matching") {
  const Index h = 40, w = 60;
  std::vector<LanePoints> gt{vertical(10.5, 0, 39), vertical(40.5, 0, 39)};
  std::vector<LanePoints> pred{vertical(11.5, 0, 39), vertical(25.5, 0, 39), vertical(12.5, 0, 39)};
  F1Result r = culane_f1(pred, gt, h, w, 10, 0.5);
  CHECK(r.tp == 1);
  CHECK(r.fp == 2);
  CHECK(r.fn == 1);
  CHECK(r.precision == doctest::Approx(1.0 / 3));
  CHECK(r.recall == doctest::Approx(0.5));
  CHECK(r.f1 == doctest::Approx(0.4));

  CHECK(f1_from_counts(0, 0, 0).f1 == 1.0);
  CHECK(f1_from_counts(0, 3, 2).f1 == 0.0);
  CHECK(culane_f1({}, gt, h, w, 10, 0.5).recall == 0.0);
}

TEST_CASE("mask IoU: one third") {
  std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 1, 1, 0};
  CHECK(mask_iou(a, b) == doctest::Approx(1.0 / 3));
  CHECK(mask_iou({0, 0}, {0, 0}) == 0.0);
}

TEST_CASE("tusimple accuracy against a brute-force matcher") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 200);
  std::uniform_real_distribution<double> jitter(-30, 30);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<LanePoints> gt, pred;
    const int ng = 1 + trial % 3, np = trial % 4;
    for (int i = 0; i < ng; ++i) {
      LanePoints l;
      const double c = u(rng);
      for (double r = 100; r >= 20; r -= 10) l.push_back({r, c + 0.3 * (100 - r)});
      gt.push_back(l);
    }
    for (int j = 0; j < np; ++j) {
      LanePoints l = gt[static_cast<std::size_t>(j % ng)];
      const double d = jitter(rng);
      for (auto& p : l) p.col += d;
      pred.push_back(l);
    }
    const TusimpleResult r = tusimple_accuracy(pred, gt, 20);

    // Every one-to-one assignment, keeping the best total hit count.
    long total = 0;
    for (const auto& g : gt) total += static_cast<long>(g.size());
    auto hits = [&](std::size_t i, std::size_t j) {
      long n = 0;
      for (std::size_t k = 0; k < gt[i].size(); ++k) n += std::abs(pred[j][k].col - gt[i][k].col) <= 20;
      return n;
    };
    std::vector<int> perm(std::max(ng, np));
    std::iota(perm.begin(), perm.end(), 0);
    long best = 0;
    do {
      long s = 0;
      for (int i = 0; i < ng; ++i) {
        if (perm[static_cast<std::size_t>(i)] < np) s += hits(static_cast<std::size_t>(i), static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]));
      }
      best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(r.accuracy == doctest::Approx(static_cast<double>(best) / static_cast<double>(total)));
  }
  CHECK_THROWS_AS(tusimple_accuracy({}, {}, 20), std::invalid_argument);
}

TEST_CASE("pixel metrics") {
  std::vector<std::uint8_t> gt{1, 1, 1, 0, 0}, pred{1, 0, 1, 1, 0};
  PixelResult r = pixel_metrics(pred, gt);
  CHECK(r.pixel_accuracy == doctest::Approx(2.0 / 3));
  CHECK(r.lane_iou == doctest::Approx(0.5));
  CHECK_THROWS_AS(pixel_metrics({1}, {0}), std::invalid_argument);
}
