#include "sadkit/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <tuple>

namespace sadkit {

namespace {

// Column of a polyline at `row`, linearly interpolated; empty outside its rows.
std::optional<double> column_at(const LanePoints& lane, double row) {
  for (std::size_t i = 0; i < lane.size(); ++i) {
    if (lane[i].row == row) return lane[i].col;
    if (i + 1 < lane.size()) {
      const LanePoint& a = lane[i];
      const LanePoint& b = lane[i + 1];
      if ((row - a.row) * (row - b.row) < 0) {
        return a.col + (b.col - a.col) * (row - a.row) / (b.row - a.row);
      }
    }
  }
  return std::nullopt;
}

double segment_distance2(double py, double px, const LanePoint& a, const LanePoint& b) {
  const double dy = b.row - a.row, dx = b.col - a.col;
  const double len2 = dy * dy + dx * dx;
  double t = 0;
  if (len2 > 0) t = std::clamp(((py - a.row) * dy + (px - a.col) * dx) / len2, 0.0, 1.0);
  const double ey = py - (a.row + t * dy), ex = px - (a.col + t * dx);
  return ey * ey + ex * ex;
}

}  // namespace

TusimpleResult tusimple_accuracy(const std::vector<LanePoints>& pred, const std::vector<LanePoints>& gt,
                                 double tol_px) {
  TusimpleResult r;
  for (const auto& g : gt) r.gt_points += static_cast<long>(g.size());
  if (r.gt_points == 0) throw std::invalid_argument("tusimple_accuracy: ground truth has no points");

  std::vector<std::vector<long>> hits(gt.size(), std::vector<long>(pred.size(), 0));
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t j = 0; j < pred.size(); ++j) {
      for (const LanePoint& p : gt[i]) {
        const auto c = column_at(pred[j], p.row);
        if (c && std::abs(*c - p.col) <= tol_px) ++hits[i][j];
      }
    }
  }
  std::vector<bool> gt_used(gt.size(), false), pred_used(pred.size(), false);
  int pred_matched = 0;
  while (true) {
    long best = 0;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt_used[i]) continue;
      for (std::size_t j = 0; j < pred.size(); ++j) {
        if (!pred_used[j] && hits[i][j] > best) {
          best = hits[i][j];
          bi = i;
          bj = j;
        }
      }
    }
    if (best == 0) break;
    gt_used[bi] = pred_used[bj] = true;
    r.correct_points += best;
    if (2 * best >= static_cast<long>(gt[bi].size())) {
      ++r.matched_lanes;
      ++pred_matched;
    }
  }
  r.accuracy = static_cast<double>(r.correct_points) / static_cast<double>(r.gt_points);
  r.fp_rate = pred.empty() ? 0.0 : static_cast<double>(pred.size() - pred_matched) / static_cast<double>(pred.size());
  r.fn_rate = gt.empty() ? 0.0 : static_cast<double>(gt.size() - r.matched_lanes) / static_cast<double>(gt.size());
  return r;
}

F1Result f1_from_counts(long tp, long fp, long fn) {
  F1Result r{tp, fp, fn};
  r.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  r.f1 = r.precision + r.recall == 0 ? 0.0 : 2 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

std::vector<std::uint8_t> rasterize_lane(const LanePoints& lane, Index height, Index width, double line_width) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(height * width), 0);
  if (lane.empty()) return mask;
  const double half = line_width / 2, half2 = half * half;
  auto cover = [&](const LanePoint& a, const LanePoint& b) {
    const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.row, b.row) - half)));
    const Index y1 = std::min<Index>(height - 1, static_cast<Index>(std::ceil(std::max(a.row, b.row) + half)));
    const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.col, b.col) - half)));
    const Index x1 = std::min<Index>(width - 1, static_cast<Index>(std::ceil(std::max(a.col, b.col) + half)));
    for (Index y = y0; y <= y1; ++y) {
      for (Index x = x0; x <= x1; ++x) {
        if (segment_distance2(static_cast<double>(y), static_cast<double>(x), a, b) < half2) {
          mask[static_cast<std::size_t>(y * width + x)] = 1;
        }
      }
    }
  };
  if (lane.size() == 1) cover(lane[0], lane[0]);
  for (std::size_t i = 0; i + 1 < lane.size(); ++i) cover(lane[i], lane[i + 1]);
  return mask;
}

double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

F1Result culane_f1(const std::vector<LanePoints>& pred, const std::vector<LanePoints>& gt, Index height, Index width,
                   double line_width, double iou_thresh) {
  std::vector<std::vector<std::uint8_t>> pm, gm;
  for (const auto& l : pred) pm.push_back(rasterize_lane(l, height, width, line_width));
  for (const auto& l : gt) gm.push_back(rasterize_lane(l, height, width, line_width));
  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < gm.size(); ++i) {
    for (std::size_t j = 0; j < pm.size(); ++j) {
      const double iou = mask_iou(gm[i], pm[j]);
      if (iou > iou_thresh) pairs.emplace_back(iou, i, j);
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
  std::vector<bool> gt_used(gm.size(), false), pred_used(pm.size(), false);
  long tp = 0;
  for (const auto& [iou, i, j] : pairs) {
    if (gt_used[i] || pred_used[j]) continue;
    gt_used[i] = pred_used[j] = true;
    ++tp;
  }
  return f1_from_counts(tp, static_cast<long>(pm.size()) - tp, static_cast<long>(gm.size()) - tp);
}

PixelResult pixel_metrics(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("pixel_metrics: mask sizes differ");
  long inter = 0, uni = 0, positives = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    uni += p || g;
    positives += g;
  }
  if (positives == 0) throw std::invalid_argument("pixel_metrics: ground truth has no lane pixels");
  return {static_cast<double>(inter) / static_cast<double>(positives),
          static_cast<double>(inter) / static_cast<double>(uni)};
}

std::string MetricReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  if (tusimple) {
    j["accuracy"] = tusimple->accuracy;
    j["fp_rate"] = tusimple->fp_rate;
    j["fn_rate"] = tusimple->fn_rate;
  }
  if (culane) {
    j["precision"] = culane->precision;
    j["recall"] = culane->recall;
    j["f1"] = culane->f1;
    j["tp"] = culane->tp;
    j["fp"] = culane->fp;
    j["fn"] = culane->fn;
  }
  if (pixel) {
    j["pixel_accuracy"] = pixel->pixel_accuracy;
    j["lane_iou"] = pixel->lane_iou;
  }
  return j.dump(2);
}

}  // namespace sadkit
