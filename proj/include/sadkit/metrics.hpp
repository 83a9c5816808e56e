#pragma once

#include "sadkit/postprocess.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace sadkit {

struct TusimpleResult {
  double accuracy = 0;
  double fp_rate = 0;
  double fn_rate = 0;
  long correct_points = 0;
  long gt_points = 0;
  int matched_lanes = 0;
};

/// A ground-truth point is hit when the prediction, linearly interpolated at
/// that row, lies within tol_px columns. Lanes are paired one-to-one by
/// descending hit count; a pair matches when at least half of the gt lane's
/// points are hit. Throws when there are no ground-truth points.
TusimpleResult tusimple_accuracy(const std::vector<LanePoints>& pred, const std::vector<LanePoints>& gt,
                                 double tol_px = 20);

struct F1Result {
  long tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0, f1 = 0;
};

/// Precision and recall from counts (1 when the denominator is empty), F1 = 0
/// when both are 0.
F1Result f1_from_counts(long tp, long fp, long fn);

/// Pixels whose centre lies closer than width/2 to the polyline.
std::vector<std::uint8_t> rasterize_lane(const LanePoints& lane, Index height, Index width, double line_width);

double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

/// Greedy one-to-one matching by descending mask IoU; pairs above iou_thresh
/// are true positives.
F1Result culane_f1(const std::vector<LanePoints>& pred, const std::vector<LanePoints>& gt, Index height, Index width,
                   double line_width = 30, double iou_thresh = 0.5);

struct PixelResult {
  double pixel_accuracy = 0;
  double lane_iou = 0;
};

/// Nonzero entries are lane pixels. Throws when gt has no lane pixel.
PixelResult pixel_metrics(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);

struct MetricReport {
  std::optional<TusimpleResult> tusimple;
  std::optional<F1Result> culane;
  std::optional<PixelResult> pixel;

  std::string to_json() const;
};

}  // namespace sadkit
