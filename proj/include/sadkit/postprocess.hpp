#pragma once

#include "sadkit/tensor.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace sadkit {

/// Row-major 2-D map.
using Map2D = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Lane point in pixel-index coordinates; pixel (r, c) is centred at (r, c).
struct LanePoint {
  double row = 0;
  double col = 0;

  friend bool operator==(const LanePoint&, const LanePoint&) = default;
};

using LanePoints = std::vector<LanePoint>;

/// 9x9 box mean with zero padding.
Map2D smooth(const Map2D& prob);

/// Samples rows H-1, H-1-stride, ... and keeps the argmax column of each row
/// whose maximum reaches point_thresh (ties go to the smaller column). Returns
/// nothing when exist_prob <= exist_thresh.
std::optional<LanePoints> extract_points(const Map2D& prob, double exist_prob, int row_stride = 20,
                                         double exist_thresh = 0.5, double point_thresh = 0.3);

/// Natural cubic spline col = f(row); linear extension outside the knots.
class NaturalSpline {
 public:
  /// Needs at least 2 knots with distinct rows (any order).
  static NaturalSpline fit(const LanePoints& knots);

  double operator()(double row) const;
  const Eigen::VectorXd& rows() const { return x_; }
  const Eigen::VectorXd& second_derivatives() const { return m_; }

 private:
  Eigen::VectorXd x_, y_, m_;
};

struct LanePolyline {
  LanePoints points;  // rows decreasing
  std::optional<NaturalSpline> spline;

  /// Spline evaluated at every `step` rows from the bottom knot to the top
  /// knot; a degenerate lane returns its single point.
  LanePoints sample(double step = 1.0) const;
};

/// Fewer than two points gives a degenerate lane without a spline.
LanePolyline fit_spline(LanePoints points);

struct PostprocessConfig {
  int row_stride = 20;
  double exist_thresh = 0.5;
  double point_thresh = 0.3;
  bool smooth = true;
};

/// Per-slot lanes from class probabilities [N_c,H,W] (class 0 background)
/// and existence probabilities [N_c - 1]. Slots without a lane are skipped.
std::vector<LanePolyline> decode_lanes(const float* probs, Index classes, Index height, Index width,
                                       const float* exist_probs, const PostprocessConfig& config);

/// Ground-truth lanes from a class map: for each class, the mean column of
/// its pixels on every `row_step`-th row (from the bottom) where it occurs.
std::vector<LanePoints> lanes_from_labels(const std::vector<std::uint8_t>& labels, Index height, Index width,
                                          int classes, int row_step = 1);

/// [[row, col], ...] per lane.
std::string polylines_to_json(const std::vector<LanePoints>& lanes);
std::vector<LanePoints> polylines_from_json(const std::string& text);

}  // namespace sadkit
