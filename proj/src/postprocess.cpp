#include "sadkit/postprocess.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sadkit {

Map2D smooth(const Map2D& prob) {
  constexpr Index r = 4;
  const Index h = prob.rows(), w = prob.cols();
  Map2D horiz = Map2D::Zero(h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const Index lo = std::max<Index>(0, x - r), hi = std::min<Index>(w - 1, x + r);
      horiz(y, x) = prob.row(y).segment(lo, hi - lo + 1).sum();
    }
  }
  Map2D out = Map2D::Zero(h, w);
  for (Index y = 0; y < h; ++y) {
    const Index lo = std::max<Index>(0, y - r), hi = std::min<Index>(h - 1, y + r);
    out.row(y) = horiz.middleRows(lo, hi - lo + 1).colwise().sum() / 81.0;
  }
  return out;
}

std::optional<LanePoints> extract_points(const Map2D& prob, double exist_prob, int row_stride, double exist_thresh,
                                         double point_thresh) {
  if (row_stride < 1) throw std::invalid_argument("extract_points: row stride must be at least 1");
  if (!(exist_prob > exist_thresh)) return std::nullopt;
  LanePoints pts;
  if (prob.cols() == 0) return pts;
  for (Index y = prob.rows() - 1; y >= 0; y -= row_stride) {
    Index best = 0;
    for (Index x = 1; x < prob.cols(); ++x) {
      if (prob(y, x) > prob(y, best)) best = x;
    }
    if (prob(y, best) < point_thresh) continue;
    pts.push_back({static_cast<double>(y), static_cast<double>(best)});
  }
  return pts;
}

NaturalSpline NaturalSpline::fit(const LanePoints& knots) {
  if (knots.size() < 2) throw std::invalid_argument("spline: need at least 2 knots");
  LanePoints k = knots;
  std::sort(k.begin(), k.end(), [](const LanePoint& a, const LanePoint& b) { return a.row < b.row; });
  const Index n = static_cast<Index>(k.size());
  NaturalSpline s;
  s.x_.resize(n);
  s.y_.resize(n);
  for (Index i = 0; i < n; ++i) {
    s.x_[i] = k[static_cast<std::size_t>(i)].row;
    s.y_[i] = k[static_cast<std::size_t>(i)].col;
    if (i > 0 && !(s.x_[i] > s.x_[i - 1])) throw std::invalid_argument("spline: knot rows must be distinct");
  }
  s.m_ = Eigen::VectorXd::Zero(n);
  const Index inner = n - 2;
  if (inner <= 0) return s;
  // Tridiagonal system for the interior second derivatives (Thomas algorithm).
  Eigen::VectorXd sub(inner), diag(inner), sup(inner), rhs(inner);
  for (Index i = 1; i <= inner; ++i) {
    const double h0 = s.x_[i] - s.x_[i - 1], h1 = s.x_[i + 1] - s.x_[i];
    sub[i - 1] = h0;
    diag[i - 1] = 2 * (h0 + h1);
    sup[i - 1] = h1;
    rhs[i - 1] = 6 * ((s.y_[i + 1] - s.y_[i]) / h1 - (s.y_[i] - s.y_[i - 1]) / h0);
  }
  for (Index i = 1; i < inner; ++i) {
    const double f = sub[i] / diag[i - 1];
    diag[i] -= f * sup[i - 1];
    rhs[i] -= f * rhs[i - 1];
  }
  s.m_[inner] = rhs[inner - 1] / diag[inner - 1];
  for (Index i = inner - 2; i >= 0; --i) s.m_[i + 1] = (rhs[i] - sup[i] * s.m_[i + 2]) / diag[i];
  return s;
}

double NaturalSpline::operator()(double row) const {
  const Index n = x_.size();
  if (row <= x_[0]) {
    const double h = x_[1] - x_[0];
    const double slope = (y_[1] - y_[0]) / h - h * (2 * m_[0] + m_[1]) / 6;
    return y_[0] + slope * (row - x_[0]);
  }
  if (row >= x_[n - 1]) {
    const double h = x_[n - 1] - x_[n - 2];
    const double slope = (y_[n - 1] - y_[n - 2]) / h + h * (2 * m_[n - 1] + m_[n - 2]) / 6;
    return y_[n - 1] + slope * (row - x_[n - 1]);
  }
  const Index i = std::upper_bound(x_.data(), x_.data() + n, row) - x_.data() - 1;
  const double h = x_[i + 1] - x_[i];
  const double a = (x_[i + 1] - row) / h, b = (row - x_[i]) / h;
  return a * y_[i] + b * y_[i + 1] + ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6;
}

LanePoints LanePolyline::sample(double step) const {
  if (!spline) return points;
  LanePoints out;
  const double bottom = points.front().row, top = points.back().row;
  for (double r = bottom; r > top; r -= step) out.push_back({r, (*spline)(r)});
  out.push_back({top, (*spline)(top)});
  return out;
}

LanePolyline fit_spline(LanePoints points) {
  std::sort(points.begin(), points.end(), [](const LanePoint& a, const LanePoint& b) { return a.row > b.row; });
  LanePolyline p;
  p.points = std::move(points);
  if (p.points.size() >= 2) p.spline = NaturalSpline::fit(p.points);
  return p;
}

std::vector<LanePolyline> decode_lanes(const float* probs, Index classes, Index height, Index width,
                                       const float* exist_probs, const PostprocessConfig& config) {
  std::vector<LanePolyline> lanes;
  const Index plane = height * width;
  for (Index k = 1; k < classes; ++k) {
    Map2D m = Eigen::Map<const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                  probs + k * plane, height, width)
                  .cast<double>();
    if (config.smooth) m = smooth(m);
    auto pts = extract_points(m, exist_probs[k - 1], config.row_stride, config.exist_thresh, config.point_thresh);
    if (!pts || pts->empty()) continue;
    lanes.push_back(fit_spline(std::move(*pts)));
  }
  return lanes;
}

std::vector<LanePoints> lanes_from_labels(const std::vector<std::uint8_t>& labels, Index height, Index width,
                                          int classes, int row_step) {
  std::vector<LanePoints> lanes;
  for (int k = 1; k < classes; ++k) {
    LanePoints pts;
    for (Index y = height - 1; y >= 0; y -= row_step) {
      double sum = 0;
      int count = 0;
      for (Index x = 0; x < width; ++x) {
        if (labels[static_cast<std::size_t>(y * width + x)] == k) {
          sum += static_cast<double>(x);
          ++count;
        }
      }
      if (count > 0) pts.push_back({static_cast<double>(y), sum / count});
    }
    if (!pts.empty()) lanes.push_back(std::move(pts));
  }
  return lanes;
}

std::string polylines_to_json(const std::vector<LanePoints>& lanes) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& lane : lanes) {
    nlohmann::json l = nlohmann::json::array();
    for (const auto& p : lane) l.push_back({p.row, p.col});
    j.push_back(std::move(l));
  }
  return j.dump();
}

std::vector<LanePoints> polylines_from_json(const std::string& text) {
  std::vector<LanePoints> lanes;
  const auto j = nlohmann::json::parse(text);
  if (!j.is_array()) throw std::invalid_argument("polylines: expected a JSON array of lanes");
  for (const auto& l : j) {
    LanePoints pts;
    for (const auto& p : l) {
      if (!p.is_array() || p.size() != 2) throw std::invalid_argument("polylines: points must be [row, col] pairs");
      pts.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    lanes.push_back(std::move(pts));
  }
  return lanes;
}

}  // namespace sadkit
