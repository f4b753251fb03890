#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "rcpilot/core.hpp"

namespace rcpilot {

struct Bounds {
  Vec2 min{0.0, 0.0};
  Vec2 max{5.0, 5.0};

  bool contains(Vec2 p) const {
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y;
  }
  friend bool operator==(const Bounds&, const Bounds&) = default;
};

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  friend bool operator==(Rgb, Rgb) = default;
};

/// Axis-aligned box standing on the ground plane.
struct Obstacle {
  Vec2 center;
  double width = 0.15;   // extent along world x
  double depth = 0.15;   // extent along world y
  double height = 0.15;
  Rgb color{200, 30, 30};

  Vec2 lo() const { return {center.x - width / 2, center.y - depth / 2}; }
  Vec2 hi() const { return {center.x + width / 2, center.y + depth / 2}; }

  friend bool operator==(const Obstacle&, const Obstacle&) = default;
};

/// Result of projecting a point onto the centerline.
struct TrackProjection {
  double s = 0.0;               // arc length along the loop, [0, length)
  double lateral_offset = 0.0;  // + = left of the travel direction
  std::size_t segment = 0;
};

namespace detail {

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = ab.dot(ab);
  double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

inline bool segments_intersect(Vec2 p1, Vec2 p2, Vec2 q1, Vec2 q2) {
  const double d1 = (p2 - p1).cross(q1 - p1);
  const double d2 = (p2 - p1).cross(q2 - p1);
  const double d3 = (q2 - q1).cross(p1 - q1);
  const double d4 = (q2 - q1).cross(p2 - q1);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0));
}

/// Distance between segment [a,b] and the box [lo,hi]; 0 when they touch.
inline double segment_box_distance(Vec2 a, Vec2 b, Vec2 lo, Vec2 hi) {
  const Bounds box{lo, hi};
  if (box.contains(a) || box.contains(b)) return 0.0;
  const std::array<Vec2, 4> c{Vec2{lo.x, lo.y}, Vec2{hi.x, lo.y}, Vec2{hi.x, hi.y}, Vec2{lo.x, hi.y}};
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 4; ++i) {
    const Vec2 e0 = c[i];
    const Vec2 e1 = c[(i + 1) % 4];
    if (segments_intersect(a, b, e0, e1)) return 0.0;
    best = std::min({best, point_segment_distance(e0, a, b), point_segment_distance(a, e0, e1),
                     point_segment_distance(b, e0, e1)});
  }
  return best;
}

}  // namespace detail

/// Closed-loop centerline with lane width and map bounds. Arc-length lookups
/// are precomputed on construction.
class TrackDefinition {
 public:
  TrackDefinition() = default;

  TrackDefinition(std::vector<Vec2> centerline, double lane_width, Bounds bounds = {})
      : centerline_(std::move(centerline)), lane_width_(lane_width), bounds_(bounds) {
    require(centerline_.size() >= 4, Errc::invalid_argument, "centerline needs at least 4 points");
    require(centerline_.front() == centerline_.back(), Errc::invalid_argument,
            "centerline must be closed (first point == last point)");
    require(lane_width_ > 0 && std::isfinite(lane_width_), Errc::invalid_argument, "lane_width must be > 0");
    for (const auto& p : centerline_) {
      require(std::isfinite(p.x) && std::isfinite(p.y), Errc::invalid_argument, "non-finite centerline point");
      require(bounds_.contains(p), Errc::invalid_argument, "centerline point outside bounds");
    }
    cumulative_.assign(centerline_.size(), 0.0);
    for (std::size_t i = 1; i < centerline_.size(); ++i) {
      const double seg = (centerline_[i] - centerline_[i - 1]).norm();
      require(seg > 0, Errc::invalid_argument, "duplicate consecutive centerline points");
      cumulative_[i] = cumulative_[i - 1] + seg;
    }
  }

  const std::vector<Vec2>& centerline() const { return centerline_; }
  double lane_width() const { return lane_width_; }
  const Bounds& bounds() const { return bounds_; }
  std::size_t segment_count() const { return centerline_.size() - 1; }
  double length() const { return cumulative_.empty() ? 0.0 : cumulative_.back(); }
  bool valid() const { return !cumulative_.empty(); }

  /// Point on the centerline at arc length s (wrapped to the loop).
  Vec2 point_at(double s) const {
    const auto [i, t] = locate(s);
    return centerline_[i] + t * (centerline_[i + 1] - centerline_[i]);
  }

  /// Unit tangent at arc length s.
  Vec2 tangent_at(double s) const {
    const auto [i, t] = locate(s);
    const Vec2 d = centerline_[i + 1] - centerline_[i];
    return (1.0 / d.norm()) * d;
  }

  double heading_at(double s) const {
    const Vec2 t = tangent_at(s);
    return std::atan2(t.y, t.x);
  }

  /// Nearest-segment projection of p.
  TrackProjection project(Vec2 p) const {
    TrackProjection best;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < centerline_.size(); ++i) {
      const Vec2 a = centerline_[i];
      const Vec2 ab = centerline_[i + 1] - a;
      const double len2 = ab.dot(ab);
      const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
      const Vec2 q = a + t * ab;
      const Vec2 d = p - q;
      const double d2 = d.dot(d);
      if (d2 < best_d2) {
        best_d2 = d2;
        best.segment = i;
        best.s = cumulative_[i] + t * std::sqrt(len2);
        const double side = ab.cross(d);
        best.lateral_offset = (side >= 0 ? 1.0 : -1.0) * std::sqrt(d2);
      }
    }
    best.s = wrap_s(best.s);
    return best;
  }

  double distance_to_centerline(Vec2 p) const { return std::abs(project(p).lateral_offset); }

  /// Wraps an arc length into [0, length).
  double wrap_s(double s) const {
    const double len = length();
    s = std::fmod(s, len);
    if (s < 0) s += len;
    if (s >= len) s = 0.0;
    return s;
  }

  /// Signed arc-length difference b - a folded into (-length/2, length/2].
  double s_delta(double a, double b) const {
    const double len = length();
    double d = std::fmod(b - a, len);
    if (d > len / 2) d -= len;
    if (d <= -len / 2) d += len;
    return d;
  }

  /// True when the obstacle footprint reaches into the lane.
  bool obstacle_intersects_lane(const Obstacle& o) const {
    for (std::size_t i = 0; i + 1 < centerline_.size(); ++i) {
      if (detail::segment_box_distance(centerline_[i], centerline_[i + 1], o.lo(), o.hi()) < lane_width_ / 2)
        return true;
    }
    return false;
  }

 private:
  std::pair<std::size_t, double> locate(double s) const {
    s = wrap_s(s);
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
    std::size_t i = static_cast<std::size_t>(std::distance(cumulative_.begin(), it));
    i = std::clamp<std::size_t>(i, 1, cumulative_.size() - 1) - 1;
    const double seg = cumulative_[i + 1] - cumulative_[i];
    return {i, (s - cumulative_[i]) / seg};
  }

  std::vector<Vec2> centerline_;
  double lane_width_ = 0.6;
  Bounds bounds_;
  std::vector<double> cumulative_;
};

struct LapPosition {
  double s = 0.0;
  double lateral_offset = 0.0;
};

inline LapPosition lap_progress(Vec2 position, const TrackDefinition& track) {
  const auto p = track.project(position);
  return {p.s, p.lateral_offset};
}

inline bool off_track(Vec2 position, const TrackDefinition& track) {
  return std::abs(lap_progress(position, track).lateral_offset) > track.lane_width() / 2;
}

/// Rounded-rectangle loop centred in a 5 m x 5 m area, counter-clockwise,
/// starting mid-way along the bottom straight heading +x. The straight
/// lengths are solved so the polyline is exactly `target_length` long.
inline TrackDefinition rounded_rectangle_track(double target_length = 12.0, double corner_radius = 0.8,
                                               double side_straight = 1.5, double lane_width = 0.6,
                                               int segments_per_corner = 18) {
  const double dtheta = (kPi / 2) / segments_per_corner;
  const double corner_poly = segments_per_corner * 2.0 * corner_radius * std::sin(dtheta / 2);
  const double bottom_straight = (target_length - 2.0 * side_straight - 4.0 * corner_poly) / 2.0;
  require(bottom_straight > 0, Errc::invalid_argument, "track length too short for corner radius");

  const Vec2 c{2.5, 2.5};
  const double hx = bottom_straight / 2;
  const double hy = side_straight / 2;
  std::vector<Vec2> pts;
  pts.push_back({c.x, c.y - hy - corner_radius});
  auto arc = [&](Vec2 center, double a0) {
    for (int k = 0; k <= segments_per_corner; ++k) {
      const double a = a0 + k * dtheta;
      pts.push_back({center.x + corner_radius * std::cos(a), center.y + corner_radius * std::sin(a)});
    }
  };
  arc({c.x + hx, c.y - hy}, -kPi / 2);
  arc({c.x + hx, c.y + hy}, 0.0);
  arc({c.x - hx, c.y + hy}, kPi / 2);
  arc({c.x - hx, c.y - hy}, kPi);
  pts.push_back(pts.front());
  return TrackDefinition(std::move(pts), lane_width, Bounds{{0.0, 0.0}, {5.0, 5.0}});
}

inline TrackDefinition default_track() { return rounded_rectangle_track(); }

}  // namespace rcpilot
