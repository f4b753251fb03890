#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "rcpilot/actuation.hpp"
#include "rcpilot/track.hpp"
#include "rcpilot/vehicle.hpp"

namespace rcpilot {

struct ExpertConfig {
  double lookahead = 0.5;           // m
  double target_speed = 0.42;       // m/s
  double obstacle_clearance = 0.25; // m, added around each footprint
  /// Obstacles are considered this far beyond the lookahead point, so the
  /// lateral shift starts early enough to settle.
  double obstacle_horizon = 0.8;
  /// Shifted targets keep the car centre this far inside the lane edge.
  double lane_margin = 0.05;
  double speed_gain = 0.5;  // throttle per m/s of speed error
  double brake = 0.5;       // throttle magnitude when blocked

  void validate() const {
    require(lookahead > 0, Errc::invalid_argument, "lookahead must be > 0");
    require(target_speed > 0, Errc::invalid_argument, "target_speed must be > 0");
    require(obstacle_clearance >= 0 && obstacle_horizon >= 0 && lane_margin >= 0, Errc::invalid_argument,
            "clearance, horizon and lane margin must be >= 0");
  }
};

struct ExpertDecision {
  NormalizedCommand command;
  bool blocked = false;
  double lateral_target = 0.0;  // offset of the pursuit point, + = left
  Vec2 target;                  // world pursuit point
};

namespace detail {

struct Interval {
  double lo, hi;
};

/// Extent of an obstacle in track coordinates around arc length s_ref:
/// along-track [s0, s1] relative to s_ref and lateral [d0, d1].
struct TrackExtent {
  double s0, s1, d0, d1;
};

inline TrackExtent obstacle_extent(const Obstacle& o, const TrackDefinition& track) {
  const double s_ref = track.project(o.center).s;
  const Vec2 base = track.point_at(s_ref);
  const Vec2 t = track.tangent_at(s_ref);
  const Vec2 n{-t.y, t.x};
  TrackExtent e{1e9, -1e9, 1e9, -1e9};
  const Vec2 lo = o.lo(), hi = o.hi();
  for (Vec2 c : {Vec2{lo.x, lo.y}, Vec2{hi.x, lo.y}, Vec2{hi.x, hi.y}, Vec2{lo.x, hi.y}}) {
    const Vec2 r = c - base;
    e.s0 = std::min(e.s0, r.dot(t));
    e.s1 = std::max(e.s1, r.dot(t));
    e.d0 = std::min(e.d0, r.dot(n));
    e.d1 = std::max(e.d1, r.dot(n));
  }
  e.s0 += s_ref;
  e.s1 += s_ref;
  return e;
}

/// Widest sub-interval of `lane` not covered by any of `blocked`; ties go to
/// the leftmost (highest) gap.
inline std::optional<Interval> widest_gap(Interval lane, std::vector<Interval> blocked) {
  std::sort(blocked.begin(), blocked.end(), [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
  std::optional<Interval> best;
  double cursor = lane.lo;
  auto consider = [&](double lo, double hi) {
    if (hi >= lo && (!best || hi - lo >= best->hi - best->lo)) best = Interval{lo, hi};
  };
  for (const auto& b : blocked) {
    consider(cursor, std::min(b.lo, lane.hi));
    cursor = std::max(cursor, b.hi);
  }
  consider(cursor, lane.hi);
  return best;
}

}  // namespace detail

/// Speed-holding throttle: ESC feed-forward plus a proportional term.
inline double speed_throttle(double speed, double target_speed, double gain, const SimConfig& sim) {
  EscConfig esc;
  esc.max_speed = sim.max_speed;
  return clamp_unit(throttle_for_speed(target_speed, esc) + gain * (target_speed - speed));
}

/// Pure pursuit toward the centerline point `lookahead` ahead, laterally
/// shifted around obstacles whose inflated footprint covers the path.
inline ExpertDecision expert_pilot(const VehicleState& state, const TrackDefinition& track,
                                   std::span<const Obstacle> obstacles, const ExpertConfig& cfg,
                                   const SimConfig& sim = {}) {
  const auto proj = track.project(state.position());
  const double s_car = proj.s;
  const double half_lane = track.lane_width() / 2;

  std::vector<detail::Interval> blocked;
  for (const auto& o : obstacles) {
    const auto e = detail::obstacle_extent(o, track);
    const double ahead = track.s_delta(s_car, e.s0);  // distance to the near face
    const double behind = track.s_delta(s_car, e.s1); // distance to the far face
    const double reach = cfg.lookahead + cfg.obstacle_horizon + cfg.obstacle_clearance;
    if (ahead <= reach && behind >= -cfg.obstacle_clearance)
      blocked.push_back({e.d0 - cfg.obstacle_clearance, e.d1 + cfg.obstacle_clearance});
  }

  ExpertDecision out;
  if (!blocked.empty()) {
    const detail::Interval lane{-half_lane + cfg.lane_margin, half_lane - cfg.lane_margin};
    const auto gap = detail::widest_gap(lane, blocked);
    if (!gap) {
      out.blocked = true;
      out.command = NormalizedCommand(0.0, -cfg.brake);
      out.target = state.position();
      return out;
    }
    out.lateral_target = 0.5 * (gap->lo + gap->hi);
  }

  const double s_target = s_car + cfg.lookahead;
  const Vec2 t = track.tangent_at(s_target);
  out.target = track.point_at(s_target) + out.lateral_target * Vec2{-t.y, t.x};
  const Vec2 d = out.target - state.position();
  const double alpha = wrap_angle(std::atan2(d.y, d.x) - state.heading);
  const double steer = 2.0 * sim.wheelbase * std::sin(alpha) / cfg.lookahead / sim.max_steer;
  out.command = NormalizedCommand(steer, speed_throttle(state.speed, cfg.target_speed, cfg.speed_gain, sim));
  return out;
}

}  // namespace rcpilot
