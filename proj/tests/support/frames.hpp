#pragma once

// Rendered frames at jittered poses along the default track, labelled with a
// simple proportional steering rule. Enough structure for a model to learn.

#include <random>

#include "rcpilot/fpv.hpp"
#include "rcpilot/nn/train.hpp"
#include "rcpilot/scenario.hpp"

namespace testdata {

inline rcpilot::nn::MemoryView<float> track_frames(std::size_t n, std::uint64_t seed) {
  using namespace rcpilot;
  static const TrackDefinition track = default_track();
  static const FpvRenderer renderer(track);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> s_dist(0.0, track.length());
  std::uniform_real_distribution<double> lat(-0.15, 0.15);
  std::uniform_real_distribution<double> yaw(-0.25, 0.25);
  nn::MemoryView<float> view({120, 160, 3});
  for (std::size_t i = 0; i < n; ++i) {
    const double s = s_dist(rng);
    const double d = lat(rng), e = yaw(rng);
    const Vec2 p = track.point_at(s);
    const double h = track.heading_at(s);
    VehicleState st;
    st.x = p.x - std::sin(h) * d;
    st.y = p.y + std::cos(h) * d;
    st.heading = wrap_angle(h + e);
    const double steering = clamp_unit(-2.0 * d - 1.5 * e);
    view.add(to_model_input<float>(renderer.render(st, {})), steering, 0.3);
  }
  return view;
}

}  // namespace testdata
