#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "rcpilot/core.hpp"
#include "rcpilot/nn/tensor.hpp"
#include "rcpilot/png.hpp"
#include "rcpilot/track.hpp"
#include "rcpilot/vehicle.hpp"

namespace rcpilot {

constexpr int kFrameWidth = 160;
constexpr int kFrameHeight = 120;
constexpr std::size_t kFrameBytes = static_cast<std::size_t>(kFrameWidth) * kFrameHeight * 3;

/// 160x120 RGB camera image, row-major, 8 bits per channel.
struct CameraFrame {
  int width = kFrameWidth;
  int height = kFrameHeight;
  std::vector<std::uint8_t> pixels = std::vector<std::uint8_t>(kFrameBytes, 0);
  double timestamp = 0.0;
  std::uint64_t frame_id = 0;

  bool valid() const { return width == kFrameWidth && height == kFrameHeight && pixels.size() == kFrameBytes; }

  Rgb at(int x, int y) const {
    const std::size_t i = (static_cast<std::size_t>(y) * kFrameWidth + static_cast<std::size_t>(x)) * 3;
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
};

struct CameraModel {
  double height_above_ground = 0.12;
  double pitch_down = 0.26;
  double horizontal_fov = 2.0;
  /// Ground beyond this range renders as bare floor; 0 = unlimited.
  double max_view_distance = 0.0;

  void validate() const {
    require(horizontal_fov > 0 && horizontal_fov < kPi, Errc::invalid_argument, "horizontal_fov must be in (0, pi)");
    require(pitch_down >= 0, Errc::invalid_argument, "pitch_down must be >= 0");
    require(height_above_ground > 0, Errc::invalid_argument, "camera height must be > 0");
    require(max_view_distance >= 0, Errc::invalid_argument, "max_view_distance must be >= 0");
  }
  friend bool operator==(const CameraModel&, const CameraModel&) = default;
};

namespace palette {
constexpr Rgb floor{60, 60, 60};
constexpr Rgb lane_boundary{240, 240, 240};
constexpr Rgb center_guide{230, 200, 40};
constexpr Rgb obstacle{200, 30, 30};
constexpr Rgb sky{150, 200, 240};
}  // namespace palette

/// Flat-shaded ground-plane raycaster. Construction rasterizes the distance
/// to the centerline once; each render is then a per-pixel lookup plus a
/// ray/box test per obstacle (nearest hit wins).
class FpvRenderer {
 public:
  static constexpr double kCell = 0.01;
  static constexpr double kMargin = 1.0;
  static constexpr double kBoundaryHalfWidth = 0.02;
  static constexpr double kCenterHalfWidth = 0.012;

  explicit FpvRenderer(const TrackDefinition& track, CameraModel cam = {}) : lane_half_(track.lane_width() / 2) {
    require(track.valid(), Errc::invalid_argument, "renderer needs a valid track");
    set_camera(cam);
    origin_ = {track.bounds().min.x - kMargin, track.bounds().min.y - kMargin};
    nx_ = static_cast<int>(std::ceil((track.bounds().max.x - track.bounds().min.x + 2 * kMargin) / kCell)) + 1;
    ny_ = static_cast<int>(std::ceil((track.bounds().max.y - track.bounds().min.y + 2 * kMargin) / kCell)) + 1;
    field_.assign(static_cast<std::size_t>(nx_) * static_cast<std::size_t>(ny_), 0.0f);
    const auto& pts = track.centerline();
    for (int j = 0; j < ny_; ++j) {
      for (int i = 0; i < nx_; ++i) {
        const Vec2 p{origin_.x + i * kCell, origin_.y + j * kCell};
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k + 1 < pts.size(); ++k)
          best = std::min(best, detail::point_segment_distance(p, pts[k], pts[k + 1]));
        field_[static_cast<std::size_t>(j) * nx_ + i] = static_cast<float>(best);
      }
    }
  }

  void set_camera(const CameraModel& cam) {
    cam.validate();
    cam_ = cam;
    const double f = (kFrameWidth / 2.0) / std::tan(cam.horizontal_fov / 2.0);
    const double cp = std::cos(cam.pitch_down);
    const double sp = std::sin(cam.pitch_down);
    rays_.resize(static_cast<std::size_t>(kFrameWidth) * kFrameHeight);
    for (int v = 0; v < kFrameHeight; ++v) {
      for (int u = 0; u < kFrameWidth; ++u) {
        const double xr = (u + 0.5 - kFrameWidth / 2.0) / f;   // right
        const double yd = (v + 0.5 - kFrameHeight / 2.0) / f;  // down
        // vehicle frame: x forward, y left, z up
        Ray3 r;
        r.x = cp - yd * sp;
        r.y = -xr;
        r.z = -sp - yd * cp;
        rays_[static_cast<std::size_t>(v) * kFrameWidth + u] = r;
      }
    }
  }

  const CameraModel& camera() const { return cam_; }

  /// Distance from a world point to the centerline, bilinear in the raster.
  double centerline_distance(Vec2 p) const {
    const double fx = (p.x - origin_.x) / kCell;
    const double fy = (p.y - origin_.y) / kCell;
    if (fx < 0 || fy < 0 || fx >= nx_ - 1 || fy >= ny_ - 1) return std::numeric_limits<double>::infinity();
    const int i = static_cast<int>(fx);
    const int j = static_cast<int>(fy);
    const double tx = fx - i;
    const double ty = fy - j;
    const std::size_t k = static_cast<std::size_t>(j) * nx_ + i;
    const double a = field_[k], b = field_[k + 1], c = field_[k + nx_], d = field_[k + nx_ + 1];
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
  }

  Rgb ground_color(Vec2 p) const {
    const double d = centerline_distance(p);
    if (d < kCenterHalfWidth) return palette::center_guide;
    if (std::abs(d - lane_half_) < kBoundaryHalfWidth) return palette::lane_boundary;
    return palette::floor;
  }

  CameraFrame render(const VehicleState& state, std::span<const Obstacle> obstacles, std::uint64_t frame_id = 0,
                     double timestamp = 0.0) const {
    CameraFrame frame;
    frame.frame_id = frame_id;
    frame.timestamp = timestamp;
    const double ch = std::cos(state.heading);
    const double sh = std::sin(state.heading);
    const double cam_h = cam_.height_above_ground;
    const double view2 = cam_.max_view_distance * cam_.max_view_distance;
    for (int v = 0; v < kFrameHeight; ++v) {
      for (int u = 0; u < kFrameWidth; ++u) {
        const Ray3& r = rays_[static_cast<std::size_t>(v) * kFrameWidth + u];
        const double dx = r.x * ch - r.y * sh;
        const double dy = r.x * sh + r.y * ch;
        double t_hit = std::numeric_limits<double>::infinity();
        Rgb color = palette::sky;
        if (r.z < 0) {
          t_hit = cam_h / -r.z;
          const double range2 = t_hit * t_hit * (dx * dx + dy * dy);
          color = (view2 > 0 && range2 > view2) ? palette::floor
                                                : ground_color({state.x + t_hit * dx, state.y + t_hit * dy});
        }
        for (const auto& ob : obstacles) {
          const double t = ray_box(state.x, state.y, cam_h, dx, dy, r.z, ob);
          if (t < t_hit) {
            t_hit = t;
            color = ob.color;
          }
        }
        const std::size_t idx = (static_cast<std::size_t>(v) * kFrameWidth + u) * 3;
        frame.pixels[idx] = color.r;
        frame.pixels[idx + 1] = color.g;
        frame.pixels[idx + 2] = color.b;
      }
    }
    return frame;
  }

 private:
  struct Ray3 {
    double x, y, z;
  };

  static double ray_box(double ox, double oy, double oz, double dx, double dy, double dz, const Obstacle& ob) {
    const double lo[3] = {ob.center.x - ob.width / 2, ob.center.y - ob.depth / 2, 0.0};
    const double hi[3] = {ob.center.x + ob.width / 2, ob.center.y + ob.depth / 2, ob.height};
    const double o[3] = {ox, oy, oz};
    const double d[3] = {dx, dy, dz};
    double tmin = 0.0;
    double tmax = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (std::abs(d[a]) < 1e-12) {
        if (o[a] < lo[a] || o[a] > hi[a]) return std::numeric_limits<double>::infinity();
        continue;
      }
      double t0 = (lo[a] - o[a]) / d[a];
      double t1 = (hi[a] - o[a]) / d[a];
      if (t0 > t1) std::swap(t0, t1);
      tmin = std::max(tmin, t0);
      tmax = std::min(tmax, t1);
      if (tmin > tmax) return std::numeric_limits<double>::infinity();
    }
    return tmin;
  }

  double lane_half_;
  CameraModel cam_;
  Vec2 origin_;
  int nx_ = 0;
  int ny_ = 0;
  std::vector<float> field_;
  std::vector<Ray3> rays_;
};

/// One-shot render; builds the track raster on every call. Long-running
/// callers should keep an FpvRenderer.
inline CameraFrame render(const VehicleState& state, const TrackDefinition& track, std::span<const Obstacle> obstacles,
                          const CameraModel& cam = {}) {
  return FpvRenderer(track, cam).render(state, obstacles);
}

/// Writes pixel/255 into `out` (HWC order, 160*120*3 values).
template <typename T>
void to_model_input(const CameraFrame& frame, std::span<T> out) {
  require(frame.valid(), Errc::shape_mismatch,
          "frame is " + std::to_string(frame.width) + "x" + std::to_string(frame.height) + " with " +
              std::to_string(frame.pixels.size()) + " bytes, expected 160x120x3");
  require(out.size() == kFrameBytes, Errc::shape_mismatch, "model input buffer must hold 160*120*3 values");
  for (std::size_t i = 0; i < kFrameBytes; ++i) out[i] = static_cast<T>(frame.pixels[i]) / static_cast<T>(255);
}

template <typename T = float>
nn::Tensor<T> to_model_input(const CameraFrame& frame) {
  nn::Tensor<T> t({static_cast<std::size_t>(kFrameHeight), static_cast<std::size_t>(kFrameWidth), 3});
  to_model_input<T>(frame, t.values());
  return t;
}

inline std::vector<std::uint8_t> encode_png(const CameraFrame& frame) {
  require(frame.valid(), Errc::shape_mismatch, "cannot encode an invalid frame");
  return png::encode(png::Image{frame.width, frame.height, 3, frame.pixels});
}

inline CameraFrame decode_png(std::span<const std::uint8_t> bytes) {
  auto img = png::decode(bytes);
  require(img.width == kFrameWidth && img.height == kFrameHeight && img.channels == 3, Errc::shape_mismatch,
          "image is " + std::to_string(img.width) + "x" + std::to_string(img.height) + "x" +
              std::to_string(img.channels) + ", expected 160x120x3");
  CameraFrame f;
  f.pixels = std::move(img.pixels);
  return f;
}

}  // namespace rcpilot
