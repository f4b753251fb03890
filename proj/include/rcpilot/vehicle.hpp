#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

#include "rcpilot/core.hpp"

namespace rcpilot {

/// Ground-truth pose and drive state of the simulated car.
struct VehicleState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;         // (-pi, pi]
  double speed = 0.0;           // m/s, negative = reverse
  double steering_angle = 0.0;  // front-wheel angle, rad

  Vec2 position() const { return {x, y}; }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(heading) && std::isfinite(speed) &&
           std::isfinite(steering_angle);
  }
  friend bool operator==(const VehicleState&, const VehicleState&) = default;
};

struct SensorNoise {
  double yaw_rate = 0.0;  // rad/s
  double accel = 0.0;     // m/s^2
};

struct SimConfig {
  double wheelbase = 0.26;
  double dt = 0.05;
  double max_steer = 0.45;
  double max_speed = 2.0;
  double motor_tau = 0.25;
  double ticks_per_meter = 350.0;
  /// Servo slew limit in rad/s; 0 disables (instantaneous servo).
  double steer_rate_limit = 0.0;
  std::uint64_t seed = 0;
  SensorNoise noise;

  void validate() const {
    require(dt > 0 && std::isfinite(dt), Errc::invalid_argument, "dt must be > 0");
    require(wheelbase > 0, Errc::invalid_argument, "wheelbase must be > 0");
    require(motor_tau > 0, Errc::invalid_argument, "motor_tau must be > 0");
    require(max_steer > 0 && max_speed > 0, Errc::invalid_argument, "max_steer and max_speed must be > 0");
    require(ticks_per_meter > 0, Errc::invalid_argument, "ticks_per_meter must be > 0");
  }
};

/// Advances the kinematic bicycle model by one dt. `steering` is the
/// normalized servo command in [-1, 1]; `target_speed` is what the ESC is
/// driving toward. Pose integrates with the pre-step speed.
inline VehicleState step(const VehicleState& s, double steering, double target_speed, const SimConfig& cfg) {
  require(s.finite() && std::isfinite(steering) && std::isfinite(target_speed), Errc::invalid_state,
          "invalid state");
  VehicleState n = s;
  double delta = clamp_unit(steering) * cfg.max_steer;
  if (cfg.steer_rate_limit > 0) {
    const double max_change = cfg.steer_rate_limit * cfg.dt;
    delta = std::clamp(delta, s.steering_angle - max_change, s.steering_angle + max_change);
  }
  n.steering_angle = std::clamp(delta, -cfg.max_steer, cfg.max_steer);

  n.x = s.x + s.speed * std::cos(s.heading) * cfg.dt;
  n.y = s.y + s.speed * std::sin(s.heading) * cfg.dt;
  n.heading = wrap_angle(s.heading + s.speed / cfg.wheelbase * std::tan(n.steering_angle) * cfg.dt);

  const double target = std::clamp(target_speed, -cfg.max_speed, cfg.max_speed);
  const double decay = std::exp(-cfg.dt / cfg.motor_tau);
  n.speed = std::clamp(target + (s.speed - target) * decay, -cfg.max_speed, cfg.max_speed);
  return n;
}

/// Sum of |speed| * dt over every step of the history.
inline double distance_traveled(std::span<const VehicleState> history, const SimConfig& cfg) {
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < history.size(); ++i) total += std::abs(history[i].speed) * cfg.dt;
  return total;
}

struct RawSensorSample {
  std::int64_t encoder_ticks = 0;  // signed cumulative
  std::int64_t tick_delta = 0;
  double yaw_rate = 0.0;    // rad/s
  double accel_long = 0.0;  // m/s^2
  double accel_lat = 0.0;   // m/s^2
};

/// Driveshaft encoder + IMU derived from consecutive simulator states.
/// Fractional ticks carry over between reads, so the absolute tick total is
/// always round(total distance * ticks_per_meter).
class GroundTruthSensors {
 public:
  explicit GroundTruthSensors(const SimConfig& cfg) : cfg_(cfg), rng_(cfg.seed ^ 0x5e9505ULL) {}

  RawSensorSample read(const VehicleState& prev, const VehicleState& next) {
    RawSensorSample out;
    const double moved = std::abs(prev.speed) * cfg_.dt;
    total_distance_ += moved;
    const auto abs_total = static_cast<std::int64_t>(std::llround(total_distance_ * cfg_.ticks_per_meter));
    const std::int64_t emitted = abs_total - abs_ticks_;
    abs_ticks_ = abs_total;
    out.tick_delta = prev.speed < 0 ? -emitted : emitted;
    signed_ticks_ += out.tick_delta;
    out.encoder_ticks = signed_ticks_;

    out.yaw_rate = wrap_angle(next.heading - prev.heading) / cfg_.dt;
    out.accel_long = (next.speed - prev.speed) / cfg_.dt;
    out.accel_lat = prev.speed * out.yaw_rate;
    if (cfg_.noise.yaw_rate > 0) out.yaw_rate += std::normal_distribution<double>(0.0, cfg_.noise.yaw_rate)(rng_);
    if (cfg_.noise.accel > 0) {
      std::normal_distribution<double> n(0.0, cfg_.noise.accel);
      out.accel_long += n(rng_);
      out.accel_lat += n(rng_);
    }
    return out;
  }

  std::int64_t absolute_ticks() const { return abs_ticks_; }
  std::int64_t signed_ticks() const { return signed_ticks_; }
  double total_distance() const { return total_distance_; }

 private:
  SimConfig cfg_;
  std::mt19937_64 rng_;
  double total_distance_ = 0.0;
  std::int64_t abs_ticks_ = 0;
  std::int64_t signed_ticks_ = 0;
};

}  // namespace rcpilot
