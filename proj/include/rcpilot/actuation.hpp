#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>

#include "rcpilot/core.hpp"
#include "rcpilot/vehicle.hpp"

namespace rcpilot {

/// Policy output. Both fields are clamped to [-1, 1] on construction.
/// steering + = left, throttle + = forward.
class NormalizedCommand {
 public:
  NormalizedCommand() = default;
  NormalizedCommand(double steering, double throttle)
      : steering_(clamp_unit(steering)), throttle_(clamp_unit(throttle)) {}

  double steering() const { return steering_; }
  double throttle() const { return throttle_; }

  friend bool operator==(const NormalizedCommand&, const NormalizedCommand&) = default;

 private:
  double steering_ = 0.0;
  double throttle_ = 0.0;
};

enum class PwmChannel : int { steering = 0, throttle = 1 };

constexpr double kPulseMinUs = 1000.0;
constexpr double kPulseMidUs = 1500.0;
constexpr double kPulseMaxUs = 2000.0;

struct PwmCommand {
  PwmChannel channel = PwmChannel::steering;
  double pulse_us = kPulseMidUs;
  int on_ticks = 0;
  double frequency_hz = 60.0;
};

/// PCA9685 12-bit on-time for a pulse width.
inline int pulse_to_ticks(double pulse_us, double frequency_hz) {
  return static_cast<int>(std::lround(pulse_us * frequency_hz * 4096.0 / 1e6));
}

inline double ticks_to_pulse(int on_ticks, double frequency_hz) {
  return static_cast<double>(on_ticks) * 1e6 / (4096.0 * frequency_hz);
}

struct Calibration {
  double steering_trim_us = 0.0;
  double throttle_trim_us = 0.0;
  double frequency_hz = 60.0;

  void validate() const {
    require(frequency_hz > 0 && frequency_hz <= 1000.0 / 2.0, Errc::invalid_argument,
            "frequency_hz must be in (0, 500] so a 2000 us pulse fits the frame");
    require(std::isfinite(steering_trim_us) && std::isfinite(throttle_trim_us), Errc::invalid_argument,
            "trims must be finite");
  }
};

inline void save_calibration(const Calibration& cal, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), Errc::io, "cannot write calibration " + path.string());
  out << "# rcpilot actuation calibration\n";
  out << "steering_trim_us " << cal.steering_trim_us << "\n";
  out << "throttle_trim_us " << cal.throttle_trim_us << "\n";
  out << "frequency_hz " << cal.frequency_hz << "\n";
  require(static_cast<bool>(out), Errc::io, "failed writing " + path.string());
}

inline Calibration load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io, "cannot open calibration " + path.string());
  Calibration cal;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    double value = 0;
    if (!(ss >> key >> value)) throw Error(Errc::parse, path.string() + ":" + std::to_string(lineno) + ": expected 'key value'");
    if (key == "steering_trim_us") cal.steering_trim_us = value;
    else if (key == "throttle_trim_us") cal.throttle_trim_us = value;
    else if (key == "frequency_hz") cal.frequency_hz = value;
    else throw Error(Errc::parse, path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  cal.validate();
  return cal;
}

namespace detail {
inline PwmCommand make_pwm(PwmChannel ch, double value, double trim, double freq) {
  PwmCommand p;
  p.channel = ch;
  p.frequency_hz = freq;
  p.pulse_us = std::clamp(kPulseMidUs + 500.0 * clamp_unit(value) + trim, kPulseMinUs, kPulseMaxUs);
  p.on_ticks = pulse_to_ticks(p.pulse_us, freq);
  return p;
}
}  // namespace detail

/// Affine map -1 -> 1000 us, 0 -> 1500 us, +1 -> 2000 us per channel.
inline std::pair<PwmCommand, PwmCommand> command_to_pwm(const NormalizedCommand& cmd, const Calibration& cal = {}) {
  return {detail::make_pwm(PwmChannel::steering, cmd.steering(), cal.steering_trim_us, cal.frequency_hz),
          detail::make_pwm(PwmChannel::throttle, cmd.throttle(), cal.throttle_trim_us, cal.frequency_hz)};
}

/// Pulse width the servo/ESC actually sees after 12-bit quantization.
inline double effective_pulse(const PwmCommand& p) { return ticks_to_pulse(p.on_ticks, p.frequency_hz); }

// --- brushed ESC -----------------------------------------------------------

enum class EscMode { forward, neutral, braking, reverse_armed, reverse };

inline std::string_view esc_mode_name(EscMode m) {
  switch (m) {
    case EscMode::forward: return "forward";
    case EscMode::neutral: return "neutral";
    case EscMode::braking: return "braking";
    case EscMode::reverse_armed: return "reverse_armed";
    case EscMode::reverse: return "reverse";
  }
  return "?";
}

struct EscConfig {
  double deadband_low_us = 1480.0;
  double deadband_high_us = 1520.0;
  double max_speed = 2.0;
};

struct EscState {
  EscMode mode = EscMode::neutral;
  double last_pulse_us = kPulseMidUs;
  friend bool operator==(const EscState&, const EscState&) = default;
};

/// Forward/brake/reverse state machine of a hobby brushed ESC. Reverse is
/// entered only from reverse_armed, which is the neutral state reached after
/// braking (brake, release to neutral, then reverse).
inline std::pair<EscState, double> esc_step(const EscState& state, double pulse_us, double /*dt*/,
                                            const EscConfig& cfg = {}) {
  require(std::isfinite(pulse_us) && pulse_us >= kPulseMinUs && pulse_us <= kPulseMaxUs, Errc::invalid_argument,
          "pulse " + std::to_string(pulse_us) + " us outside [1000, 2000]");
  const double fwd_span = kPulseMaxUs - cfg.deadband_high_us;
  const double rev_span = cfg.deadband_low_us - kPulseMinUs;
  EscState next = state;
  next.last_pulse_us = pulse_us;
  double target = 0.0;

  if (pulse_us > cfg.deadband_high_us) {
    next.mode = EscMode::forward;
    target = cfg.max_speed * (pulse_us - cfg.deadband_high_us) / fwd_span;
  } else if (pulse_us >= cfg.deadband_low_us) {
    switch (state.mode) {
      case EscMode::braking:
      case EscMode::reverse_armed:
      case EscMode::reverse: next.mode = EscMode::reverse_armed; break;
      default: next.mode = EscMode::neutral; break;
    }
  } else {
    switch (state.mode) {
      case EscMode::reverse_armed:
      case EscMode::reverse:
        next.mode = EscMode::reverse;
        target = -cfg.max_speed * (cfg.deadband_low_us - pulse_us) / rev_span;
        break;
      default: next.mode = EscMode::braking; break;
    }
  }
  return {next, target};
}

/// Stateless throttle -> target speed map (no arming), used when the ESC
/// state machine is not in the loop.
inline double esc_target_speed(double throttle, const EscConfig& cfg = {}) {
  const double pulse = kPulseMidUs + 500.0 * clamp_unit(throttle);
  if (pulse > cfg.deadband_high_us)
    return cfg.max_speed * (pulse - cfg.deadband_high_us) / (kPulseMaxUs - cfg.deadband_high_us);
  if (pulse < cfg.deadband_low_us)
    return -cfg.max_speed * (cfg.deadband_low_us - pulse) / (cfg.deadband_low_us - kPulseMinUs);
  return 0.0;
}

/// Inverse of esc_target_speed for forward speeds.
inline double throttle_for_speed(double speed, const EscConfig& cfg = {}) {
  if (speed <= 0) return 0.0;
  const double pulse = cfg.deadband_high_us + speed / cfg.max_speed * (kPulseMaxUs - cfg.deadband_high_us);
  return clamp_unit((pulse - kPulseMidUs) / 500.0);
}

inline VehicleState step(const VehicleState& s, const NormalizedCommand& cmd, const SimConfig& cfg) {
  EscConfig esc;
  esc.max_speed = cfg.max_speed;
  return step(s, cmd.steering(), esc_target_speed(cmd.throttle(), esc), cfg);
}

/// True when the cumulative encoder count has not changed across the last
/// `window` samples.
inline bool detect_stop(std::span<const std::int64_t> ticks, std::size_t window) {
  require(window >= 2, Errc::invalid_argument, "stop window needs at least 2 samples");
  if (ticks.size() < window) return false;
  const auto last = ticks.subspan(ticks.size() - window);
  for (auto t : last)
    if (t != last.front()) return false;
  return true;
}

}  // namespace rcpilot
