#pragma once

#include <atomic>
#include <chrono>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <thread>

#include "json.hpp"
#include "rcpilot/actuation.hpp"
#include "rcpilot/expert.hpp"
#include "rcpilot/fpv.hpp"
#include "rcpilot/nn/models.hpp"
#include "rcpilot/scenario.hpp"
#include "rcpilot/sensor_link.hpp"
#include "rcpilot/tub.hpp"

namespace rcpilot {

enum class DriveMode { user, expert, autopilot };

inline std::string drive_mode_name(DriveMode m) {
  switch (m) {
    case DriveMode::user: return "user";
    case DriveMode::expert: return "expert";
    case DriveMode::autopilot: return "auto";
  }
  return "user";
}

inline DriveMode parse_drive_mode(const std::string& s) {
  if (s == "user") return DriveMode::user;
  if (s == "expert") return DriveMode::expert;
  if (s == "auto") return DriveMode::autopilot;
  throw Error(Errc::invalid_argument, "unknown mode '" + s + "' (expected user, expert or auto)");
}

inline tub::RecordMode record_mode(DriveMode m) {
  switch (m) {
    case DriveMode::user: return tub::RecordMode::user;
    case DriveMode::expert: return tub::RecordMode::expert;
    case DriveMode::autopilot: return tub::RecordMode::autopilot;
  }
  return tub::RecordMode::user;
}

// --- clocks ------------------------------------------------------------------

class Clock {
 public:
  virtual ~Clock() = default;
  virtual double now() = 0;  // seconds
  virtual void sleep_until(double t) = 0;
};

/// Time only moves when someone advances it. The loop's default: each tick
/// jumps to the next deadline, so runs are machine-independent.
class ManualClock : public Clock {
 public:
  double now() override { return t_.load(); }
  void sleep_until(double t) override {
    double cur = t_.load();
    while (cur < t && !t_.compare_exchange_weak(cur, t)) {
    }
  }
  void advance(double dt) {
    double cur = t_.load();
    while (!t_.compare_exchange_weak(cur, cur + dt)) {
    }
  }

 private:
  std::atomic<double> t_{0.0};
};

class SteadyClock : public Clock {
 public:
  double now() override { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }
  void sleep_until(double t) override {
    std::this_thread::sleep_until(start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                               std::chrono::duration<double>(t)));
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// --- pilots ------------------------------------------------------------------

/// Image-to-command policy used in Auto mode.
class Pilot {
 public:
  virtual ~Pilot() = default;
  virtual NormalizedCommand infer(const CameraFrame& frame) = 0;
  virtual void reset() {}
  virtual std::string name() const = 0;
};

/// Runs a network. The RNN variant keeps the last T frames; until T frames
/// have been seen the oldest one is repeated.
class ModelPilot : public Pilot {
 public:
  explicit ModelPilot(std::shared_ptr<nn::Model<float>> model) : model_(std::move(model)) {
    require(model_ != nullptr, Errc::no_model, "pilot needs a model");
  }

  NormalizedCommand infer(const CameraFrame& frame) override {
    const std::size_t t = window_length();
    history_.push_back(to_model_input<float>(frame));
    while (history_.size() > t) history_.pop_front();
    nn::Tensor<float> x(model_->input_shape());
    const std::size_t pad = t - history_.size();
    for (std::size_t k = 0; k < t; ++k) {
      const auto& src = history_[k < pad ? 0 : k - pad];
      std::copy(src.data(), src.data() + kFrameBytes, x.data() + k * kFrameBytes);
    }
    last_input_ = x;
    const auto [steer, thr] = model_->predict(x);
    return {steer, thr};
  }

  void reset() override { history_.clear(); }
  std::string name() const override { return nn::architecture_name(model_->architecture()); }

  std::size_t window_length() const {
    return model_->architecture() == nn::Architecture::rnn ? model_->config().sequence_length : 1;
  }
  const nn::Tensor<float>& last_input() const { return last_input_; }
  nn::Model<float>& model() { return *model_; }

 private:
  std::shared_ptr<nn::Model<float>> model_;
  std::deque<nn::Tensor<float>> history_;
  nn::Tensor<float> last_input_;
};

// --- car geometry ------------------------------------------------------------

struct CarBody {
  double length = 0.36;  // m
  double width = 0.19;   // m
};

/// Oriented car rectangle against an axis-aligned obstacle box (separating
/// axis test on the four candidate axes).
inline bool car_collides(const VehicleState& s, const Obstacle& o, const CarBody& body = {}) {
  const Vec2 c = s.position();
  const Vec2 f{std::cos(s.heading), std::sin(s.heading)};
  const Vec2 l{-f.y, f.x};
  const double hl = body.length / 2, hw = body.width / 2;
  const Vec2 oc = o.center;
  const double ox = o.width / 2, oy = o.depth / 2;
  const Vec2 d = oc - c;
  // World axes.
  if (std::abs(d.x) > ox + hl * std::abs(f.x) + hw * std::abs(l.x)) return false;
  if (std::abs(d.y) > oy + hl * std::abs(f.y) + hw * std::abs(l.y)) return false;
  // Car axes.
  if (std::abs(d.dot(f)) > hl + ox * std::abs(f.x) + oy * std::abs(f.y)) return false;
  if (std::abs(d.dot(l)) > hw + ox * std::abs(l.x) + oy * std::abs(l.y)) return false;
  return true;
}

// --- telemetry ---------------------------------------------------------------

/// Flat snapshot of one tick. Every field is always present.
struct TelemetrySnapshot {
  double timestamp = 0.0;  // simulated seconds since start
  std::string mode = "user";
  double steering = 0.0;   // applied command
  double throttle = 0.0;
  double speed = 0.0;      // ground truth, m/s
  std::int64_t encoder_ticks = 0;
  double yaw_rate = 0.0;   // rad/s, as decoded from the sensor link
  std::int64_t lap = 0;    // completed laps
  double lap_time = 0.0;   // seconds into the current lap
  double last_lap_time = 0.0;
  std::int64_t overruns = 0;
  bool recording = false;
  std::int64_t frame_id = 0;
  std::int64_t tub_records = 0;
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  bool off_track = false;
  bool blocked = false;
  std::int64_t collisions = 0;
  std::string esc_mode = "neutral";
};

inline nlohmann::json to_json(const TelemetrySnapshot& s) {
  return {{"timestamp", s.timestamp}, {"mode", s.mode},
          {"steering", s.steering},   {"throttle", s.throttle},
          {"speed", s.speed},         {"encoder_ticks", s.encoder_ticks},
          {"yaw_rate", s.yaw_rate},   {"lap", s.lap},
          {"lap_time", s.lap_time},   {"last_lap_time", s.last_lap_time},
          {"overruns", s.overruns},   {"recording", s.recording},
          {"frame_id", s.frame_id},   {"tub_records", s.tub_records},
          {"x", s.x},                 {"y", s.y},
          {"heading", s.heading},     {"off_track", s.off_track},
          {"blocked", s.blocked},     {"collisions", s.collisions},
          {"esc_mode", s.esc_mode}};
}

inline void write_snapshot_csv_header(std::ostream& out) {
  out << "timestamp,mode,steering,throttle,speed,encoder_ticks,yaw_rate,lap,lap_time,last_lap_time,overruns,"
         "recording,frame_id,tub_records,x,y,heading,off_track,blocked,collisions,esc_mode\n";
}

inline void write_snapshot_csv_row(std::ostream& out, const TelemetrySnapshot& s) {
  out << s.timestamp << ',' << s.mode << ',' << s.steering << ',' << s.throttle << ',' << s.speed << ','
      << s.encoder_ticks << ',' << s.yaw_rate << ',' << s.lap << ',' << s.lap_time << ',' << s.last_lap_time << ','
      << s.overruns << ',' << int(s.recording) << ',' << s.frame_id << ',' << s.tub_records << ',' << s.x << ','
      << s.y << ',' << s.heading << ',' << int(s.off_track) << ',' << int(s.blocked) << ',' << s.collisions << ','
      << s.esc_mode << '\n';
}

/// Last-value-wins cell shared between one writer and any number of readers.
/// The lock covers only the pointer swap.
template <typename T>
class LatestCell {
 public:
  void store(std::shared_ptr<const T> v) {
    std::lock_guard lock(m_);
    v_ = std::move(v);
  }
  std::shared_ptr<const T> load() const {
    std::lock_guard lock(m_);
    return v_;
  }

 private:
  mutable std::mutex m_;
  std::shared_ptr<const T> v_;
};

// --- the loop ----------------------------------------------------------------

struct DriveConfig {
  SimConfig sim;
  Calibration calibration;
  ExpertConfig expert;
  CameraModel camera;
  CarBody body;
  double throttle_slew = 0.5;          // max throttle change per tick
  double auto_throttle_ceiling = 0.6;  // Auto-mode throttle upper bound
  /// Collection perturbation: the executed expert steering gets an offset
  /// drawn from N(0, steering_noise) and held for noise_hold_ticks. The
  /// recorded label stays the clean expert command.
  double steering_noise = 0.0;
  std::size_t noise_hold_ticks = 10;
  /// Render a frame every tick even when nothing consumes it (live UI).
  bool render_always = false;

  void validate() const {
    sim.validate();
    calibration.validate();
    expert.validate();
    require(throttle_slew > 0, Errc::invalid_argument, "throttle_slew must be > 0");
    require(auto_throttle_ceiling > 0 && auto_throttle_ceiling <= 1, Errc::invalid_argument,
            "auto_throttle_ceiling must be in (0, 1]");
    require(steering_noise >= 0 && noise_hold_ticks >= 1, Errc::invalid_argument, "bad steering noise settings");
  }
};

struct TickResult {
  TelemetrySnapshot snapshot;
  NormalizedCommand label;    // what the active driver asked for
  NormalizedCommand applied;  // what reached the PWM stage
  bool lap_completed = false;
  bool off_track_event = false;
  bool collision_event = false;
  bool recorded = false;
};

class DriveLoop {
 public:
  DriveLoop(Scenario scenario, DriveConfig cfg, std::shared_ptr<Pilot> pilot = nullptr,
            std::shared_ptr<Clock> clock = std::make_shared<ManualClock>())
      : scenario_(std::move(scenario)),
        cfg_(std::move(cfg)),
        pilot_(std::move(pilot)),
        clock_(std::move(clock)),
        renderer_(scenario_.track, cfg_.camera),
        sensors_(cfg_.sim),
        rng_(cfg_.sim.seed ^ 0xd1e5e1ULL) {
    cfg_.validate();
    require(clock_ != nullptr, Errc::invalid_argument, "loop needs a clock");
    esc_cfg_.max_speed = cfg_.sim.max_speed;
    state_ = scenario_.spawn_state();
    require(!off_track(state_.position(), scenario_.track), Errc::bad_spawn,
            "spawn pose is off the track (lateral offset " +
                std::to_string(lap_progress(state_.position(), scenario_.track).lateral_offset) + " m)");
    s_prev_ = scenario_.track.project(state_.position()).s;
  }

  // Control surface. Safe to call from any thread; applied at the next tick.

  bool has_pilot() const { return pilot_ != nullptr; }

  void request_mode(DriveMode m) {
    require(m != DriveMode::autopilot || has_pilot(), Errc::no_model, "auto mode needs a loaded model");
    std::lock_guard lock(control_m_);
    pending_mode_ = m;
  }

  void request_recording(bool on) {
    std::lock_guard lock(control_m_);
    const DriveMode effective = pending_mode_.value_or(mode_.load());
    require(!on || effective != DriveMode::autopilot, Errc::invalid_state, "recording is not available in auto mode");
    require(!on || recorder_ != nullptr, Errc::invalid_state, "no tub attached for recording");
    pending_recording_ = on;
  }

  void set_teleop(NormalizedCommand cmd) {
    std::lock_guard lock(control_m_);
    teleop_ = cmd;
  }

  /// Mode that will be active after the next tick boundary.
  DriveMode requested_mode() const {
    std::lock_guard lock(control_m_);
    return pending_mode_.value_or(mode_.load());
  }

  /// Recording state that will be active after the next tick boundary.
  bool requested_recording() const {
    std::lock_guard lock(control_m_);
    if (pending_mode_ == DriveMode::autopilot) return false;
    return pending_recording_.value_or(recording_);
  }

  NormalizedCommand teleop() const {
    std::lock_guard lock(control_m_);
    return teleop_;
  }

  bool has_recorder() const { return recorder_ != nullptr; }

  /// Attaches a tub. Not thread-safe; call before running.
  void attach_recorder(tub::TubWriter* writer, std::int64_t run = 0) {
    recorder_ = writer;
    run_id_ = run;
  }

  /// Copies the raw sensor-link byte stream to `out`. Not thread-safe.
  void capture_sensor_link(std::ostream* out) { capture_ = out; }

  /// Called on the loop thread after every tick.
  void on_tick(std::function<void(const TickResult&)> fn) { on_tick_ = std::move(fn); }

  TickResult tick() {
    apply_pending();
    const DriveMode mode = mode_.load();
    const auto& track = scenario_.track;
    const double now = static_cast<double>(tick_) * cfg_.sim.dt;
    TickResult res;

    const bool rec = recording_ && recorder_ != nullptr && mode != DriveMode::autopilot;
    std::shared_ptr<CameraFrame> frame;
    if (rec || mode == DriveMode::autopilot || cfg_.render_always) {
      frame = std::make_shared<CameraFrame>(renderer_.render(state_, scenario_.obstacles));
      frame->frame_id = tick_;
      frame->timestamp = now;
    }

    NormalizedCommand label;
    NormalizedCommand drive;
    bool blocked = false;
    bool overrun = false;
    switch (mode) {
      case DriveMode::user: {
        std::lock_guard lock(control_m_);
        label = teleop_;
        drive = label;
        break;
      }
      case DriveMode::expert: {
        const auto d = expert_pilot(state_, track, scenario_.obstacles, cfg_.expert, cfg_.sim);
        label = d.command;
        blocked = d.blocked;
        if (cfg_.steering_noise > 0 && !blocked) {
          if (tick_ % cfg_.noise_hold_ticks == 0)
            noise_offset_ = std::normal_distribution<double>(0.0, cfg_.steering_noise)(rng_);
          drive = NormalizedCommand(label.steering() + noise_offset_, label.throttle());
        } else {
          drive = label;
        }
        break;
      }
      case DriveMode::autopilot: {
        const double t0 = clock_->now();
        const NormalizedCommand raw = pilot_->infer(*frame);
        if (clock_->now() - t0 > cfg_.sim.dt) {
          overrun = true;
          label = last_label_;
        } else {
          label = clamp_auto(raw);
        }
        drive = label;
        break;
      }
    }
    last_label_ = label;

    // Throttle slew applies in every mode, so mode switches cannot jump.
    const double thr = std::clamp(drive.throttle(), applied_.throttle() - cfg_.throttle_slew,
                                  applied_.throttle() + cfg_.throttle_slew);
    applied_ = NormalizedCommand(drive.steering(), thr);

    const auto [steer_pwm, thr_pwm] = command_to_pwm(applied_, cfg_.calibration);
    // 12-bit quantization can land just outside the range (2000 us at 60 Hz
    // is 492 ticks = 2001.95 us); servo and ESC saturate there.
    auto seen = [](const PwmCommand& p) { return std::clamp(effective_pulse(p), kPulseMinUs, kPulseMaxUs); };
    const double servo = (seen(steer_pwm) - kPulseMidUs) / 500.0;
    auto [esc_next, target_speed] = esc_step(esc_, seen(thr_pwm), cfg_.sim.dt, esc_cfg_);
    esc_ = esc_next;

    const VehicleState prev = state_;
    state_ = step(state_, servo, target_speed, cfg_.sim);

    const auto raw = sensors_.read(prev, state_);
    const auto wire = sensor_link::encode(raw, static_cast<std::uint8_t>(tick_ & 0xff));
    if (capture_) capture_->write(reinterpret_cast<const char*>(wire.data()), static_cast<std::streamsize>(wire.size()));
    parser_.feed(wire, [&](const sensor_link::SensorFrame& f) { last_sensor_ = f; });

    // Progress, laps, off-track and collisions on the post-step pose.
    const double s = track.project(state_.position()).s;
    progress_ += track.s_delta(s_prev_, s);
    s_prev_ = s;
    const double t_after = now + cfg_.sim.dt;
    const auto laps = static_cast<std::int64_t>(std::floor(progress_ / track.length()));
    if (laps > laps_done_) {
      last_lap_time_ = t_after - lap_start_;
      lap_times_.push_back(last_lap_time_);
      lap_start_ = t_after;
      laps_done_ = laps;
      res.lap_completed = true;
    }
    const bool off = off_track(state_.position(), track);
    if (off && !was_off_) {
      ++off_track_events_;
      res.off_track_event = true;
    }
    was_off_ = off;
    bool hit = false;
    for (const auto& o : scenario_.obstacles) hit = hit || car_collides(state_, o, cfg_.body);
    if (hit && !was_hit_) {
      ++collisions_;
      res.collision_event = true;
    }
    was_hit_ = hit;
    distance_ += std::abs(prev.speed) * cfg_.sim.dt;

    if (rec) {
      recorder_->append(*frame, label, record_mode(mode), now, laps_done_, run_id_);
      res.recorded = true;
    }

    if (overrun) ++overruns_;
    auto& snap = res.snapshot;
    snap.timestamp = t_after;
    snap.mode = drive_mode_name(mode);
    snap.steering = applied_.steering();
    snap.throttle = applied_.throttle();
    snap.speed = state_.speed;
    snap.encoder_ticks = last_sensor_.encoder_ticks;
    snap.yaw_rate = last_sensor_.yaw_rate_rad_s();
    snap.lap = laps_done_;
    snap.lap_time = t_after - lap_start_;
    snap.last_lap_time = last_lap_time_;
    snap.overruns = overruns_;
    snap.recording = rec;
    snap.frame_id = static_cast<std::int64_t>(tick_);
    snap.tub_records = recorder_ ? static_cast<std::int64_t>(recorder_->size()) : 0;
    snap.x = state_.x;
    snap.y = state_.y;
    snap.heading = state_.heading;
    snap.off_track = off;
    snap.blocked = blocked;
    snap.collisions = collisions_;
    snap.esc_mode = std::string(esc_mode_name(esc_.mode));
    res.label = label;
    res.applied = applied_;

    snapshot_.store(std::make_shared<const TelemetrySnapshot>(snap));
    if (frame) frame_.store(frame);
    if (mode == DriveMode::autopilot) {
      if (auto* mp = dynamic_cast<ModelPilot*>(pilot_.get()))
        pilot_input_.store(std::make_shared<const nn::Tensor<float>>(mp->last_input()));
    }
    ++tick_;
    if (on_tick_) on_tick_(res);
    return res;
  }

  /// Runs `ticks` ticks (0 = until `stop` is set) on the loop clock. A tick
  /// that ends after its deadline counts as an overrun; the schedule then
  /// restarts from now instead of bursting to catch up. dt never stretches.
  void run(std::size_t ticks, const std::atomic<bool>* stop = nullptr) {
    double deadline = clock_->now();
    for (std::size_t i = 0; ticks == 0 || i < ticks; ++i) {
      if (stop && stop->load()) break;
      const auto before = overruns_;
      tick();
      deadline += cfg_.sim.dt;
      const double now = clock_->now();
      if (now > deadline + 1e-9) {
        if (overruns_ == before) ++overruns_;
        deadline = now;
      } else {
        clock_->sleep_until(deadline);
      }
    }
  }

  // Loop-thread state.
  const VehicleState& state() const { return state_; }
  DriveMode mode() const { return mode_.load(); }
  std::uint64_t ticks() const { return tick_; }
  std::int64_t overruns() const { return overruns_; }
  std::int64_t laps_completed() const { return laps_done_; }
  const std::vector<double>& lap_times() const { return lap_times_; }
  std::int64_t off_track_events() const { return off_track_events_; }
  std::int64_t collisions() const { return collisions_; }
  double distance() const { return distance_; }
  double progress() const { return progress_; }
  double sim_time() const { return static_cast<double>(tick_) * cfg_.sim.dt; }
  const Scenario& scenario() const { return scenario_; }
  const DriveConfig& config() const { return cfg_; }
  Clock& clock() { return *clock_; }
  const sensor_link::ParseDiagnostics& link_diagnostics() const { return parser_.diagnostics(); }

  // Cross-thread reads.
  std::shared_ptr<const TelemetrySnapshot> latest_snapshot() const { return snapshot_.load(); }
  std::shared_ptr<const CameraFrame> latest_frame() const { return frame_.load(); }
  std::shared_ptr<const nn::Tensor<float>> latest_pilot_input() const { return pilot_input_.load(); }

 private:
  NormalizedCommand clamp_auto(NormalizedCommand c) const {
    return NormalizedCommand(c.steering(), std::min(c.throttle(), cfg_.auto_throttle_ceiling));
  }

  void apply_pending() {
    std::lock_guard lock(control_m_);
    if (pending_mode_) {
      if (*pending_mode_ != mode_.load()) {
        if (*pending_mode_ == DriveMode::autopilot) {
          recording_ = false;
          pilot_->reset();
        }
        mode_.store(*pending_mode_);
      }
      pending_mode_.reset();
    }
    if (pending_recording_) {
      recording_ = *pending_recording_ && mode_.load() != DriveMode::autopilot;
      pending_recording_.reset();
    }
  }

  Scenario scenario_;
  DriveConfig cfg_;
  std::shared_ptr<Pilot> pilot_;
  std::shared_ptr<Clock> clock_;
  FpvRenderer renderer_;
  GroundTruthSensors sensors_;
  sensor_link::StreamParser parser_;
  sensor_link::SensorFrame last_sensor_;
  EscConfig esc_cfg_;
  EscState esc_;
  VehicleState state_;
  std::mt19937_64 rng_;
  double noise_offset_ = 0.0;

  mutable std::mutex control_m_;
  std::optional<DriveMode> pending_mode_;
  std::optional<bool> pending_recording_;
  NormalizedCommand teleop_;
  std::atomic<DriveMode> mode_{DriveMode::user};
  bool recording_ = false;

  std::ostream* capture_ = nullptr;
  tub::TubWriter* recorder_ = nullptr;
  std::int64_t run_id_ = 0;
  std::function<void(const TickResult&)> on_tick_;

  NormalizedCommand last_label_;
  NormalizedCommand applied_;
  std::uint64_t tick_ = 0;
  std::int64_t overruns_ = 0;
  double s_prev_ = 0.0;
  double progress_ = 0.0;
  double lap_start_ = 0.0;
  double last_lap_time_ = 0.0;
  std::int64_t laps_done_ = 0;
  std::vector<double> lap_times_;
  bool was_off_ = false;
  bool was_hit_ = false;
  std::int64_t off_track_events_ = 0;
  std::int64_t collisions_ = 0;
  double distance_ = 0.0;

  LatestCell<TelemetrySnapshot> snapshot_;
  LatestCell<CameraFrame> frame_;
  LatestCell<nn::Tensor<float>> pilot_input_;
};

}  // namespace rcpilot
