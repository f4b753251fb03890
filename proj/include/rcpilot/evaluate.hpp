#pragma once

// EvalReport CSV, one row per run:
//
//   run,pilot,scenario,laps_requested,laps_completed,total_time_s,total_distance_m,
//   mean_speed_mps,mean_lap_time_s,off_track,collisions,blocked,timed_out,overruns,lap_times_s
//
// lap_times_s is a ';'-separated list. mean_speed_mps is always
// total_distance_m / total_time_s.

#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "rcpilot/drive_loop.hpp"

namespace rcpilot {

constexpr double kReferenceLapTime = 28.4;  // s
constexpr double kReferenceSpeed = 0.42;    // m/s

struct EvalConfig {
  int laps = 3;
  std::uint64_t seed = 0;
  /// Uniform spawn perturbation around the scenario spawn pose.
  double spawn_lateral_jitter = 0.0;  // m
  double spawn_heading_jitter = 0.0;  // rad
  /// A run is abandoned after laps * reference lap time * this factor.
  double timeout_factor = 3.0;

  void validate() const {
    require(laps >= 1, Errc::invalid_argument, "laps must be >= 1");
    require(spawn_lateral_jitter >= 0 && spawn_heading_jitter >= 0, Errc::invalid_argument, "jitter must be >= 0");
    require(timeout_factor > 0, Errc::invalid_argument, "timeout_factor must be > 0");
  }
};

struct EvalReport {
  int run = 0;
  std::string pilot;
  std::string scenario;
  int laps_requested = 0;
  int laps_completed = 0;
  std::vector<double> lap_times;
  double total_time = 0.0;
  double total_distance = 0.0;
  double mean_speed = 0.0;
  std::int64_t off_track = 0;
  std::int64_t collisions = 0;
  bool blocked = false;
  bool timed_out = false;
  std::int64_t overruns = 0;

  double mean_lap_time() const {
    return lap_times.empty() ? 0.0 : std::accumulate(lap_times.begin(), lap_times.end(), 0.0) / lap_times.size();
  }
  bool success() const { return laps_completed == laps_requested && off_track == 0 && collisions == 0; }
};

/// Spawn pose for one evaluation run.
inline Pose jittered_spawn(const Scenario& sc, const EvalConfig& cfg, int run) {
  Pose p = sc.spawn_pose();
  if (cfg.spawn_lateral_jitter == 0 && cfg.spawn_heading_jitter == 0) return p;
  std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(run));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double lat = cfg.spawn_lateral_jitter * u(rng);
  const double yaw = cfg.spawn_heading_jitter * u(rng);
  p.x -= std::sin(p.heading) * lat;
  p.y += std::cos(p.heading) * lat;
  p.heading = wrap_angle(p.heading + yaw);
  return p;
}

/// Closed-loop run for cfg.laps laps, stopping early on the first
/// off-track, collision, blocked lane or timeout.
inline EvalReport evaluate(const Scenario& scenario, const DriveConfig& drive, DriveMode mode,
                           std::shared_ptr<Pilot> pilot, const EvalConfig& cfg, int run = 0) {
  cfg.validate();
  require(mode != DriveMode::user, Errc::invalid_argument, "evaluation needs the expert or a model");
  Scenario sc = scenario;
  sc.spawn = jittered_spawn(scenario, cfg, run);
  DriveLoop loop(sc, drive, pilot);
  loop.request_mode(mode);

  EvalReport rep;
  rep.run = run;
  rep.pilot = mode == DriveMode::expert ? "expert" : (pilot ? pilot->name() : "auto");
  rep.scenario = scenario.name;
  rep.laps_requested = cfg.laps;
  const auto max_ticks =
      static_cast<std::uint64_t>(std::ceil(cfg.laps * kReferenceLapTime * cfg.timeout_factor / drive.sim.dt));
  for (;;) {
    const auto r = loop.tick();
    if (r.snapshot.blocked) rep.blocked = true;
    if (loop.laps_completed() >= cfg.laps || loop.off_track_events() > 0 || loop.collisions() > 0 || rep.blocked)
      break;
    if (loop.ticks() >= max_ticks) {
      rep.timed_out = true;
      break;
    }
  }
  rep.laps_completed = static_cast<int>(std::min<std::int64_t>(loop.laps_completed(), cfg.laps));
  rep.lap_times.assign(loop.lap_times().begin(), loop.lap_times().begin() + rep.laps_completed);
  rep.total_time = loop.sim_time();
  rep.total_distance = loop.distance();
  rep.mean_speed = rep.total_time > 0 ? rep.total_distance / rep.total_time : 0.0;
  rep.off_track = loop.off_track_events();
  rep.collisions = loop.collisions();
  rep.overruns = loop.overruns();
  return rep;
}

inline void write_eval_csv_header(std::ostream& out) {
  out << "run,pilot,scenario,laps_requested,laps_completed,total_time_s,total_distance_m,mean_speed_mps,"
         "mean_lap_time_s,off_track,collisions,blocked,timed_out,overruns,lap_times_s\n";
}

inline void write_eval_csv_row(std::ostream& out, const EvalReport& r) {
  std::ostringstream laps;
  laps << std::setprecision(10);
  for (std::size_t i = 0; i < r.lap_times.size(); ++i) laps << (i ? ";" : "") << r.lap_times[i];
  out << std::setprecision(10) << r.run << ',' << r.pilot << ',' << r.scenario << ',' << r.laps_requested << ','
      << r.laps_completed << ',' << r.total_time << ',' << r.total_distance << ',' << r.mean_speed << ','
      << r.mean_lap_time() << ',' << r.off_track << ',' << r.collisions << ',' << int(r.blocked) << ','
      << int(r.timed_out) << ',' << r.overruns << ',' << laps.str() << '\n';
}

/// Human summary with the reference lap time and speed alongside.
inline void write_eval_summary(std::ostream& out, const std::vector<EvalReport>& runs) {
  if (runs.empty()) return;
  std::size_t ok = 0, laps = 0, laps_req = 0;
  double dist = 0, time = 0;
  std::vector<double> lap_times;
  for (const auto& r : runs) {
    ok += r.success();
    laps += static_cast<std::size_t>(r.laps_completed);
    laps_req += static_cast<std::size_t>(r.laps_requested);
    dist += r.total_distance;
    time += r.total_time;
    lap_times.insert(lap_times.end(), r.lap_times.begin(), r.lap_times.end());
  }
  const double mean_lap =
      lap_times.empty() ? 0.0 : std::accumulate(lap_times.begin(), lap_times.end(), 0.0) / lap_times.size();
  const double speed = time > 0 ? dist / time : 0.0;
  out << std::fixed << std::setprecision(2);
  out << "pilot " << runs.front().pilot << " on " << runs.front().scenario << ": " << ok << "/" << runs.size()
      << " runs clean, " << laps << "/" << laps_req << " laps\n";
  if (!lap_times.empty())
    out << "  mean lap time  " << mean_lap << " s   (reference " << kReferenceLapTime << " s, "
        << std::showpos << 100.0 * (mean_lap - kReferenceLapTime) / kReferenceLapTime << std::noshowpos << "%)\n";
  else
    out << "  mean lap time  n/a   (reference " << kReferenceLapTime << " s)\n";
  out << "  mean speed     " << speed << " m/s (reference " << kReferenceSpeed << " m/s)\n";
  std::int64_t off = 0, hits = 0;
  for (const auto& r : runs) {
    off += r.off_track;
    hits += r.collisions;
  }
  out << "  off-track " << off << ", collisions " << hits << "\n";
  out << std::defaultfloat;
}

}  // namespace rcpilot
