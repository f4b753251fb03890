#pragma once

#include "rcpilot/drive_loop.hpp"

namespace rcpilot {

struct CollectConfig {
  std::size_t frames = 10000;
  /// Executed-steering perturbation; see DriveConfig::steering_noise.
  double steering_noise = 0.3;
  std::size_t noise_hold_ticks = 10;
  /// Run id of the first run; appending to a tub continues after its last run.
  std::int64_t first_run = 0;
};

struct CollectResult {
  std::size_t records = 0;
  std::size_t runs = 0;        // a run restarts after the car leaves the lane
  std::int64_t laps = 0;       // completed laps summed over runs
  bool blocked = false;        // expert found the lane impassable; tub is partial
};

/// Expert drives with recording on until `cfg.frames` records exist. If a
/// perturbation pushes the car off the lane, the run ends and a new run
/// starts on the centerline at the same arc length.
inline CollectResult collect(const Scenario& scenario, DriveConfig drive, tub::TubWriter& writer,
                             const CollectConfig& cfg) {
  require(cfg.frames >= 1, Errc::invalid_argument, "frames must be >= 1");
  drive.steering_noise = cfg.steering_noise;
  drive.noise_hold_ticks = cfg.noise_hold_ticks;
  CollectResult out;
  Scenario sc = scenario;
  const std::size_t start = writer.size();
  std::int64_t run = cfg.first_run;
  while (writer.size() - start < cfg.frames) {
    drive.sim.seed = drive.sim.seed * 6364136223846793005ULL + 1442695040888963407ULL;
    DriveLoop loop(sc, drive);
    loop.attach_recorder(&writer, run);
    loop.request_mode(DriveMode::expert);
    loop.request_recording(true);
    ++out.runs;
    while (writer.size() - start < cfg.frames) {
      const auto r = loop.tick();
      if (r.snapshot.blocked) {
        out.blocked = true;
        break;
      }
      if (r.off_track_event) break;
    }
    out.laps += loop.laps_completed();
    if (out.blocked) break;
    const double s = sc.track.project(loop.state().position()).s;
    sc.spawn = Pose{sc.track.point_at(s).x, sc.track.point_at(s).y, sc.track.heading_at(s)};
    ++run;
  }
  out.records = writer.size() - start;
  return out;
}

}  // namespace rcpilot
