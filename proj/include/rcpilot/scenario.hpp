#pragma once

// Scenario files are plain text, one directive per line, '#' comments:
//
//   format_version 1
//   lane_width 0.6
//   bounds <min_x> <min_y> <max_x> <max_y>
//   spawn <x> <y> <heading>            (optional; default = centerline start)
//   centerline <n>
//   <x> <y>                            (n lines, closed loop: first == last)
//   obstacle                           (repeatable block)
//   center <x> <y>
//   size <width> <depth> <height>
//   color <r> <g> <b>
//   end

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rcpilot/track.hpp"
#include "rcpilot/vehicle.hpp"

namespace rcpilot {

constexpr int kScenarioFormatVersion = 1;

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  friend bool operator==(const Pose&, const Pose&) = default;
};

struct Scenario {
  std::string name = "custom";
  TrackDefinition track;
  std::vector<Obstacle> obstacles;
  std::optional<Pose> spawn;

  Pose spawn_pose() const {
    if (spawn) return *spawn;
    return {track.centerline().front().x, track.centerline().front().y, track.heading_at(0.0)};
  }

  VehicleState spawn_state() const {
    const Pose p = spawn_pose();
    VehicleState s;
    s.x = p.x;
    s.y = p.y;
    s.heading = wrap_angle(p.heading);
    return s;
  }
};

/// Two 0.15 m cubes biased to opposite sides of the lane so that each leaves
/// one side passable.
inline std::vector<Obstacle> default_obstacles(const TrackDefinition& track) {
  std::vector<Obstacle> out;
  const double len = track.length();
  const struct {
    double s_frac;
    double lateral;
  } placements[] = {{0.25, 0.12}, {0.50, -0.12}};
  for (const auto& pl : placements) {
    const double s = pl.s_frac * len;
    const Vec2 t = track.tangent_at(s);
    const Vec2 left{-t.y, t.x};
    Obstacle o;
    o.center = track.point_at(s) + pl.lateral * left;
    require(track.obstacle_intersects_lane(o), Errc::invalid_argument, "decorative obstacle rejected");
    out.push_back(o);
  }
  return out;
}

inline Scenario default_scenario(bool with_obstacles = false) {
  Scenario sc;
  sc.name = with_obstacles ? "obstacles" : "default";
  sc.track = default_track();
  if (with_obstacles) sc.obstacles = default_obstacles(sc.track);
  return sc;
}

inline void write_scenario(const Scenario& sc, std::ostream& out) {
  out << std::setprecision(17);
  out << "# rcpilot scenario: " << sc.name << "\n";
  out << "format_version " << kScenarioFormatVersion << "\n";
  out << "lane_width " << sc.track.lane_width() << "\n";
  const auto& b = sc.track.bounds();
  out << "bounds " << b.min.x << ' ' << b.min.y << ' ' << b.max.x << ' ' << b.max.y << "\n";
  if (sc.spawn) out << "spawn " << sc.spawn->x << ' ' << sc.spawn->y << ' ' << sc.spawn->heading << "\n";
  out << "centerline " << sc.track.centerline().size() << "\n";
  for (const auto& p : sc.track.centerline()) out << p.x << ' ' << p.y << "\n";
  for (const auto& o : sc.obstacles) {
    out << "obstacle\n";
    out << "center " << o.center.x << ' ' << o.center.y << "\n";
    out << "size " << o.width << ' ' << o.depth << ' ' << o.height << "\n";
    out << "color " << int(o.color.r) << ' ' << int(o.color.g) << ' ' << int(o.color.b) << "\n";
    out << "end\n";
  }
}

inline Scenario read_scenario(std::istream& in, const std::string& origin = "<scenario>") {
  int version = -1;
  double lane_width = -1;
  Bounds bounds;
  std::vector<Vec2> centerline;
  Scenario sc;
  sc.name = origin;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) -> Error {
    return Error(Errc::parse, origin + ":" + std::to_string(lineno) + ": " + msg);
  };
  auto next_line = [&](std::istringstream& ss) {
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      ss = std::istringstream(line);
      return true;
    }
    return false;
  };

  std::istringstream ss;
  while (next_line(ss)) {
    std::string key;
    ss >> key;
    if (key == "format_version") {
      if (!(ss >> version)) throw fail("bad format_version");
      if (version != kScenarioFormatVersion) throw Error(Errc::version_mismatch, origin + ": unsupported format_version " + std::to_string(version));
    } else if (key == "lane_width") {
      if (!(ss >> lane_width)) throw fail("bad lane_width");
    } else if (key == "bounds") {
      if (!(ss >> bounds.min.x >> bounds.min.y >> bounds.max.x >> bounds.max.y)) throw fail("bounds needs 4 numbers");
    } else if (key == "spawn") {
      Pose p;
      if (!(ss >> p.x >> p.y >> p.heading)) throw fail("spawn needs x y heading");
      sc.spawn = p;
    } else if (key == "centerline") {
      std::size_t n = 0;
      if (!(ss >> n) || n < 4 || n > 100000) throw fail("centerline needs a point count >= 4");
      for (std::size_t i = 0; i < n; ++i) {
        std::istringstream ps;
        if (!next_line(ps)) throw fail("centerline ended early");
        Vec2 p;
        if (!(ps >> p.x >> p.y)) throw fail("expected 'x y'");
        centerline.push_back(p);
      }
    } else if (key == "obstacle") {
      Obstacle o;
      bool has_center = false;
      for (;;) {
        std::istringstream os;
        if (!next_line(os)) throw fail("obstacle block missing 'end'");
        std::string k;
        os >> k;
        if (k == "end") break;
        if (k == "center") {
          if (!(os >> o.center.x >> o.center.y)) throw fail("center needs x y");
          has_center = true;
        } else if (k == "size") {
          if (!(os >> o.width >> o.depth >> o.height) || o.width <= 0 || o.depth <= 0 || o.height <= 0)
            throw fail("size needs 3 positive numbers");
        } else if (k == "color") {
          int r, g, b;
          if (!(os >> r >> g >> b) || r < 0 || g < 0 || b < 0 || r > 255 || g > 255 || b > 255)
            throw fail("color needs 3 values in 0..255");
          o.color = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
        } else {
          throw fail("unknown obstacle key '" + k + "'");
        }
      }
      if (!has_center) throw fail("obstacle without center");
      sc.obstacles.push_back(o);
    } else {
      throw fail("unknown key '" + key + "'");
    }
  }
  if (version < 0) throw Error(Errc::parse, origin + ": missing format_version");
  if (lane_width <= 0) throw Error(Errc::parse, origin + ": missing or non-positive lane_width");
  sc.track = TrackDefinition(std::move(centerline), lane_width, bounds);
  return sc;
}

inline void save_scenario(const Scenario& sc, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), Errc::io, "cannot write " + path.string());
  write_scenario(sc, out);
}

/// Loads a scenario file, or one of the built-ins "default" / "obstacles".
inline Scenario load_scenario(const std::string& name_or_path) {
  if (name_or_path == "default") return default_scenario(false);
  if (name_or_path == "obstacles") return default_scenario(true);
  std::ifstream in(name_or_path);
  require(static_cast<bool>(in), Errc::io, "cannot open scenario " + name_or_path);
  return read_scenario(in, name_or_path);
}

}  // namespace rcpilot
