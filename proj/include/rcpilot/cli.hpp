#pragma once

// Command-line front end. Exit codes:
//   0 ok, 1 error, 2 usage, 3 bad scenario, 4 missing or unusable model,
//   5 port busy, 6 expert blocked (collect kept a partial tub)

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "rcpilot/collect.hpp"
#include "rcpilot/evaluate.hpp"
#include "rcpilot/nn/serialize.hpp"
#include "rcpilot/nn/train.hpp"
#include "rcpilot/telemetry.hpp"

namespace rcpilot::cli {

enum Exit : int { ok = 0, error = 1, usage = 2, bad_scenario = 3, missing_model = 4, port_busy = 5, expert_blocked = 6 };

/// Carries an exit code out of a command.
class Failure : public std::runtime_error {
 public:
  Failure(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

inline std::atomic<bool>& stop_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

extern "C" inline void on_stop_signal(int) { stop_flag() = true; }

enum class Format { text, csv, json };

using Fields = std::vector<std::pair<std::string, nlohmann::json>>;

inline std::string csv_cell(const nlohmann::json& v) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  }
  if (v.is_array() || v.is_object()) return csv_cell(nlohmann::json(v.dump()));
  return v.dump();
}

/// One result record: "key value" lines, a CSV header+row, or a JSON object.
inline void emit(std::ostream& out, Format f, const Fields& fields) {
  switch (f) {
    case Format::text: {
      std::size_t w = 0;
      for (const auto& [k, v] : fields) w = std::max(w, k.size());
      for (const auto& [k, v] : fields)
        out << std::left << std::setw(static_cast<int>(w) + 2) << k << (v.is_string() ? v.get<std::string>() : v.dump())
            << '\n';
      break;
    }
    case Format::csv:
      for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << fields[i].first;
      out << '\n';
      for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << csv_cell(fields[i].second);
      out << '\n';
      break;
    case Format::json: {
      nlohmann::ordered_json j = nlohmann::ordered_json::object();
      for (const auto& [k, v] : fields) j[k] = v;
      out << j.dump(2) << '\n';
      break;
    }
  }
}

struct Globals {
  std::uint64_t seed = 1;
  std::string format = "text";
  std::string calibration;
  std::string host = "127.0.0.1";
  int port = 8887;
  std::string ui_dir;
  bool quiet = false;

  Format fmt() const { return format == "csv" ? Format::csv : format == "json" ? Format::json : Format::text; }
};

inline Scenario scenario_or_fail(const std::string& name, bool obstacles) {
  try {
    Scenario sc = load_scenario(name);
    if (obstacles && sc.obstacles.empty()) {
      sc.obstacles = default_obstacles(sc.track);
      if (sc.name == "default") sc.name = "obstacles";
    }
    // Spawn must be usable before anything else runs.
    require(!off_track(sc.spawn_state().position(), sc.track), Errc::bad_spawn, "spawn pose is off the track");
    return sc;
  } catch (const Error& e) {
    throw Failure(bad_scenario, "bad scenario '" + name + "': " + e.what());
  }
}

inline std::shared_ptr<nn::Model<float>> model_or_fail(const std::string& path, const std::string& type) {
  if (!std::filesystem::exists(path)) throw Failure(missing_model, "model file '" + path + "' not found");
  try {
    std::shared_ptr<nn::Model<float>> m = nn::load_model<float>(path);
    if (!type.empty() && nn::architecture_name(m->architecture()) != type)
      throw Failure(missing_model, "model file '" + path + "' holds a " + nn::architecture_name(m->architecture()) +
                                       " model, --type says " + type);
    return m;
  } catch (const Error& e) {
    throw Failure(missing_model, "cannot load model '" + path + "': " + e.what());
  }
}

inline DriveConfig drive_config(const Globals& g) {
  DriveConfig cfg;
  cfg.sim.seed = g.seed;
  if (!g.calibration.empty()) cfg.calibration = load_calibration(g.calibration);
  return cfg;
}

/// Opens DIR as a tub for appending, creating it if needed. Returns the
/// writer and the first unused run id.
inline std::pair<tub::TubWriter, std::int64_t> open_tub(const std::filesystem::path& dir, const Scenario& sc,
                                                        const DriveConfig& cfg) {
  if (std::filesystem::exists(dir / "manifest.jsonl")) {
    auto w = tub::TubWriter::open(dir);
    std::int64_t next_run = 0;
    for (const auto& r : tub::Tub(dir).records()) next_run = std::max(next_run, r.run + 1);
    return {std::move(w), next_run};
  }
  tub::TubMeta meta;
  meta.sim_config = tub::sim_config_json(cfg.sim, sc.name);
  return {tub::TubWriter::create(dir, meta), 0};
}

inline Fields tub_fields(const tub::TubStats& st) {
  nlohmann::json modes = nlohmann::json::object();
  for (const auto& [k, v] : st.modes) modes[k] = v;
  return {{"records", st.records},
          {"runs", st.runs},
          {"max_lap", st.max_lap},
          {"duration_s", st.duration_s},
          {"modes", modes},
          {"steering_hist", st.steering_hist},
          {"throttle_hist", st.throttle_hist}};
}

// --- commands ------------------------------------------------------------------

struct DriveArgs {
  std::string scenario = "default";
  bool obstacles = false;
  std::string model, type, mode = "user", record, log, capture;
  bool serve = false;
  std::size_t ticks = 600;
  bool ticks_set = false;
};

inline int cmd_drive(const Globals& g, const DriveArgs& a, std::ostream& out, std::ostream& err) {
  const DriveMode mode = parse_drive_mode(a.mode);
  if (mode == DriveMode::autopilot && a.model.empty()) throw Failure(usage, "--mode auto needs --model");
  if (mode == DriveMode::autopilot && !a.record.empty())
    throw Failure(usage, "--record is not available with --mode auto");
  const Scenario sc = scenario_or_fail(a.scenario, a.obstacles);
  std::shared_ptr<nn::Model<float>> model;
  std::shared_ptr<Pilot> pilot;
  if (!a.model.empty()) {
    model = model_or_fail(a.model, a.type);
    pilot = std::make_shared<ModelPilot>(model);
  }

  DriveConfig cfg = drive_config(g);
  cfg.render_always = a.serve;
  std::shared_ptr<Clock> clock;
  if (a.serve) clock = std::make_shared<SteadyClock>();
  else clock = std::make_shared<ManualClock>();
  DriveLoop loop(sc, cfg, pilot, clock);

  std::optional<tub::TubWriter> writer;
  if (!a.record.empty()) {
    auto [w, run] = open_tub(a.record, sc, cfg);
    writer.emplace(std::move(w));
    loop.attach_recorder(&*writer, run);
  }
  std::optional<SnapshotLog> log;
  std::string log_path = a.log;
  if (log_path.empty() && a.serve) {
    std::string stamp = tub::utc_now_iso8601();
    std::erase(stamp, ':');
    log_path = "rcpilot-run-" + stamp + ".csv";
  }
  if (!log_path.empty()) log.emplace(log_path);
  std::ofstream capture;
  if (!a.capture.empty()) {
    capture.open(a.capture, std::ios::binary);
    require(static_cast<bool>(capture), Errc::io, "cannot write " + a.capture);
    loop.capture_sensor_link(&capture);
  }
  if (log) loop.on_tick([&](const TickResult& r) { log->write(r.snapshot); });

  loop.request_mode(mode);
  if (writer) loop.request_recording(true);

  std::unique_ptr<TelemetryServer> server;
  if (a.serve) {
    TelemetryOptions opts;
    opts.host = g.host;
    opts.port = g.port;
    if (!g.ui_dir.empty()) opts.ui_dir = g.ui_dir;
    if (model) opts.saliency = std::make_shared<SaliencySource>(*model);
    server = std::make_unique<TelemetryServer>(loop, opts);
    try {
      server->start();
    } catch (const Error& e) {
      throw Failure(port_busy, e.what());
    }
    err << "serving on http://" << g.host << ":" << server->port() << "/ (Ctrl-C to stop)\n";
    std::signal(SIGINT, on_stop_signal);
    std::signal(SIGTERM, on_stop_signal);
  }
  const std::size_t ticks = a.serve && !a.ticks_set ? 0 : a.ticks;
  loop.run(ticks, &stop_flag());
  if (server) server->stop();
  if (log) log->flush();

  std::ostringstream laps;
  laps << std::setprecision(6);
  for (std::size_t i = 0; i < loop.lap_times().size(); ++i) laps << (i ? ";" : "") << loop.lap_times()[i];
  emit(out, g.fmt(),
       {{"scenario", sc.name},
        {"mode", drive_mode_name(loop.mode())},
        {"ticks", loop.ticks()},
        {"sim_time_s", loop.sim_time()},
        {"distance_m", loop.distance()},
        {"laps", loop.laps_completed()},
        {"lap_times_s", laps.str()},
        {"off_track", loop.off_track_events()},
        {"collisions", loop.collisions()},
        {"overruns", loop.overruns()},
        {"records", writer ? writer->size() : 0}});
  return ok;
}

struct CollectArgs {
  std::string scenario = "default";
  bool obstacles = false;
  std::size_t frames = 10000;
  std::string record;
  double noise = 0.3;
  std::size_t noise_hold = 10;
};

inline int cmd_collect(const Globals& g, const CollectArgs& a, std::ostream& out, std::ostream& err) {
  if (a.frames < 1) throw Failure(usage, "--frames must be >= 1");
  const Scenario sc = scenario_or_fail(a.scenario, a.obstacles);
  const DriveConfig cfg = drive_config(g);
  auto [writer, run] = open_tub(a.record, sc, cfg);
  CollectConfig cc;
  cc.frames = a.frames;
  cc.steering_noise = a.noise;
  cc.noise_hold_ticks = a.noise_hold;
  cc.first_run = run;
  const auto res = collect(sc, cfg, writer, cc);
  Fields f = {{"tub", a.record}, {"collected", res.records}, {"collect_runs", res.runs}, {"laps", res.laps}};
  for (auto& kv : tub_fields(tub::tub_stats(tub::Tub(a.record)))) f.push_back(kv);
  emit(out, g.fmt(), f);
  if (res.blocked) {
    err << "warning: expert blocked, lane is impassable; kept partial tub with " << res.records << " new records\n";
    return expert_blocked;
  }
  return ok;
}

struct TrainArgs {
  std::string tub, type = "linear", out, report;
  std::size_t epochs = 60, batch = 64, seq_len = 3, patience = 5, max_samples = 0;
  double lr = 1e-3, val_fraction = 0.2;
  bool single_head = false, no_early_stop = false;
};

inline int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out, std::ostream& err) {
  nn::ModelConfig mc;
  mc.architecture = nn::parse_architecture(a.type);
  mc.sequence_length = a.seq_len;
  mc.single_head = a.single_head;
  const std::size_t t = mc.architecture == nn::Architecture::rnn ? a.seq_len : 1;
  auto split = tub::load_split(a.tub, a.val_fraction, g.seed, t);
  if (a.max_samples > 0) {
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(a.max_samples * a.val_fraction));
    split.train = split.train.thinned(a.max_samples);
    split.val = split.val.thinned(n_val);
  }
  nn::Model<float> model(mc, g.seed);
  nn::TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch;
  tc.learning_rate = a.lr;
  tc.patience = a.patience;
  tc.early_stopping = !a.no_early_stop;
  tc.seed = g.seed;
  if (!g.quiet)
    err << "training " << a.type << " on " << split.train.size() << " samples, validating on " << split.val.size()
        << " (" << split.skipped << " unreadable skipped)\n";
  const auto report = nn::train(model, split.train, split.val, tc, [&](const nn::EpochStats& e) {
    if (!g.quiet)
      err << "epoch " << e.epoch << "  train " << e.train_mse << "  val " << e.val_mse << "  " << std::fixed
          << std::setprecision(1) << e.seconds << "s\n"
          << std::defaultfloat;
  });
  nn::save_weights(model, a.out);
  const std::string report_path = a.report.empty() ? a.out + ".csv" : a.report;
  {
    std::ofstream csv(report_path);
    require(static_cast<bool>(csv), Errc::io, "cannot write " + report_path);
    nn::write_report_csv(report, csv);
  }
  emit(out, g.fmt(),
       {{"weights", a.out},
        {"report", report_path},
        {"type", a.type},
        {"train_samples", split.train.size()},
        {"val_samples", split.val.size()},
        {"epochs_run", report.epochs.size()},
        {"best_epoch", report.best_epoch},
        {"best_val_mse", report.best_val_mse},
        {"stopped_early", report.stopped_early},
        {"wall_seconds", report.wall_seconds}});
  return ok;
}

struct EvalArgs {
  std::string scenario = "default";
  bool obstacles = false;
  std::vector<std::string> models;
  std::string type;
  int laps = 3, runs = 1;
  double jitter_lateral = 0.0, jitter_heading = 0.0, timeout_factor = 3.0;
  std::string csv;
};

inline int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out, std::ostream&) {
  if (a.runs < 1) throw Failure(usage, "--runs must be >= 1");
  const Scenario sc = scenario_or_fail(a.scenario, a.obstacles);
  const DriveConfig cfg = drive_config(g);
  EvalConfig ec;
  ec.laps = a.laps;
  ec.seed = g.seed;
  ec.spawn_lateral_jitter = a.jitter_lateral;
  ec.spawn_heading_jitter = a.jitter_heading;
  ec.timeout_factor = a.timeout_factor;
  ec.validate();

  std::vector<std::string> pilots = a.models.empty() ? std::vector<std::string>{"expert"} : a.models;
  std::vector<std::vector<EvalReport>> all;
  for (const auto& p : pilots) {
    std::shared_ptr<Pilot> pilot;
    std::string label = "expert";
    if (p != "expert") {
      auto m = model_or_fail(p, a.type);
      label = nn::architecture_name(m->architecture()) + "(" + std::filesystem::path(p).filename().string() + ")";
      pilot = std::make_shared<ModelPilot>(std::move(m));
    }
    std::vector<EvalReport> reps;
    for (int r = 0; r < a.runs; ++r) {
      auto rep = evaluate(sc, cfg, pilot ? DriveMode::autopilot : DriveMode::expert, pilot, ec, r);
      rep.pilot = label;
      reps.push_back(std::move(rep));
    }
    all.push_back(std::move(reps));
  }

  if (!a.csv.empty()) {
    std::ofstream f(a.csv);
    require(static_cast<bool>(f), Errc::io, "cannot write " + a.csv);
    write_eval_csv_header(f);
    for (const auto& reps : all)
      for (const auto& r : reps) write_eval_csv_row(f, r);
  }
  switch (g.fmt()) {
    case Format::csv:
      write_eval_csv_header(out);
      for (const auto& reps : all)
        for (const auto& r : reps) write_eval_csv_row(out, r);
      break;
    case Format::json: {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& reps : all)
        for (const auto& r : reps)
          arr.push_back({{"run", r.run},
                         {"pilot", r.pilot},
                         {"scenario", r.scenario},
                         {"laps_requested", r.laps_requested},
                         {"laps_completed", r.laps_completed},
                         {"lap_times_s", r.lap_times},
                         {"total_time_s", r.total_time},
                         {"total_distance_m", r.total_distance},
                         {"mean_speed_mps", r.mean_speed},
                         {"off_track", r.off_track},
                         {"collisions", r.collisions},
                         {"blocked", r.blocked},
                         {"timed_out", r.timed_out},
                         {"success", r.success()}});
      out << arr.dump(2) << '\n';
      break;
    }
    case Format::text:
      for (const auto& reps : all) write_eval_summary(out, reps);
      if (all.size() > 1) {
        out << "side by side (" << sc.name << ", " << a.runs << " runs each):\n";
        for (const auto& reps : all) {
          const auto ok_runs = std::count_if(reps.begin(), reps.end(), [](const EvalReport& r) { return r.success(); });
          out << "  " << std::left << std::setw(28) << reps.front().pilot << " success " << ok_runs << "/"
              << reps.size() << " (" << std::fixed << std::setprecision(0)
              << 100.0 * static_cast<double>(ok_runs) / static_cast<double>(reps.size()) << "%)\n";
        }
      }
      break;
  }
  return ok;
}

struct CalibrateArgs {
  std::optional<double> steering_trim, throttle_trim, frequency;
  std::string out = "calibration.txt";
};

inline int cmd_calibrate(const Globals& g, const CalibrateArgs& a, std::ostream& out, std::ostream& err) {
  Calibration cal;
  if (!g.calibration.empty()) cal = load_calibration(g.calibration);
  if (a.steering_trim) cal.steering_trim_us = *a.steering_trim;
  if (a.throttle_trim) cal.throttle_trim_us = *a.throttle_trim;
  if (a.frequency) cal.frequency_hz = *a.frequency;
  cal.validate();
  save_calibration(cal, a.out);
  if (!g.quiet) err << "wrote " << a.out << "\n";
  Fields f = {{"file", a.out},
              {"steering_trim_us", cal.steering_trim_us},
              {"throttle_trim_us", cal.throttle_trim_us},
              {"frequency_hz", cal.frequency_hz}};
  // Resulting pulse and 12-bit tick values at the endpoints and centre.
  for (double v : {-1.0, 0.0, 1.0}) {
    const auto [s, t] = command_to_pwm(NormalizedCommand(v, v), cal);
    const std::string tag = v < 0 ? "min" : v > 0 ? "max" : "mid";
    f.push_back({"steering_" + tag + "_ticks", s.on_ticks});
    f.push_back({"throttle_" + tag + "_ticks", t.on_ticks});
  }
  emit(out, g.fmt(), f);
  return ok;
}

inline int cmd_tub_stats(const Globals& g, const std::string& dir, std::ostream& out) {
  tub::Tub t(dir);
  require(t.size() > 0, Errc::empty_dataset, "tub " + dir + " has no records");
  auto f = tub_fields(tub::tub_stats(t));
  f.insert(f.begin(), {"tub", dir});
  emit(out, g.fmt(), f);
  return ok;
}

inline int cmd_sensorlink_dump(const Globals& g, const std::string& path, std::ostream& out, std::ostream& err) {
  const auto bytes = nn::read_bytes(path);
  const auto res = sensor_link::parse_stream(bytes);
  const auto gaps = sensor_link::gap_detect(res.frames);
  const auto& d = res.diagnostics;
  if (g.fmt() == Format::json) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : res.frames)
      frames.push_back({{"seq", f.seq},
                        {"encoder_ticks", f.encoder_ticks},
                        {"yaw_rate_rad_s", f.yaw_rate_rad_s()},
                        {"accel_long_m_s2", f.accel_long_m_s2()},
                        {"accel_lat_m_s2", f.accel_lat_m_s2()}});
    nlohmann::json gj = nlohmann::json::array();
    for (const auto& gp : gaps) gj.push_back({{"index", gp.index}, {"missing", gp.missing}});
    out << nlohmann::json{{"frames", frames},
                          {"diagnostics",
                           {{"resyncs", d.resyncs}, {"crc_failures", d.crc_failures}, {"truncated", d.truncated}}},
                          {"gaps", gj}}
               .dump(2)
        << '\n';
    return ok;
  }
  sensor_link::write_csv_header(out);
  for (std::size_t i = 0; i < res.frames.size(); ++i) sensor_link::write_csv_row(out, i, res.frames[i]);
  if (!g.quiet) {
    err << res.frames.size() << " frames, " << d.resyncs << " resyncs, " << d.crc_failures << " crc failures, "
        << d.truncated << " truncated\n";
    for (const auto& gp : gaps) err << "gap before frame " << gp.index << ": " << gp.missing << " missing\n";
  }
  return ok;
}

// --- entry point -----------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Self-driving RC car simulator, data collection, training and evaluation", "rcpilot"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML/INI config file; command-line flags take precedence");
  app.set_version_flag("--version", "rcpilot 1.0");

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"text", "csv", "json"}))->capture_default_str();
  app.add_option("--calibration", g.calibration, "Actuation calibration file")->check(CLI::ExistingFile);
  app.add_option("--host", g.host, "Telemetry bind address")->capture_default_str();
  app.add_option("--port", g.port, "Telemetry port")->check(CLI::Range(1, 65535))->capture_default_str();
  app.add_option("--ui-dir", g.ui_dir, "Serve static UI files from this directory")->check(CLI::ExistingDirectory);
  app.add_flag("--quiet", g.quiet, "No progress or configuration output on stderr");

  const std::vector<std::string> types = {"linear", "rnn"};

  DriveArgs da;
  auto* drive = app.add_subcommand("drive", "Run the drive loop (simulated clock, or wall clock with --serve)");
  drive->add_option("--scenario", da.scenario, "Scenario file or 'default' / 'obstacles'")->capture_default_str();
  drive->add_flag("--obstacles", da.obstacles, "Place the default obstacles");
  drive->add_option("--model", da.model, "Weight file for auto mode");
  drive->add_option("--type", da.type, "Expected model type")->check(CLI::IsMember(types));
  drive->add_option("--mode", da.mode, "Starting mode")->check(CLI::IsMember({"user", "expert", "auto"}))->capture_default_str();
  drive->add_flag("--serve", da.serve, "Start the telemetry server and run in real time");
  drive->add_option("--record", da.record, "Record to this tub directory");
  auto* ticks_opt = drive->add_option("--ticks", da.ticks, "Ticks to run (0 = until stopped; default 600, or unbounded with --serve)");
  drive->add_option("--log", da.log, "Snapshot CSV log (default with --serve: rcpilot-run-<time>.csv)");
  drive->add_option("--capture", da.capture, "Write the raw sensor-link byte stream here");

  CollectArgs ca;
  auto* coll = app.add_subcommand("collect", "Record expert driving into a tub");
  coll->add_option("--scenario", ca.scenario, "Scenario file or 'default' / 'obstacles'")->capture_default_str();
  coll->add_flag("--obstacles", ca.obstacles, "Place the default obstacles");
  coll->add_option("--frames", ca.frames, "Records to collect")->capture_default_str();
  coll->add_option("--record", ca.record, "Tub directory")->required();
  coll->add_option("--noise", ca.noise, "Executed steering perturbation (std dev)")->capture_default_str();
  coll->add_option("--noise-hold", ca.noise_hold, "Ticks each perturbation is held")->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on a tub");
  train->add_option("--tub", ta.tub, "Tub directory")->required();
  train->add_option("--type", ta.type, "Model type")->check(CLI::IsMember(types))->capture_default_str();
  train->add_option("--out", ta.out, "Output weight file")->required();
  train->add_option("--epochs", ta.epochs, "Maximum epochs")->capture_default_str();
  train->add_option("--batch", ta.batch, "Batch size")->capture_default_str();
  train->add_option("--lr", ta.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--val-fraction", ta.val_fraction, "Validation share")->capture_default_str();
  train->add_option("--seq-len", ta.seq_len, "RNN sequence length")->capture_default_str();
  train->add_option("--patience", ta.patience, "Early-stopping patience in epochs")->capture_default_str();
  train->add_option("--max-samples", ta.max_samples, "Use at most this many training samples (0 = all)");
  train->add_flag("--single-head", ta.single_head, "Linear model with one Dense(2) head");
  train->add_flag("--no-early-stop", ta.no_early_stop, "Run every epoch");
  train->add_option("--report", ta.report, "Training CSV report (default <out>.csv)");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Closed-loop evaluation of the expert or trained models");
  ev->add_option("--scenario", ea.scenario, "Scenario file or 'default' / 'obstacles'")->capture_default_str();
  ev->add_flag("--obstacles", ea.obstacles, "Place the default obstacles");
  ev->add_option("--model", ea.models, "Weight file, or 'expert'; repeat to compare side by side");
  ev->add_option("--type", ea.type, "Expected model type")->check(CLI::IsMember(types));
  ev->add_option("--laps", ea.laps, "Laps per run")->check(CLI::PositiveNumber)->capture_default_str();
  ev->add_option("--runs", ea.runs, "Runs per pilot")->capture_default_str();
  ev->add_option("--jitter-lateral", ea.jitter_lateral, "Spawn lateral jitter bound, m")->capture_default_str();
  ev->add_option("--jitter-heading", ea.jitter_heading, "Spawn heading jitter bound, rad")->capture_default_str();
  ev->add_option("--timeout-factor", ea.timeout_factor, "Run limit in multiples of the reference lap time")->capture_default_str();
  ev->add_option("--csv", ea.csv, "Also write the report CSV here");

  CalibrateArgs cal;
  auto* calib = app.add_subcommand("calibrate", "Write an actuation calibration file");
  calib->add_option("--steering-trim", cal.steering_trim, "Steering trim, us");
  calib->add_option("--throttle-trim", cal.throttle_trim, "Throttle trim, us");
  calib->add_option("--frequency", cal.frequency, "PWM frequency, Hz");
  calib->add_option("--out", cal.out, "Output file")->capture_default_str();

  std::string tub_dir;
  auto* tubc = app.add_subcommand("tub", "Inspect tubs");
  tubc->require_subcommand(1);
  auto* stats = tubc->add_subcommand("stats", "Record counts and command histograms");
  stats->add_option("dir", tub_dir, "Tub directory")->required();

  std::string capture_file;
  auto* link = app.add_subcommand("sensorlink", "Sensor wire format tools");
  link->require_subcommand(1);
  auto* dump = link->add_subcommand("dump", "Decode a raw capture to CSV");
  dump->add_option("capture", capture_file, "Capture file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage;
  }
  da.ticks_set = ticks_opt->count() > 0;

  if (!g.quiet) {
    // Effective configuration after flags > config file > defaults: global
    // keys plus those of the chosen command.
    std::string prefix;
    for (const CLI::App* sub = &app; !sub->get_subcommands().empty();) {
      sub = sub->get_subcommands().front();
      prefix += sub->get_name() + ".";
    }
    std::istringstream all(app.config_to_str(true, false));
    err << "# effective configuration\n";
    for (std::string line; std::getline(all, line);) {
      const auto key = line.substr(0, line.find('='));
      if (key.find('.') == std::string::npos || line.rfind(prefix, 0) == 0) err << line << '\n';
    }
  }

  try {
    if (*drive) return cmd_drive(g, da, out, err);
    if (*coll) return cmd_collect(g, ca, out, err);
    if (*train) return cmd_train(g, ta, out, err);
    if (*ev) return cmd_eval(g, ea, out, err);
    if (*calib) return cmd_calibrate(g, cal, out, err);
    if (*stats) return cmd_tub_stats(g, tub_dir, out);
    if (*dump) return cmd_sensorlink_dump(g, capture_file, out, err);
  } catch (const Failure& f) {
    err << "error: " << f.what() << "\n";
    return f.code();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return error;
  }
  return usage;
}

}  // namespace rcpilot::cli
