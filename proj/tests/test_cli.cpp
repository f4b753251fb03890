#include <arpa/inet.h>
#include <gtest/gtest.h>
#include <netinet/in.h>
#include <unistd.h>

#include <fstream>
#include <thread>

#include "rcpilot/cli.hpp"
#include "support/tempdir.hpp"

using namespace rcpilot;
using nlohmann::json;
using testdata::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli_run(std::vector<std::string> args) {
  args.insert(args.begin(), "rcpilot");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&a), sizeof(a));
  socklen_t len = sizeof(a);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&a), &len);
  ::close(fd);
  return ntohs(a.sin_port);
}

}  // namespace

TEST(Cli, HelpForEveryCommand) {
  for (std::vector<std::string> a : {std::vector<std::string>{"--help"},
                                     {"drive", "--help"},
                                     {"collect", "--help"},
                                     {"train", "--help"},
                                     {"eval", "--help"},
                                     {"calibrate", "--help"},
                                     {"tub", "stats", "--help"},
                                     {"sensorlink", "dump", "--help"}}) {
    const auto r = cli_run(a);
    EXPECT_EQ(r.code, 0) << a.front();
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << a.front();
  }
  EXPECT_EQ(cli_run({}).code, cli::usage);
  EXPECT_EQ(cli_run({"fly"}).code, cli::usage);
  EXPECT_EQ(cli_run({"--format", "yaml", "calibrate"}).code, cli::usage);
}

TEST(Cli, DriveExpertRecordsOneRecordPerTick) {
  TempDir tmp;
  const auto r = cli_run({"--quiet", "--format", "json", "drive", "--scenario", "default", "--mode", "expert",
                          "--record", (tmp / "tub").string(), "--ticks", "600"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(tub::Tub(tmp / "tub").size(), 600u);
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["records"], 600);
  EXPECT_EQ(j["off_track"], 0);
  EXPECT_EQ(j["sim_time_s"], 30.0);
}

TEST(Cli, DistinctExitCodes) {
  TempDir tmp;
  auto r = cli_run({"drive", "--mode", "auto"});
  EXPECT_EQ(r.code, cli::usage);
  EXPECT_NE(r.err.find("--model"), std::string::npos);
  EXPECT_EQ(cli_run({"drive", "--scenario", (tmp / "none.scn").string()}).code, cli::bad_scenario);
  std::ofstream(tmp / "junk.scn") << "not a scenario\n";
  EXPECT_EQ(cli_run({"eval", "--scenario", (tmp / "junk.scn").string()}).code, cli::bad_scenario);
  EXPECT_EQ(cli_run({"eval", "--model", (tmp / "none.rcpw").string()}).code, cli::missing_model);
  std::ofstream(tmp / "bad.rcpw") << "RCPW garbage";
  EXPECT_EQ(cli_run({"drive", "--mode", "auto", "--model", (tmp / "bad.rcpw").string()}).code, cli::missing_model);
  std::filesystem::create_directories(tmp / "empty");
  r = cli_run({"tub", "stats", (tmp / "empty").string()});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST(Cli, PortBusy) {
  DriveLoop loop(default_scenario(), DriveConfig{});
  TelemetryOptions o;
  o.port = 0;
  TelemetryServer holder(loop, o);
  holder.start();
  const auto r = cli_run({"--port", std::to_string(holder.port()), "drive", "--serve", "--ticks", "1", "--log",
                          (std::filesystem::temp_directory_path() / "rcpilot-busy.csv").string()});
  EXPECT_EQ(r.code, cli::port_busy) << r.err;
  EXPECT_NE(r.err.find("port busy"), std::string::npos);
}

TEST(Cli, DriveServeIsReachable) {
  TempDir tmp;
  const int port = free_port();
  Result r{};
  std::thread t([&] {
    r = cli_run({"--port", std::to_string(port), "drive", "--serve", "--mode", "expert", "--ticks", "40", "--log",
                 (tmp / "run.csv").string()});
  });
  httplib::Client c("127.0.0.1", port);
  c.set_connection_timeout(1);
  c.set_read_timeout(1);
  bool seen = false;
  for (int i = 0; i < 100 && !seen; ++i) {
    auto res = c.Get("/api/state");
    seen = res && res->status == 200 && json::parse(res->body)["mode"] == "expert";
    if (!seen) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  t.join();
  EXPECT_TRUE(seen);
  EXPECT_EQ(r.code, 0) << r.err;
  // One snapshot row per tick plus the header.
  const auto log = slurp(tmp / "run.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 41);
}

TEST(Cli, CollectIsDeterministicUnderSeed) {
  TempDir tmp;
  for (const char* name : {"a", "b"}) {
    const auto r = cli_run({"--seed", "42", "--quiet", "collect", "--frames", "100", "--record", (tmp / name).string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("records"), std::string::npos);
  }
  EXPECT_EQ(tub::Tub(tmp / "a").size(), 100u);
  const auto a = slurp(tmp / "a" / "manifest.jsonl");
  EXPECT_EQ(a, slurp(tmp / "b" / "manifest.jsonl"));
  cli_run({"--seed", "43", "--quiet", "collect", "--frames", "100", "--record", (tmp / "c").string()});
  EXPECT_NE(a, slurp(tmp / "c" / "manifest.jsonl"));

  // Appending continues frame ids and starts a new run.
  ASSERT_EQ(cli_run({"--quiet", "collect", "--frames", "10", "--record", (tmp / "a").string()}).code, 0);
  tub::Tub t(tmp / "a");
  ASSERT_EQ(t.size(), 110u);
  EXPECT_EQ(t.records()[100].frame_id, 100u);
  EXPECT_GT(t.records()[100].run, t.records()[99].run);
}

TEST(Cli, CollectBlockedKeepsPartialTub) {
  TempDir tmp;
  auto sc = default_scenario();
  Obstacle wall;
  wall.center = sc.track.point_at(2.0);
  wall.width = 0.8;
  wall.depth = 0.8;
  sc.obstacles.push_back(wall);
  save_scenario(sc, tmp / "wall.scn");
  const auto r = cli_run(
      {"--quiet", "collect", "--scenario", (tmp / "wall.scn").string(), "--frames", "1000", "--record", (tmp / "t").string()});
  EXPECT_EQ(r.code, cli::expert_blocked);
  EXPECT_NE(r.err.find("blocked"), std::string::npos);
  const auto n = tub::Tub(tmp / "t").size();
  EXPECT_GT(n, 0u);
  EXPECT_LT(n, 1000u);
}

TEST(Cli, TrainThenEvalSmall) {
  TempDir tmp;
  ASSERT_EQ(cli_run({"--quiet", "collect", "--frames", "60", "--record", (tmp / "t").string()}).code, 0);
  auto r = cli_run({"--quiet", "--format", "json", "train", "--tub", (tmp / "t").string(), "--type", "linear", "--out",
                    (tmp / "m.rcpw").string(), "--epochs", "2", "--batch", "16"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["epochs_run"], 2);
  EXPECT_EQ(j["train_samples"], 48);
  EXPECT_EQ(j["val_samples"], 12);
  const auto report = slurp(tmp / "m.rcpw.csv");
  EXPECT_EQ(report.rfind("epoch,train_mse,val_mse,seconds\n", 0), 0u);
  EXPECT_EQ(std::count(report.begin(), report.end(), '\n'), 3);

  r = cli_run({"--quiet", "--format", "csv", "eval", "--model", (tmp / "m.rcpw").string(), "--model", "expert",
               "--laps", "1", "--timeout-factor", "0.2"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream rows(r.out);
  std::string line;
  std::getline(rows, line);
  EXPECT_EQ(line.rfind("run,pilot,scenario", 0), 0u);
  std::getline(rows, line);
  EXPECT_NE(line.find("linear(m.rcpw)"), std::string::npos);
  std::getline(rows, line);
  EXPECT_NE(line.find("expert"), std::string::npos);

  EXPECT_EQ(cli_run({"eval", "--type", "rnn", "--model", (tmp / "m.rcpw").string()}).code, cli::missing_model);
}

TEST(Cli, TrainRnnOnTub) {
  TempDir tmp;
  ASSERT_EQ(cli_run({"--quiet", "collect", "--frames", "40", "--record", (tmp / "t").string()}).code, 0);
  const auto r = cli_run({"--quiet", "--format", "json", "train", "--tub", (tmp / "t").string(), "--type", "rnn",
                          "--out", (tmp / "r.rcpw").string(), "--epochs", "1", "--seq-len", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nn::load_model<float>(tmp / "r.rcpw")->architecture(), nn::Architecture::rnn);
}

TEST(Cli, EvalExpertMatchesReferenceBand) {
  const auto r = cli_run({"--quiet", "--format", "json", "eval", "--laps", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0]["laps_completed"], 3);
  EXPECT_GE(j[0]["mean_speed_mps"].get<double>(), 0.40);
  EXPECT_LE(j[0]["mean_speed_mps"].get<double>(), 0.44);
  const auto text = cli_run({"--quiet", "eval", "--laps", "1"});
  EXPECT_NE(text.out.find("reference 28.40 s"), std::string::npos);
  EXPECT_NE(text.out.find("reference 0.42 m/s"), std::string::npos);
}

TEST(Cli, CalibrateWritesLoadableFile) {
  TempDir tmp;
  const auto path = (tmp / "cal.txt").string();
  auto r = cli_run({"--quiet", "--format", "csv", "calibrate", "--steering-trim", "12", "--out", path});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cal = load_calibration(path);
  EXPECT_EQ(cal.steering_trim_us, 12.0);
  EXPECT_EQ(cal.frequency_hz, 60.0);
  EXPECT_NE(r.out.find("throttle_mid_ticks"), std::string::npos);
  // 1500 us at 60 Hz is 369 ticks; the steering trim moves only steering.
  r = cli_run({"--quiet", "--format", "json", "--calibration", path, "calibrate", "--out", path});
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["throttle_mid_ticks"], 369);
  EXPECT_EQ(j["steering_mid_ticks"], pulse_to_ticks(1512.0, 60.0));
  EXPECT_EQ(j["steering_trim_us"], 12.0);
  // The calibration reaches the drive loop.
  EXPECT_EQ(cli_run({"--quiet", "--calibration", path, "drive", "--ticks", "5"}).code, 0);
}

TEST(Cli, SensorlinkDumpDecodesCapture) {
  TempDir tmp;
  const auto cap = (tmp / "link.bin").string();
  ASSERT_EQ(cli_run({"--quiet", "drive", "--mode", "expert", "--ticks", "50", "--capture", cap}).code, 0);
  EXPECT_EQ(std::filesystem::file_size(cap), 50u * 14u);
  auto r = cli_run({"sensorlink", "dump", cap});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 51);
  EXPECT_NE(r.err.find("50 frames, 0 resyncs, 0 crc failures"), std::string::npos);
  // Flip a byte: the frame is dropped and reported.
  auto bytes = slurp(cap);
  bytes[14 * 10 + 5] ^= 0x01;
  std::ofstream(tmp / "bad.bin", std::ios::binary) << bytes;
  r = cli_run({"--format", "json", "sensorlink", "dump", (tmp / "bad.bin").string()});
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["frames"].size(), 49u);
  EXPECT_GE(j["diagnostics"]["crc_failures"], 1);
  EXPECT_EQ(j["gaps"][0]["missing"], 1);
}

TEST(Cli, FlagsOverrideConfigFileOverDefaults) {
  TempDir tmp;
  std::ofstream(tmp / "cfg.toml") << "seed = 5\nformat = \"json\"\n[drive]\nticks = 40\nmode = \"expert\"\n";
  auto r = cli_run({"--config", (tmp / "cfg.toml").string(), "--seed", "7", "drive"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("seed=7"), std::string::npos);
  EXPECT_NE(r.err.find("drive.ticks=40"), std::string::npos);
  EXPECT_NE(r.err.find("drive.mode=\"expert\""), std::string::npos);
  EXPECT_EQ(r.err.find("collect."), std::string::npos);  // other commands stay out
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["ticks"], 40);
  EXPECT_EQ(j["mode"], "expert");
  r = cli_run({"--config", (tmp / "cfg.toml").string(), "drive", "--ticks", "3"});
  EXPECT_EQ(json::parse(r.out)["ticks"], 3);
  EXPECT_NE(r.err.find("seed=5"), std::string::npos);
}
