#pragma once

// HTTP API (all JSON bodies are flat objects; errors are {"error": "..."}):
//
//   GET  /api/state      latest TelemetrySnapshot; 503 before the first tick
//   POST /api/control    {"mode"?: "user"|"expert"|"auto", "recording"?: bool,
//                         "teleop"?: {"steering": x, "throttle": y}}
//                        -> {"mode", "recording", "teleop": {...}, "teleop_ignored"}
//                        400 malformed / unknown mode, 409 auto without model,
//                        409 recording in auto or without a tub
//   GET  /api/stream     text/event-stream, one "data: <snapshot>" event per
//                        new snapshot, at most 10 per second
//   GET  /api/video      multipart/x-mixed-replace PNG frames, at most 10 Hz;
//                        ?once=1 returns a single image/png
//   GET  /api/saliency   same as /api/video with the saliency map blended at
//                        50%; 409 outside auto mode
//   GET  /               static files from --ui-dir when given

#include <sys/socket.h>

#include <atomic>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include "rcpilot/drive_loop.hpp"
#include "rcpilot/nn/saliency.hpp"
#include "rcpilot/nn/serialize.hpp"
#include "rcpilot/png.hpp"
#include "httplib.h"
#include "json.hpp"

namespace rcpilot {

/// Admits at most one event per period. After a gap it restarts from the
/// current time rather than bursting.
class StreamPacer {
 public:
  explicit StreamPacer(double hz) : period_(1.0 / hz) { require(hz > 0, Errc::invalid_argument, "rate must be > 0"); }

  bool due(double now) {
    if (next_ && now < *next_) return false;
    next_ = (next_ && now < *next_ + period_) ? *next_ + period_ : now + period_;
    return true;
  }
  /// Time until the next event may go out.
  double wait(double now) const { return next_ ? std::max(0.0, *next_ - now) : 0.0; }

 private:
  double period_;
  std::optional<double> next_;
};

/// Blends a single-channel map over a frame: out = 0.5 * frame + 0.5 * heat,
/// heat = (v, v^2/255, 0).
inline CameraFrame blend_saliency(const CameraFrame& frame, const png::Image& map) {
  require(map.width == frame.width && map.height == frame.height && map.channels == 1, Errc::shape_mismatch,
          "saliency map does not match the frame");
  CameraFrame out = frame;
  for (std::size_t p = 0; p < map.pixels.size(); ++p) {
    const int v = map.pixels[p];
    const int heat[3] = {v, v * v / 255, 0};
    for (int c = 0; c < 3; ++c)
      out.pixels[p * 3 + c] = static_cast<std::uint8_t>((frame.pixels[p * 3 + c] + heat[c] + 1) / 2);
  }
  return out;
}

/// Owns a private copy of the pilot's network so saliency requests never
/// touch the loop's model.
class SaliencySource {
 public:
  explicit SaliencySource(nn::Model<float>& model) {
    const auto bytes = nn::serialize_weights(model);
    model_ = std::make_unique<nn::Model<float>>(model.config());
    nn::deserialize_weights(*model_, bytes);
  }

  png::Image map(const nn::Tensor<float>& input) {
    std::lock_guard lock(m_);
    return nn::saliency(*model_, input);
  }

 private:
  std::mutex m_;
  std::unique_ptr<nn::Model<float>> model_;
};

struct TelemetryOptions {
  std::string host = "127.0.0.1";
  int port = 8887;  // 0 picks a free port
  std::optional<std::filesystem::path> ui_dir;
  double stream_hz = 10.0;
  std::shared_ptr<SaliencySource> saliency;
  int send_buffer_bytes = 16 * 1024;  // bounds what a stalled client can queue
  std::size_t threads = 32;
};

class TelemetryServer {
 public:
  TelemetryServer(DriveLoop& loop, TelemetryOptions opts) : loop_(loop), opts_(std::move(opts)) {
    if (opts_.ui_dir)
      require(std::filesystem::is_directory(*opts_.ui_dir), Errc::io, "ui dir " + opts_.ui_dir->string() + " not found");
    routes();
  }

  ~TelemetryServer() { stop(); }
  TelemetryServer(const TelemetryServer&) = delete;
  TelemetryServer& operator=(const TelemetryServer&) = delete;

  /// Binds and starts serving on a background thread. A port already in use
  /// raises Errc::io with "port busy" in the message.
  void start() {
    const int bufsz = opts_.send_buffer_bytes;
    svr_.set_socket_options([bufsz](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
      if (bufsz > 0) setsockopt(sock, SOL_SOCKET, SO_SNDBUF, &bufsz, sizeof(bufsz));
    });
    const std::size_t threads = opts_.threads;
    svr_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    svr_.set_write_timeout(30, 0);
    if (opts_.port == 0) {
      port_ = svr_.bind_to_any_port(opts_.host);
      require(port_ > 0, Errc::io, "cannot bind " + opts_.host);
    } else {
      require(svr_.bind_to_port(opts_.host, opts_.port), Errc::io,
              "port busy: cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
      port_ = opts_.port;
    }
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
  }

  void stop() {
    stopping_ = true;
    if (thread_.joinable()) {
      svr_.stop();
      thread_.join();
    }
  }

  int port() const { return port_; }
  std::size_t open_streams() const { return streams_.load(); }

 private:
  static void json_reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }
  static void error_reply(httplib::Response& res, int status, const std::string& msg) {
    json_reply(res, status, {{"error", msg}});
  }

  double now() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
  }

  /// Sleeps in short slices so stop() is honoured promptly.
  bool pace(StreamPacer& pacer) {
    for (;;) {
      if (stopping_) return false;
      const double t = now();
      if (pacer.due(t)) return true;
      std::this_thread::sleep_for(std::chrono::duration<double>(std::min(0.02, pacer.wait(t))));
    }
  }

  /// PNG of the newest frame, encoded once no matter how many clients ask.
  std::shared_ptr<const std::string> frame_png(bool with_saliency) {
    const auto frame = loop_.latest_frame();
    if (!frame) return nullptr;
    auto& slot = with_saliency ? sal_cache_ : video_cache_;
    std::lock_guard lock(slot.m);
    if (slot.data && slot.frame_id == frame->frame_id) return slot.data;
    CameraFrame img = *frame;
    if (with_saliency) {
      const auto input = loop_.latest_pilot_input();
      if (!input || !opts_.saliency) return nullptr;
      img = blend_saliency(*frame, opts_.saliency->map(*input));
    }
    const auto bytes = encode_png(img);
    slot.frame_id = frame->frame_id;
    slot.data = std::make_shared<const std::string>(bytes.begin(), bytes.end());
    return slot.data;
  }

  bool auto_active() const {
    const auto s = loop_.latest_snapshot();
    return s && s->mode == "auto";
  }

  void image_endpoint(const httplib::Request& req, httplib::Response& res, bool with_saliency) {
    if (with_saliency) {
      if (!auto_active()) return error_reply(res, 409, "saliency is only available in auto mode");
      if (!opts_.saliency) return error_reply(res, 409, "no saliency source configured");
    }
    if (req.has_param("once")) {
      const auto png = frame_png(with_saliency);
      if (!png) return error_reply(res, 503, "no frame rendered yet");
      res.set_content(*png, "image/png");
      return;
    }
    ++streams_;
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "multipart/x-mixed-replace; boundary=frame",
        [this, with_saliency, pacer = StreamPacer(opts_.stream_hz), last = std::int64_t{-1}](
            std::size_t, httplib::DataSink& sink) mutable {
          for (;;) {
            if (!pace(pacer)) return false;
            if (with_saliency && !auto_active()) return false;
            const auto png = frame_png(with_saliency);
            const auto frame = loop_.latest_frame();
            if (!png || !frame || static_cast<std::int64_t>(frame->frame_id) == last) continue;
            last = static_cast<std::int64_t>(frame->frame_id);
            std::string part = "--frame\r\nContent-Type: image/png\r\nContent-Length: " + std::to_string(png->size()) +
                               "\r\nX-Frame-Id: " + std::to_string(last) + "\r\n\r\n";
            if (!sink.write(part.data(), part.size()) || !sink.write(png->data(), png->size()) ||
                !sink.write("\r\n", 2))
              return false;
            return true;
          }
        },
        [this](bool) { --streams_; });
  }

  void routes() {
    svr_.Get("/api/state", [this](const httplib::Request&, httplib::Response& res) {
      const auto s = loop_.latest_snapshot();
      if (!s) return error_reply(res, 503, "drive loop has not ticked yet");
      json_reply(res, 200, to_json(*s));
    });

    svr_.Post("/api/control", [this](const httplib::Request& req, httplib::Response& res) { control(req, res); });

    svr_.Get("/api/stream", [this](const httplib::Request&, httplib::Response& res) {
      ++streams_;
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider(
          "text/event-stream",
          [this, pacer = StreamPacer(opts_.stream_hz), last = std::int64_t{-1}](std::size_t,
                                                                                httplib::DataSink& sink) mutable {
            for (;;) {
              if (!pace(pacer)) return false;
              const auto s = loop_.latest_snapshot();
              if (!s || s->frame_id == last) continue;
              last = s->frame_id;
              const std::string ev = "data: " + to_json(*s).dump() + "\n\n";
              return sink.write(ev.data(), ev.size());
            }
          },
          [this](bool) { --streams_; });
    });

    svr_.Get("/api/video", [this](const httplib::Request& req, httplib::Response& res) {
      image_endpoint(req, res, false);
    });
    svr_.Get("/api/saliency", [this](const httplib::Request& req, httplib::Response& res) {
      image_endpoint(req, res, true);
    });

    if (opts_.ui_dir) {
      svr_.set_mount_point("/", opts_.ui_dir->string());
    } else {
      svr_.Get("/", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(
            "<!doctype html><title>rcpilot</title><p>No UI installed (start with --ui-dir). API: "
            "<a href=\"/api/state\">/api/state</a>, /api/control, /api/stream, /api/video, /api/saliency</p>",
            "text/html");
      });
    }

    svr_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      error_reply(res, 500, msg);
    });
    svr_.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (res.body.empty())
        error_reply(res, res.status, std::string(httplib::status_message(res.status)) + ": " + req.path);
    });
  }

  void control(const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
      return error_reply(res, 400, std::string("body is not JSON: ") + e.what());
    }
    if (!body.is_object()) return error_reply(res, 400, "body must be a JSON object");
    for (const auto& [k, v] : body.items())
      if (k != "mode" && k != "recording" && k != "teleop") return error_reply(res, 400, "unknown field '" + k + "'");

    // Validate everything before applying anything.
    std::optional<DriveMode> mode;
    if (body.contains("mode")) {
      if (!body["mode"].is_string()) return error_reply(res, 400, "mode must be a string");
      try {
        mode = parse_drive_mode(body["mode"].get<std::string>());
      } catch (const Error& e) {
        return error_reply(res, 400, e.what());
      }
      if (*mode == DriveMode::autopilot && !loop_.has_pilot()) return error_reply(res, 409, "no model loaded");
    }
    std::optional<bool> recording;
    if (body.contains("recording")) {
      if (!body["recording"].is_boolean()) return error_reply(res, 400, "recording must be a boolean");
      recording = body["recording"].get<bool>();
    }
    std::optional<NormalizedCommand> teleop;
    if (body.contains("teleop")) {
      const auto& t = body["teleop"];
      if (!t.is_object()) return error_reply(res, 400, "teleop must be an object");
      for (const auto& [k, v] : t.items()) {
        if (k != "steering" && k != "throttle") return error_reply(res, 400, "unknown teleop field '" + k + "'");
        if (!v.is_number()) return error_reply(res, 400, "teleop." + k + " must be a number");
      }
      teleop = NormalizedCommand(t.value("steering", 0.0), t.value("throttle", 0.0));
    }
    const DriveMode target = mode.value_or(loop_.requested_mode());
    if (recording && *recording && target == DriveMode::autopilot)
      return error_reply(res, 409, "recording is not available in auto mode");
    if (recording && *recording && !loop_.has_recorder()) return error_reply(res, 409, "no tub attached (start with --record)");

    try {
      if (mode) loop_.request_mode(*mode);
      if (recording) loop_.request_recording(*recording);
    } catch (const Error& e) {
      return error_reply(res, 409, e.what());
    }
    bool ignored = false;
    if (teleop) {
      if (target == DriveMode::autopilot)
        ignored = true;
      else
        loop_.set_teleop(*teleop);
    }
    const auto applied = loop_.teleop();
    json_reply(res, 200,
               {{"mode", drive_mode_name(target)},
                {"recording", loop_.requested_recording()},
                {"teleop", {{"steering", applied.steering()}, {"throttle", applied.throttle()}}},
                {"teleop_ignored", ignored}});
  }

  struct PngSlot {
    std::mutex m;
    std::uint64_t frame_id = 0;
    std::shared_ptr<const std::string> data;
  };

  DriveLoop& loop_;
  TelemetryOptions opts_;
  httplib::Server svr_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::size_t> streams_{0};
  int port_ = 0;
  PngSlot video_cache_;
  PngSlot sal_cache_;
};

/// Appends every snapshot to a CSV file (the per-run log).
class SnapshotLog {
 public:
  explicit SnapshotLog(const std::filesystem::path& path) : out_(path) {
    require(static_cast<bool>(out_), Errc::io, "cannot write " + path.string());
    out_ << std::setprecision(10);
    write_snapshot_csv_header(out_);
  }
  void write(const TelemetrySnapshot& s) { write_snapshot_csv_row(out_, s); }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

}  // namespace rcpilot
