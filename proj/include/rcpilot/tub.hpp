#pragma once

// Tub layout (format_version 1):
//
//   <dir>/meta.json        {"format_version", "created_at", "record_rate_hz", "sim_config": {...}}
//   <dir>/manifest.jsonl   one JSON object per line, append-only:
//                          {"frame_id", "image_ref", "steering", "throttle",
//                           "mode": "user"|"expert"|"auto", "timestamp", "lap", "run"}
//   <dir>/images/<frame_id>.png   160x120 RGB
//
// A manifest line is written with a single append; a crash can leave at most
// one torn final line (no trailing newline), which reopening truncates.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rcpilot/actuation.hpp"
#include "rcpilot/fpv.hpp"
#include "rcpilot/nn/train.hpp"

namespace rcpilot::tub {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr int kTubFormatVersion = 1;
constexpr double kRecordRateHz = 20.0;

enum class RecordMode { user, expert, autopilot };

inline std::string mode_name(RecordMode m) {
  switch (m) {
    case RecordMode::user: return "user";
    case RecordMode::expert: return "expert";
    case RecordMode::autopilot: return "auto";
  }
  return "user";
}

inline RecordMode parse_mode(const std::string& s) {
  if (s == "user") return RecordMode::user;
  if (s == "expert") return RecordMode::expert;
  if (s == "auto") return RecordMode::autopilot;
  throw Error(Errc::parse, "unknown record mode '" + s + "'");
}

struct TubRecord {
  std::uint64_t frame_id = 0;
  std::string image_ref;
  double steering = 0.0;
  double throttle = 0.0;
  RecordMode mode = RecordMode::user;
  double timestamp = 0.0;
  std::int64_t lap = 0;
  /// Recording run; sequence windows never cross a run boundary.
  std::int64_t run = 0;

  friend bool operator==(const TubRecord&, const TubRecord&) = default;
};

inline json to_json(const TubRecord& r) {
  return {{"frame_id", r.frame_id}, {"image_ref", r.image_ref}, {"steering", r.steering}, {"throttle", r.throttle},
          {"mode", mode_name(r.mode)}, {"timestamp", r.timestamp}, {"lap", r.lap}, {"run", r.run}};
}

inline TubRecord record_from_json(const json& j) {
  TubRecord r;
  try {
    r.frame_id = j.at("frame_id").get<std::uint64_t>();
    r.image_ref = j.at("image_ref").get<std::string>();
    r.steering = j.at("steering").get<double>();
    r.throttle = j.at("throttle").get<double>();
    r.mode = parse_mode(j.at("mode").get<std::string>());
    r.timestamp = j.at("timestamp").get<double>();
    r.lap = j.at("lap").get<std::int64_t>();
    r.run = j.value("run", std::int64_t{0});
  } catch (const json::exception& e) {
    throw Error(Errc::parse, std::string("bad tub record: ") + e.what());
  }
  require(std::abs(r.steering) <= 1.0 && std::abs(r.throttle) <= 1.0, Errc::parse,
          "record " + std::to_string(r.frame_id) + " has a command outside [-1, 1]");
  return r;
}

struct TubMeta {
  int format_version = kTubFormatVersion;
  std::string created_at;
  double record_rate_hz = kRecordRateHz;
  json sim_config = json::object();
};

inline std::string utc_now_iso8601() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline json sim_config_json(const SimConfig& c, const std::string& scenario) {
  return {{"scenario", scenario},
          {"wheelbase", c.wheelbase},
          {"dt", c.dt},
          {"max_steer", c.max_steer},
          {"max_speed", c.max_speed},
          {"motor_tau", c.motor_tau},
          {"ticks_per_meter", c.ticks_per_meter},
          {"seed", c.seed}};
}

inline TubMeta read_meta(const fs::path& dir) {
  std::ifstream in(dir / "meta.json");
  require(static_cast<bool>(in), Errc::io, "no meta.json in " + dir.string());
  TubMeta m;
  try {
    const json j = json::parse(in);
    m.format_version = j.at("format_version").get<int>();
    m.created_at = j.value("created_at", "");
    m.record_rate_hz = j.value("record_rate_hz", kRecordRateHz);
    m.sim_config = j.value("sim_config", json::object());
  } catch (const json::exception& e) {
    throw Error(Errc::parse, dir.string() + "/meta.json: " + e.what());
  }
  require(m.format_version == kTubFormatVersion, Errc::version_mismatch,
          "tub format " + std::to_string(m.format_version) + ", expected " + std::to_string(kTubFormatVersion));
  return m;
}

struct ManifestScan {
  std::vector<TubRecord> records;
  std::uintmax_t durable_bytes = 0;  // offset just past the last complete line
  bool torn_tail = false;
};

/// Parses manifest.jsonl. Only the final line may be incomplete; anything
/// else malformed is a parse error naming the line.
inline ManifestScan scan_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.jsonl", std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "no manifest.jsonl in " + dir.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  ManifestScan scan;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    ++line_no;
    if (nl == std::string::npos) {
      scan.torn_tail = true;
      break;
    }
    const std::string_view line(text.data() + pos, nl - pos);
    if (!line.empty()) {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw Error(Errc::parse, "manifest line " + std::to_string(line_no) + ": " + e.what());
      }
      auto r = record_from_json(j);
      require(scan.records.empty() || r.frame_id > scan.records.back().frame_id, Errc::parse,
              "manifest line " + std::to_string(line_no) + ": frame_id not increasing");
      scan.records.push_back(std::move(r));
    }
    pos = nl + 1;
    scan.durable_bytes = pos;
  }
  return scan;
}

/// Single writer of a tub directory.
class TubWriter {
 public:
  /// Creates a new tub; the directory must not already hold one.
  static TubWriter create(const fs::path& dir, TubMeta meta = {}) {
    require(!fs::exists(dir / "manifest.jsonl"), Errc::invalid_argument, dir.string() + " already holds a tub");
    fs::create_directories(dir / "images");
    if (meta.created_at.empty()) meta.created_at = utc_now_iso8601();
    const json j = {{"format_version", meta.format_version},
                    {"created_at", meta.created_at},
                    {"record_rate_hz", meta.record_rate_hz},
                    {"sim_config", meta.sim_config}};
    {
      std::ofstream out(dir / "meta.json");
      require(static_cast<bool>(out), Errc::io, "cannot write " + (dir / "meta.json").string());
      out << j.dump(2) << '\n';
    }
    std::ofstream(dir / "manifest.jsonl").close();
    return TubWriter(dir, 0, 0);
  }

  /// Reopens an existing tub for appending, truncating a torn final line.
  static TubWriter open(const fs::path& dir) {
    read_meta(dir);
    const auto scan = scan_manifest(dir);
    if (scan.torn_tail) fs::resize_file(dir / "manifest.jsonl", scan.durable_bytes);
    fs::create_directories(dir / "images");
    const std::uint64_t next = scan.records.empty() ? 0 : scan.records.back().frame_id + 1;
    return TubWriter(dir, next, scan.records.size());
  }

  TubWriter(TubWriter&& o) noexcept : dir_(std::move(o.dir_)), fd_(o.fd_), next_id_(o.next_id_), count_(o.count_) {
    o.fd_ = -1;
  }
  TubWriter& operator=(TubWriter&&) = delete;
  TubWriter(const TubWriter&) = delete;
  ~TubWriter() {
    if (fd_ >= 0) ::close(fd_);
  }

  const fs::path& dir() const { return dir_; }
  std::size_t size() const { return count_; }
  std::uint64_t next_frame_id() const { return next_id_; }

  /// Writes the PNG, then the manifest line. On any failure the record is
  /// not counted and the manifest is left as it was.
  std::uint64_t append(const CameraFrame& frame, const NormalizedCommand& cmd, RecordMode mode, double timestamp,
                       std::int64_t lap = 0, std::int64_t run = 0) {
    TubRecord r;
    r.frame_id = next_id_;
    r.image_ref = "images/" + std::to_string(r.frame_id) + ".png";
    r.steering = cmd.steering();
    r.throttle = cmd.throttle();
    r.mode = mode;
    r.timestamp = timestamp;
    r.lap = lap;
    r.run = run;

    const auto png_bytes = encode_png(frame);
    const fs::path img = dir_ / r.image_ref;
    const fs::path tmp = img.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      require(static_cast<bool>(out), Errc::io, "cannot write " + tmp.string());
      out.write(reinterpret_cast<const char*>(png_bytes.data()), static_cast<std::streamsize>(png_bytes.size()));
      require(static_cast<bool>(out.flush()), Errc::io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, img, ec);
    if (ec) {
      fs::remove(tmp, ec);
      throw Error(Errc::io, "cannot place " + img.string());
    }

    const std::string line = to_json(r).dump() + "\n";
    const off_t before = ::lseek(fd_, 0, SEEK_END);
    const ssize_t n = ::write(fd_, line.data(), line.size());
    if (n != static_cast<ssize_t>(line.size())) {
      if (before >= 0 && ::ftruncate(fd_, before) != 0) {
        // nothing more to do; reopen will drop the torn line
      }
      throw Error(Errc::io, "manifest append failed for frame " + std::to_string(r.frame_id));
    }
    ++next_id_;
    ++count_;
    return r.frame_id;
  }

 private:
  TubWriter(fs::path dir, std::uint64_t next, std::size_t count) : dir_(std::move(dir)), next_id_(next), count_(count) {
    fd_ = ::open((dir_ / "manifest.jsonl").c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
    require(fd_ >= 0, Errc::io, "cannot open " + (dir_ / "manifest.jsonl").string());
  }

  fs::path dir_;
  int fd_ = -1;
  std::uint64_t next_id_ = 0;
  std::size_t count_ = 0;
};

/// Read-only view of a tub's manifest.
class Tub {
 public:
  explicit Tub(const fs::path& dir) : dir_(dir), meta_(read_meta(dir)), records_(scan_manifest(dir).records) {}

  const fs::path& dir() const { return dir_; }
  const TubMeta& meta() const { return meta_; }
  const std::vector<TubRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  CameraFrame load_image(const TubRecord& r) const {
    std::ifstream in(dir_ / r.image_ref, std::ios::binary);
    require(static_cast<bool>(in), Errc::io, "missing image " + r.image_ref);
    const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    auto f = decode_png(bytes);
    f.frame_id = r.frame_id;
    f.timestamp = r.timestamp;
    return f;
  }

  bool image_ok(const TubRecord& r) const {
    try {
      load_image(r);
      return true;
    } catch (const Error&) {
      return false;
    }
  }

 private:
  fs::path dir_;
  TubMeta meta_;
  std::vector<TubRecord> records_;
};

/// Training samples drawn from a tub. With sequence_length T > 1 a sample is
/// the window of T consecutive frames of one run ending at an anchor record;
/// the target is the anchor's command.
class TubDataset : public nn::DataView<float> {
 public:
  TubDataset(std::shared_ptr<const Tub> tub, std::vector<std::size_t> anchors, std::size_t sequence_length,
             std::shared_ptr<const std::vector<bool>> usable)
      : tub_(std::move(tub)), t_(sequence_length), usable_(std::move(usable)) {
    require(t_ >= 1, Errc::invalid_argument, "sequence length must be >= 1");
    for (auto a : anchors)
      if (window_ok(a)) anchors_.push_back(a);
  }

  std::size_t size() const override { return anchors_.size(); }
  std::size_t sequence_length() const { return t_; }
  const std::vector<std::size_t>& anchors() const { return anchors_; }

  /// At most n samples, evenly spaced over the anchors.
  TubDataset thinned(std::size_t n) const {
    if (n == 0 || n >= anchors_.size()) return *this;
    std::vector<std::size_t> keep;
    keep.reserve(n);
    for (std::size_t i = 0; i < n; ++i) keep.push_back(anchors_[i * anchors_.size() / n]);
    return TubDataset(tub_, std::move(keep), t_, usable_);
  }

  /// Record indices of sample i, oldest first.
  std::vector<std::size_t> window(std::size_t i) const {
    std::vector<std::size_t> w(t_);
    for (std::size_t k = 0; k < t_; ++k) w[k] = anchors_.at(i) - (t_ - 1 - k);
    return w;
  }

  nn::Shape sample_shape() const override {
    nn::Shape s{kFrameHeight, kFrameWidth, 3};
    if (t_ > 1) s.insert(s.begin(), t_);
    return s;
  }

  void fill(std::span<const std::size_t> idx, nn::Tensor<float>& x, nn::Tensor<float>& y) const override {
    const nn::Shape ss = sample_shape();
    x.resize(nn::detail::batched(idx.size(), ss));
    y.resize({idx.size(), 2});
    float* dst = x.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t r : window(idx[i])) {
        to_model_input<float>(tub_->load_image(tub_->records()[r]), std::span<float>(dst, kFrameBytes));
        dst += kFrameBytes;
      }
      const auto& rec = tub_->records()[anchors_[idx[i]]];
      y[2 * i] = static_cast<float>(rec.steering);
      y[2 * i + 1] = static_cast<float>(rec.throttle);
    }
  }

 private:
  bool window_ok(std::size_t a) const {
    const auto& recs = tub_->records();
    if (a >= recs.size() || a + 1 < t_) return false;
    for (std::size_t k = 0; k < t_; ++k) {
      const std::size_t r = a - k;
      if (!(*usable_)[r]) return false;
      if (k > 0 && (recs[r].run != recs[a].run || recs[r].frame_id + k != recs[a].frame_id)) return false;
    }
    return true;
  }

  std::shared_ptr<const Tub> tub_;
  std::size_t t_;
  std::shared_ptr<const std::vector<bool>> usable_;
  std::vector<std::size_t> anchors_;
};

struct Split {
  TubDataset train;
  TubDataset val;
  std::size_t usable = 0;
  std::size_t skipped = 0;  // records whose image is missing or corrupt
};

/// Training share of n usable records: floor(n * (1 - val_fraction)).
inline std::size_t train_count(std::size_t n, double val_fraction) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - val_fraction) + 1e-9));
}

/// Deterministic shuffle of the usable records, then the first
/// floor(n * (1 - val_fraction)) go to training.
inline Split load_split(const fs::path& dir, double val_fraction, std::uint64_t seed, std::size_t sequence_length = 1) {
  require(val_fraction > 0 && val_fraction < 1, Errc::invalid_argument, "val_fraction must be in (0, 1)");
  auto tub = std::make_shared<const Tub>(dir);
  require(tub->size() > 0, Errc::empty_dataset, "tub " + dir.string() + " has no records");
  auto usable = std::make_shared<std::vector<bool>>(tub->size());
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < tub->size(); ++i) {
    (*usable)[i] = tub->image_ok(tub->records()[i]);
    if ((*usable)[i]) idx.push_back(i);
  }
  require(!idx.empty(), Errc::empty_dataset, "tub " + dir.string() + " has no readable images");
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = train_count(idx.size(), val_fraction);
  std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> va(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  const std::size_t n_usable = idx.size();
  std::shared_ptr<const std::vector<bool>> u = usable;
  return Split{TubDataset(tub, std::move(tr), sequence_length, u), TubDataset(tub, std::move(va), sequence_length, u),
               n_usable, tub->size() - n_usable};
}

/// Whole tub as one view (no split).
inline TubDataset load_all(const fs::path& dir, std::size_t sequence_length = 1) {
  auto tub = std::make_shared<const Tub>(dir);
  require(tub->size() > 0, Errc::empty_dataset, "tub " + dir.string() + " has no records");
  auto usable = std::make_shared<std::vector<bool>>(tub->size());
  for (std::size_t i = 0; i < tub->size(); ++i) (*usable)[i] = tub->image_ok(tub->records()[i]);
  std::vector<std::size_t> all(tub->size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return TubDataset(tub, std::move(all), sequence_length, usable);
}

/// Iterates a view in (optionally shuffled) batches.
class Batches {
 public:
  Batches(const nn::DataView<float>& view, std::size_t batch_size, std::uint64_t seed, bool shuffle = true)
      : view_(view), batch_(batch_size), order_(view.size()) {
    require(batch_size >= 1, Errc::invalid_argument, "batch size must be >= 1");
    require(view.size() > 0, Errc::empty_dataset, "view holds no complete sample");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (shuffle) {
      std::mt19937_64 rng(seed);
      std::shuffle(order_.begin(), order_.end(), rng);
    }
  }

  std::size_t count() const { return (order_.size() + batch_ - 1) / batch_; }

  bool next(nn::Tensor<float>& x, nn::Tensor<float>& y) {
    if (pos_ >= order_.size()) return false;
    const std::size_t n = std::min(batch_, order_.size() - pos_);
    view_.fill(std::span(order_).subspan(pos_, n), x, y);
    pos_ += n;
    return true;
  }

 private:
  const nn::DataView<float>& view_;
  std::size_t batch_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct TubStats {
  std::size_t records = 0;
  std::size_t runs = 0;
  std::int64_t max_lap = 0;
  std::map<std::string, std::size_t> modes;
  std::array<std::size_t, 10> steering_hist{};  // bins of width 0.2 over [-1, 1]
  std::array<std::size_t, 10> throttle_hist{};
  double duration_s = 0.0;
};

inline TubStats tub_stats(const Tub& tub) {
  TubStats st;
  st.records = tub.size();
  std::set<std::int64_t> runs;
  auto bin = [](double v) { return static_cast<std::size_t>(std::clamp(static_cast<int>((v + 1.0) / 0.2), 0, 9)); };
  double t0 = 0, t1 = 0;
  for (std::size_t i = 0; i < tub.size(); ++i) {
    const auto& r = tub.records()[i];
    runs.insert(r.run);
    st.max_lap = std::max(st.max_lap, r.lap);
    ++st.modes[mode_name(r.mode)];
    ++st.steering_hist[bin(r.steering)];
    ++st.throttle_hist[bin(r.throttle)];
    if (i == 0) t0 = t1 = r.timestamp;
    t0 = std::min(t0, r.timestamp);
    t1 = std::max(t1, r.timestamp);
  }
  st.runs = runs.size();
  st.duration_s = t1 - t0;
  return st;
}

}  // namespace rcpilot::tub
