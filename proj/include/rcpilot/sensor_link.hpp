#pragma once

// Fixed 14-byte frame from the sensor microcontroller to the drive computer:
//
//   offset  size  field
//   0       2     magic 0xAA 0x55
//   2       1     seq (wrapping u8)
//   3       4     encoder_ticks  i32 LE, cumulative
//   7       2     yaw_rate       i16 LE, centirad/s
//   9       2     accel_long     i16 LE, mm/s^2
//   11      2     accel_lat      i16 LE, mm/s^2
//   13      1     crc8 (poly 0x07, init 0x00) over bytes 2..12

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

#include "rcpilot/vehicle.hpp"

namespace rcpilot::sensor_link {

constexpr std::size_t kFrameSize = 14;
constexpr std::uint8_t kMagic0 = 0xAA;
constexpr std::uint8_t kMagic1 = 0x55;

using FrameBytes = std::array<std::uint8_t, kFrameSize>;

constexpr std::uint8_t crc8(std::span<const std::uint8_t> bytes) {
  std::uint8_t crc = 0x00;
  for (auto b : bytes) {
    crc ^= b;
    for (int i = 0; i < 8; ++i) crc = static_cast<std::uint8_t>((crc & 0x80) ? (crc << 1) ^ 0x07 : (crc << 1));
  }
  return crc;
}

struct SensorFrame {
  std::uint8_t seq = 0;
  std::int32_t encoder_ticks = 0;
  std::int16_t yaw_rate = 0;    // centirad/s
  std::int16_t accel_long = 0;  // mm/s^2
  std::int16_t accel_lat = 0;   // mm/s^2
  std::uint8_t crc = 0;

  double yaw_rate_rad_s() const { return yaw_rate / 100.0; }
  double accel_long_m_s2() const { return accel_long / 1000.0; }
  double accel_lat_m_s2() const { return accel_lat / 1000.0; }

  friend bool operator==(const SensorFrame&, const SensorFrame&) = default;
};

namespace detail {

template <typename Int>
Int saturate(double v) {
  if (std::isnan(v)) return 0;
  const double t = std::trunc(v);
  if (t >= static_cast<double>(std::numeric_limits<Int>::max())) return std::numeric_limits<Int>::max();
  if (t <= static_cast<double>(std::numeric_limits<Int>::min())) return std::numeric_limits<Int>::min();
  return static_cast<Int>(t);
}

inline void put_le(std::uint8_t* dst, std::uint32_t v, int n) {
  for (int i = 0; i < n; ++i) dst[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline std::uint32_t get_le(const std::uint8_t* src, int n) {
  std::uint32_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint32_t>(src[i]) << (8 * i);
  return v;
}

}  // namespace detail

/// Physical units -> wire integers. Truncates toward zero and saturates.
inline SensorFrame to_frame(const RawSensorSample& s, std::uint8_t seq) {
  SensorFrame f;
  f.seq = seq;
  f.encoder_ticks = detail::saturate<std::int32_t>(static_cast<double>(s.encoder_ticks));
  f.yaw_rate = detail::saturate<std::int16_t>(s.yaw_rate * 100.0);
  f.accel_long = detail::saturate<std::int16_t>(s.accel_long * 1000.0);
  f.accel_lat = detail::saturate<std::int16_t>(s.accel_lat * 1000.0);
  return f;
}

/// Serializes a frame; the crc field of `f` is ignored and recomputed.
inline FrameBytes encode(const SensorFrame& f) {
  FrameBytes b{};
  b[0] = kMagic0;
  b[1] = kMagic1;
  b[2] = f.seq;
  detail::put_le(&b[3], static_cast<std::uint32_t>(f.encoder_ticks), 4);
  detail::put_le(&b[7], static_cast<std::uint16_t>(f.yaw_rate), 2);
  detail::put_le(&b[9], static_cast<std::uint16_t>(f.accel_long), 2);
  detail::put_le(&b[11], static_cast<std::uint16_t>(f.accel_lat), 2);
  b[13] = crc8(std::span<const std::uint8_t>(b).subspan(2, 11));
  return b;
}

inline FrameBytes encode(const RawSensorSample& s, std::uint8_t seq) { return encode(to_frame(s, seq)); }

struct ParseDiagnostics {
  std::size_t resyncs = 0;
  std::size_t crc_failures = 0;
  std::size_t truncated = 0;

  bool clean() const { return resyncs == 0 && crc_failures == 0 && truncated == 0; }
  friend bool operator==(const ParseDiagnostics&, const ParseDiagnostics&) = default;
};

/// Incremental scanner. Bytes are fed as they arrive; complete frames are
/// emitted in order. A CRC failure drops one byte and rescans, so a frame
/// that starts inside a corrupt one is still recovered. Skipping garbage
/// that is not part of a CRC recovery counts as one resync per skipped run.
class StreamParser {
 public:
  template <typename OnFrame>
  void feed(std::span<const std::uint8_t> bytes, OnFrame&& on_frame) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
    std::size_t pos = 0;
    while (buf_.size() - pos >= 2) {
      if (buf_[pos] != kMagic0 || buf_[pos + 1] != kMagic1) {
        if (!skipping_ && !recovering_) ++diag_.resyncs;
        skipping_ = true;
        ++pos;
        continue;
      }
      if (buf_.size() - pos < kFrameSize) break;
      const std::uint8_t* p = buf_.data() + pos;
      const std::uint8_t expected = crc8(std::span<const std::uint8_t>(p + 2, 11));
      if (expected != p[13]) {
        ++diag_.crc_failures;
        recovering_ = true;
        skipping_ = true;
        ++pos;
        continue;
      }
      SensorFrame f;
      f.seq = p[2];
      f.encoder_ticks = static_cast<std::int32_t>(detail::get_le(p + 3, 4));
      f.yaw_rate = static_cast<std::int16_t>(detail::get_le(p + 7, 2));
      f.accel_long = static_cast<std::int16_t>(detail::get_le(p + 9, 2));
      f.accel_lat = static_cast<std::int16_t>(detail::get_le(p + 11, 2));
      f.crc = p[13];
      on_frame(f);
      skipping_ = false;
      recovering_ = false;
      pos += kFrameSize;
    }
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos));
  }

  /// End of stream: a pending partial frame counts as truncated, a lone
  /// trailing byte as garbage.
  void finish() {
    if (buf_.size() >= 2) {
      ++diag_.truncated;
    } else if (buf_.size() == 1 && buf_[0] != kMagic0 && !skipping_ && !recovering_) {
      ++diag_.resyncs;
    } else if (buf_.size() == 1 && buf_[0] == kMagic0) {
      ++diag_.truncated;
    }
    buf_.clear();
    skipping_ = false;
    recovering_ = false;
  }

  const ParseDiagnostics& diagnostics() const { return diag_; }
  std::size_t buffered() const { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
  ParseDiagnostics diag_;
  bool skipping_ = false;
  bool recovering_ = false;
};

struct ParseResult {
  std::vector<SensorFrame> frames;
  ParseDiagnostics diagnostics;
};

inline ParseResult parse_stream(std::span<const std::uint8_t> bytes) {
  ParseResult out;
  StreamParser parser;
  parser.feed(bytes, [&](const SensorFrame& f) { out.frames.push_back(f); });
  parser.finish();
  out.diagnostics = parser.diagnostics();
  return out;
}

struct Gap {
  std::size_t index = 0;  // index of the first frame after the gap
  int missing = 0;
  friend bool operator==(const Gap&, const Gap&) = default;
};

/// Dropped-frame counts from seq deltas modulo 256.
inline std::vector<Gap> gap_detect(std::span<const SensorFrame> frames) {
  std::vector<Gap> gaps;
  for (std::size_t i = 1; i < frames.size(); ++i) {
    const int delta = (static_cast<int>(frames[i].seq) - static_cast<int>(frames[i - 1].seq) + 256) % 256;
    if (delta != 1) gaps.push_back({i, (delta + 255) % 256});
  }
  return gaps;
}

inline void write_csv_header(std::ostream& out) {
  out << "index,seq,encoder_ticks,yaw_rate_rad_s,accel_long_m_s2,accel_lat_m_s2\n";
}

inline void write_csv_row(std::ostream& out, std::size_t index, const SensorFrame& f) {
  out << index << ',' << static_cast<int>(f.seq) << ',' << f.encoder_ticks << ',' << f.yaw_rate_rad_s() << ','
      << f.accel_long_m_s2() << ',' << f.accel_lat_m_s2() << '\n';
}

}  // namespace rcpilot::sensor_link
