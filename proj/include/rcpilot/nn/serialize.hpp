#pragma once

// Weight container, all integers little-endian:
//
//   "RCPW"                      magic
//   u32 version                 currently 1
//   str architecture            "linear" | "rnn"
//   u32 count, count x (str key, i64 value)   hyperparameters
//   u32 scalar_bytes            4 (float32) or 8 (float64)
//   u32 count, count x array
//     str name, u32 rank, rank x u64 dim, product(dims) raw scalars
//
// where str is u32 length followed by that many bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rcpilot/nn/models.hpp"

namespace rcpilot::nn {

static_assert(std::endian::native == std::endian::little, "weight container assumes a little-endian host");

constexpr std::uint32_t kWeightFormatVersion = 1;
inline constexpr char kWeightMagic[4] = {'R', 'C', 'P', 'W'};

struct ContainerHeader {
  std::uint32_t version = 0;
  std::string architecture;
  std::map<std::string, std::int64_t> hyperparameters;
};

namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(V));
  }
  void put_str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> out;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}

  void need(std::size_t n) const {
    require(n <= bytes_.size() - pos_, Errc::truncated_container,
            "weight container ends at byte " + std::to_string(bytes_.size()) + ", needed " + std::to_string(n) +
                " more at offset " + std::to_string(pos_));
  }
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string get_str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline ContainerHeader read_header(ByteReader& r) {
  const auto* magic = r.take(4);
  require(std::memcmp(magic, kWeightMagic, 4) == 0, Errc::parse, "not a weight container (bad magic)");
  ContainerHeader h;
  h.version = r.get<std::uint32_t>();
  require(h.version == kWeightFormatVersion, Errc::version_mismatch,
          "weight container version " + std::to_string(h.version) + ", this build reads version " +
              std::to_string(kWeightFormatVersion));
  h.architecture = r.get_str();
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto key = r.get_str();
    h.hyperparameters[key] = r.get<std::int64_t>();
  }
  return h;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_weights(Model<T>& model) {
  detail::ByteWriter w;
  w.out.insert(w.out.end(), kWeightMagic, kWeightMagic + 4);
  w.put(kWeightFormatVersion);
  w.put_str(architecture_name(model.architecture()));
  const auto hp = model.config().hyperparameters();
  w.put(static_cast<std::uint32_t>(hp.size()));
  for (const auto& [k, v] : hp) {
    w.put_str(k);
    w.put(v);
  }
  w.put(static_cast<std::uint32_t>(sizeof(T)));
  const auto params = model.params();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put_str(p.name);
    w.put(static_cast<std::uint32_t>(p.value->rank()));
    for (auto d : p.value->shape()) w.put(static_cast<std::uint64_t>(d));
    for (T v : p.value->values()) w.put(v);
  }
  return std::move(w.out);
}

inline ContainerHeader read_weight_header(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  return detail::read_header(r);
}

inline ModelConfig config_from_header(const ContainerHeader& h) {
  ModelConfig cfg;
  require(h.architecture == "linear" || h.architecture == "rnn", Errc::architecture_mismatch,
          "unknown architecture '" + h.architecture + "'");
  cfg.architecture = parse_architecture(h.architecture);
  auto get = [&](const std::string& k) {
    auto it = h.hyperparameters.find(k);
    require(it != h.hyperparameters.end(), Errc::architecture_mismatch, "missing hyperparameter '" + k + "'");
    return it->second;
  };
  if (cfg.architecture == Architecture::rnn) {
    const auto t = get("sequence_length");
    require(t >= 1 && t <= 64, Errc::architecture_mismatch, "sequence_length out of range");
    cfg.sequence_length = static_cast<std::size_t>(t);
  } else {
    cfg.single_head = get("single_head") != 0;
  }
  return cfg;
}

/// Replaces the model's weights. Nothing is modified unless the whole
/// container validates.
template <typename T>
void deserialize_weights(Model<T>& model, std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto h = detail::read_header(r);
  require(h.architecture == architecture_name(model.architecture()), Errc::architecture_mismatch,
          "container holds a '" + h.architecture + "' model, expected '" + architecture_name(model.architecture()) + "'");
  require(h.hyperparameters == model.config().hyperparameters(), Errc::architecture_mismatch,
          "container hyperparameters differ from the model's");
  const auto scalar = r.get<std::uint32_t>();
  require(scalar == 4 || scalar == 8, Errc::parse, "unsupported scalar width " + std::to_string(scalar));
  auto params = model.params();
  const auto count = r.get<std::uint32_t>();
  require(count == params.size(), Errc::shape_mismatch,
          "container has " + std::to_string(count) + " arrays, model has " + std::to_string(params.size()));
  // Structure first, so a damaged file fails before any conversion work.
  std::vector<const std::uint8_t*> raw(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.get_str();
    const auto rank = r.get<std::uint32_t>();
    r.need(static_cast<std::size_t>(rank) * 8);
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const auto& p = params[i];
    require(name == p.name, Errc::shape_mismatch, "array " + std::to_string(i) + " is '" + name + "', expected '" + p.name + "'");
    require(shape == p.value->shape(), Errc::shape_mismatch,
            "array '" + name + "' has shape " + shape_str(shape) + ", expected " + shape_str(p.value->shape()));
    raw[i] = r.take(shape_size(shape) * scalar);
  }
  require(r.remaining() == 0, Errc::parse, std::to_string(r.remaining()) + " trailing bytes after the last array");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = *params[i].value;
    for (std::size_t j = 0; j < t.size(); ++j) {
      if (scalar == 4) {
        float v;
        std::memcpy(&v, raw[i] + 4 * j, 4);
        t[j] = static_cast<T>(v);
      } else {
        double v;
        std::memcpy(&v, raw[i] + 8 * j, 8);
        t[j] = static_cast<T>(v);
      }
    }
  }
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
void save_weights(Model<T>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(model);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), Errc::io, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out.flush()), Errc::io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void load_weights(Model<T>& model, const std::filesystem::path& path) {
  deserialize_weights(model, read_bytes(path));
}

/// Builds a model of whatever architecture the file declares.
template <typename T>
std::unique_ptr<Model<T>> load_model(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  auto model = std::make_unique<Model<T>>(config_from_header(read_weight_header(bytes)));
  deserialize_weights(*model, bytes);
  return model;
}

}  // namespace rcpilot::nn
