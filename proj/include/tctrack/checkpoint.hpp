#pragma once

// Binary container of named float64 tensors.
//
//   "TCTK" | u32 version | u32 count | count x entry
//   entry: u32 name_len | name bytes | u32 rank | rank x i64 dim | numel x f64
//
// Integers and doubles are written little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "tctrack/model.hpp"

namespace tctrack {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'T', 'C', 'T', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorMap = std::map<std::string, Tensor>;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError(std::string("truncated checkpoint: ") + what);
  return v;
}

}  // namespace detail

inline void write_tensors(std::ostream& os, const TensorMap& tensors) {
  os.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put<std::int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw CheckpointError("failed writing checkpoint");
}

inline TensorMap read_tensors(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("not a checkpoint file");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is, "count");
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint32_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("truncated checkpoint: name");
    const auto rank = detail::get<std::uint32_t>(is, "rank");
    if (rank > 8) throw CheckpointError("tensor '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = detail::get<std::int64_t>(is, "dim");
      if (d < 0) throw CheckpointError("tensor '" + name + "' has a negative dimension");
      shape.push_back(d);
    }
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw CheckpointError("truncated checkpoint: data of '" + name + "'");
    if (!out.emplace(name, std::move(t)).second) throw CheckpointError("duplicate tensor '" + name + "'");
  }
  return out;
}

inline std::string serialize(const TensorMap& tensors) {
  std::ostringstream os(std::ios::binary);
  write_tensors(os, tensors);
  return os.str();
}

inline TensorMap deserialize(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_tensors(is);
}

inline TensorMap parameter_tensors(const TCTrackModel& model) {
  TensorMap m;
  for (const auto& [name, p] : model.named_parameters())
    if (!m.emplace(name, p.value()).second) throw CheckpointError("duplicate parameter name '" + name + "'");
  return m;
}

inline void save_checkpoint(const TCTrackModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write '" + path + "'");
  write_tensors(os, parameter_tensors(model));
}

/// Every model parameter must be present with a matching shape; extra entries are an error.
inline void load_checkpoint(TCTrackModel& model, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read '" + path + "'");
  TensorMap m = read_tensors(is);
  auto params = model.named_parameters();
  for (auto& [name, p] : params) {
    auto it = m.find(name);
    if (it == m.end()) throw CheckpointError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape() != p.value().shape())
      throw CheckpointError("shape mismatch for '" + name + "': " + shape_str(it->second.shape()) + " vs " +
                            shape_str(p.value().shape()));
    Var(p).mutable_value() = std::move(it->second);
    m.erase(it);
  }
  if (!m.empty()) throw CheckpointError("checkpoint has unknown tensor '" + m.begin()->first + "'");
}

// Temporal state snapshots.

inline TensorMap state_tensors(const TemporalCalibState& s, const std::string& prefix = "calib") {
  if (!s.initialized()) return {};
  return {{prefix + ".x_star", s.x_star.value()}};
}

inline TensorMap state_tensors(const TemporalPrior& p, const std::string& prefix = "prior") {
  if (!p.tokens.defined()) return {};
  return {{prefix + ".tokens", p.tokens.value()},
          {prefix + ".size", Tensor({2}, {static_cast<double>(p.height), static_cast<double>(p.width)})}};
}

inline TensorMap state_tensors(const SequenceState& st) {
  TensorMap m;
  for (std::size_t i = 0; i < st.backbone.calib.size(); ++i)
    m.merge(state_tensors(st.backbone.calib[i], "backbone.calib" + std::to_string(i)));
  for (std::size_t i = 0; i < st.backbone.queues.size(); ++i)
    for (std::size_t j = 0; j < st.backbone.queues[i].items.size(); ++j)
      m.emplace("backbone.queue" + std::to_string(i) + "." + std::to_string(j), st.backbone.queues[i].items[j].value());
  m.merge(state_tensors(st.prior));
  return m;
}

}  // namespace tctrack
