#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nmil/tensor.hpp"

namespace nmil {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named tensors plus string metadata. Entry order is preserved.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(std::string path, Tensor t) { tensors.emplace_back(std::move(path), std::move(t)); }

  const Tensor& get(const std::string& path) const {
    for (const auto& [p, t] : tensors) {
      if (p == path) return t;
    }
    throw CheckpointError("checkpoint has no tensor '" + path + "'");
  }

  bool contains(const std::string& path) const {
    for (const auto& [p, t] : tensors) {
      if (p == path) return true;
    }
    return false;
  }
};

// Layout (little endian):
//   "NMILCKPT" | u32 version | u64 n_meta | n_meta × (str key, str value)
//   | u64 n_tensors | n_tensors × (str path, u64 rank, rank × u64 extent, count × f64)
// where str = u64 length + bytes.
inline constexpr char kCheckpointMagic[8] = {'N', 'M', 'I', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void put_str(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is, const std::string& file) {
  T v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError(file + ": truncated checkpoint");
  return v;
}

inline std::string get_str(std::istream& is, const std::string& file) {
  const auto n = get<std::uint64_t>(is, file);
  if (n > (1ULL << 32)) throw CheckpointError(file + ": corrupt string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError(file + ": truncated checkpoint");
  return s;
}

}  // namespace detail

/// Writes to a sibling temp file and renames it into place.
inline void write_checkpoint(const std::filesystem::path& file, const Checkpoint& ck) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  const std::filesystem::path tmp = file.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put(os, kCheckpointVersion);
    detail::put<std::uint64_t>(os, ck.meta.size());
    for (const auto& [k, v] : ck.meta) {
      detail::put_str(os, k);
      detail::put_str(os, v);
    }
    detail::put<std::uint64_t>(os, ck.tensors.size());
    for (const auto& [path, t] : ck.tensors) {
      detail::put_str(os, path);
      detail::put<std::uint64_t>(os, t.rank());
      for (std::size_t d : t.shape()) detail::put<std::uint64_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& file) {
  const std::string name = file.string();
  std::ifstream is(file, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + name);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError(name + ": not a checkpoint file");
  }
  const auto version = detail::get<std::uint32_t>(is, name);
  if (version != kCheckpointVersion) {
    throw CheckpointError(name + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto n_meta = detail::get<std::uint64_t>(is, name);
  for (std::uint64_t i = 0; i < n_meta; ++i) {
    std::string k = detail::get_str(is, name);
    ck.meta[k] = detail::get_str(is, name);
  }
  const auto n = detail::get<std::uint64_t>(is, name);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string path = detail::get_str(is, name);
    const auto rank = detail::get<std::uint64_t>(is, name);
    if (rank > 8) throw CheckpointError(name + ": corrupt rank for '" + path + "'");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get<std::uint64_t>(is, name);
    std::vector<double> data(element_count(shape));
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw CheckpointError(name + ": truncated data for '" + path + "'");
    }
    ck.add(std::move(path), Tensor(std::move(shape), std::move(data)));
  }
  return ck;
}

}  // namespace nmil
