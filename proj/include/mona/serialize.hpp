#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mona/error.hpp"
#include "mona/tensor.hpp"

namespace mona {

// Flat binary tensor record:
//   magic "MONA" | version u32 LE | rank u32 LE | dims u64 LE each | f64 LE payload
inline constexpr std::uint32_t kTensorFormatVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  unsigned char buf[sizeof(T)];
  std::uint64_t bits;
  if constexpr (sizeof(T) == 8) {
    std::memcpy(&bits, &value, 8);
  } else {
    bits = static_cast<std::uint64_t>(value);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  }
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, std::size_t& offset) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) {
    throw IoError("tensor record truncated at byte " + std::to_string(offset));
  }
  offset += sizeof(T);
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  }
  if constexpr (sizeof(T) == 8) {
    T out;
    std::memcpy(&out, &bits, 8);
    return out;
  } else {
    return static_cast<T>(bits);
  }
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("MONA", 4);
  detail::write_le<std::uint32_t>(os, kTensorFormatVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) {
    detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  }
  for (double v : t.data()) detail::write_le<double>(os, v);
  if (!os) throw IoError("tensor write failed");
}

inline Tensor read_tensor(std::istream& is) {
  std::size_t offset = 0;
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MONA", 4) != 0) {
    throw IoError("bad tensor magic at byte 0");
  }
  offset = 4;
  const auto version = detail::read_le<std::uint32_t>(is, offset);
  if (version != kTensorFormatVersion) {
    throw IoError("unsupported tensor format version " + std::to_string(version) +
                  " at byte 4");
  }
  const auto rank = detail::read_le<std::uint32_t>(is, offset);
  Shape shape(rank);
  for (std::uint32_t d = 0; d < rank; ++d) {
    shape[d] = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is, offset));
    if (shape[d] == 0) {
      throw IoError("zero dimension in tensor header at byte " +
                    std::to_string(offset - 8));
    }
  }
  const std::size_t n = numel_of(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = detail::read_le<double>(is, offset);
  return Tensor::from_data(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Checkpoint directory: manifest.txt (config lines + ordered parameter names)
// and tensors.bin (one tensor record per name, in manifest order).
// ---------------------------------------------------------------------------

struct CheckpointData {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::pair<std::string, Tensor>> params;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : params) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

inline void save_checkpoint(const std::filesystem::path& dir, const CheckpointData& ckpt) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream mf(dir / "manifest.txt");
    if (!mf) throw IoError("cannot write " + (dir / "manifest.txt").string());
    mf << "mona-checkpoint 1\n";
    for (const auto& [k, v] : ckpt.config) mf << "config " << k << " " << v << "\n";
    for (const auto& [name, t] : ckpt.params) mf << "param " << name << "\n";
  }
  std::ofstream bf(dir / "tensors.bin", std::ios::binary);
  if (!bf) throw IoError("cannot write " + (dir / "tensors.bin").string());
  for (const auto& [name, t] : ckpt.params) write_tensor(bf, t);
}

inline CheckpointData load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.txt";
  std::ifstream mf(manifest_path);
  if (!mf) throw IoError("checkpoint not found: " + manifest_path.string());
  std::string line;
  if (!std::getline(mf, line) || line != "mona-checkpoint 1") {
    throw IoError("bad checkpoint manifest header in " + manifest_path.string());
  }
  CheckpointData ckpt;
  std::vector<std::string> names;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    const std::string tag = line.substr(0, sp);
    if (tag == "config") {
      const auto rest = line.substr(sp + 1);
      const auto sp2 = rest.find(' ');
      ckpt.config.emplace_back(rest.substr(0, sp2),
                               sp2 == std::string::npos ? "" : rest.substr(sp2 + 1));
    } else if (tag == "param") {
      names.push_back(line.substr(sp + 1));
    } else {
      throw IoError("unknown manifest line: " + line);
    }
  }
  std::ifstream bf(dir / "tensors.bin", std::ios::binary);
  if (!bf) throw IoError("checkpoint payload missing: " + (dir / "tensors.bin").string());
  for (const std::string& name : names) {
    ckpt.params.emplace_back(name, read_tensor(bf));
  }
  return ckpt;
}

}  // namespace mona
