#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mona/error.hpp"
#include "mona/rng.hpp"
#include "mona/tensor.hpp"

namespace mona {

struct LabeledImageSet {
  Tensor images;            // [N, C, H, W], values in [0, 1]
  std::vector<int> labels;  // [N], in [0, class_count)
  std::size_t class_count = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
};

// ---------------------------------------------------------------------------
// Synthetic oriented-grating generator
// ---------------------------------------------------------------------------

struct AngleBand {
  double lo_deg = 0.0;
  double hi_deg = 0.0;
};

// Class = orientation band of a sinusoidal grating. Every sample draws its
// angle, phase and noise from its own SplitMix64 counter stream, so
// generation is a pure function of (spec, split, index).
struct SyntheticTaskSpec {
  std::vector<AngleBand> bands;  // one per class, disjoint
  std::size_t samples_per_class = 100;
  std::size_t image_size = 16;
  double frequency = 4.0;  // cycles per image
  double noise_sigma = 0.05;
  std::uint64_t seed = 1;
  std::string split = "train";

  void validate() const {
    if (bands.empty()) throw ConfigError("synthetic spec: no angle bands");
    if (samples_per_class == 0 || image_size == 0) {
      throw ConfigError("synthetic spec: empty geometry");
    }
    for (const AngleBand& b : bands) {
      if (!(b.lo_deg < b.hi_deg)) {
        throw ConfigError("synthetic spec: band must satisfy lo < hi");
      }
    }
    for (std::size_t i = 0; i < bands.size(); ++i) {
      for (std::size_t j = i + 1; j < bands.size(); ++j) {
        if (bands[i].lo_deg < bands[j].hi_deg && bands[j].lo_deg < bands[i].hi_deg) {
          throw ConfigError("synthetic spec: bands " + std::to_string(i) + " and " +
                            std::to_string(j) + " overlap");
        }
      }
    }
  }
};

// Coarse two-band task used for pretraining.
inline SyntheticTaskSpec pretrain_task(std::uint64_t seed, std::size_t samples_per_class,
                                       std::size_t image_size) {
  SyntheticTaskSpec spec;
  spec.bands = {{0.0, 45.0}, {90.0, 135.0}};
  spec.samples_per_class = samples_per_class;
  spec.image_size = image_size;
  spec.seed = seed;
  return spec;
}

// The same two orientation regions split into four narrower bands: a
// structured shift that rewards re-adapted features.
inline SyntheticTaskSpec transfer_task(std::uint64_t seed, std::size_t samples_per_class,
                                       std::size_t image_size) {
  SyntheticTaskSpec spec;
  spec.bands = {{0.0, 22.5}, {22.5, 45.0}, {90.0, 112.5}, {112.5, 135.0}};
  spec.samples_per_class = samples_per_class;
  spec.image_size = image_size;
  spec.seed = seed;
  return spec;
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Pixels are quantized to the 256-level grid, so byte-format round trips
// reproduce the generated values exactly.
inline double quantize_pixel(double v) {
  const double clamped = std::min(1.0, std::max(0.0, v));
  return static_cast<double>(std::lround(clamped * 255.0)) / 255.0;
}

}  // namespace detail

inline LabeledImageSet gen_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  const std::size_t S = spec.image_size;
  const std::size_t classes = spec.bands.size();
  const std::size_t N = classes * spec.samples_per_class;
  LabeledImageSet set;
  set.images = Tensor::zeros({N, 1, S, S});
  set.labels.resize(N);
  set.class_count = classes;
  set.split = spec.split;

  const std::uint64_t split_key = spec.seed ^ detail::fnv1a(spec.split);
  double* out = set.images.data().data();
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      const std::size_t idx = c * spec.samples_per_class + i;
      set.labels[idx] = static_cast<int>(c);
      Rng rng(splitmix64_at(split_key, idx));
      const double theta =
          rng.uniform(spec.bands[c].lo_deg, spec.bands[c].hi_deg) * M_PI / 180.0;
      const double phase = rng.uniform(0.0, M_PI);
      const double fx = std::cos(theta) * spec.frequency;
      const double fy = std::sin(theta) * spec.frequency;
      double* img = out + idx * S * S;
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(S);
          const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(S);
          double val = 0.5 + 0.45 * std::sin(2.0 * M_PI * (u * fx + v * fy) + phase);
          if (spec.noise_sigma > 0.0) val += spec.noise_sigma * rng.normal();
          img[y * S + x] = detail::quantize_pixel(val);
        }
      }
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// IDX files (byte images, magic 0x00000803 / labels 0x00000801, big-endian)
// ---------------------------------------------------------------------------

namespace detail {

inline void write_be32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_be32(std::istream& is, std::size_t& offset,
                               const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) {
    throw IoError(what + ": truncated at byte " + std::to_string(offset));
  }
  offset += 4;
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

inline void write_idx(const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path,
                      const LabeledImageSet& set) {
  if (set.images.dim(1) != 1) {
    throw ConfigError("IDX image files hold a single channel, got " +
                      std::to_string(set.images.dim(1)));
  }
  const std::size_t N = set.size(), H = set.images.dim(2), W = set.images.dim(3);
  std::ofstream imf(images_path, std::ios::binary);
  if (!imf) throw IoError("cannot write " + images_path.string());
  detail::write_be32(imf, 0x00000803u);
  detail::write_be32(imf, static_cast<std::uint32_t>(N));
  detail::write_be32(imf, static_cast<std::uint32_t>(H));
  detail::write_be32(imf, static_cast<std::uint32_t>(W));
  for (double v : set.images.data()) {
    const unsigned char byte = static_cast<unsigned char>(
        std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
    imf.put(static_cast<char>(byte));
  }
  std::ofstream lbf(labels_path, std::ios::binary);
  if (!lbf) throw IoError("cannot write " + labels_path.string());
  detail::write_be32(lbf, 0x00000801u);
  detail::write_be32(lbf, static_cast<std::uint32_t>(N));
  for (int l : set.labels) lbf.put(static_cast<char>(static_cast<unsigned char>(l)));
}

inline LabeledImageSet load_idx(const std::filesystem::path& images_path,
                                const std::filesystem::path& labels_path) {
  std::ifstream imf(images_path, std::ios::binary);
  if (!imf) throw IoError("cannot open " + images_path.string());
  std::size_t off = 0;
  const auto magic = detail::read_be32(imf, off, images_path.string());
  if (magic != 0x00000803u) {
    std::ostringstream os;
    os << images_path.string() << ": bad magic 0x" << std::hex << magic << " at byte 0";
    throw IoError(os.str());
  }
  const auto N = detail::read_be32(imf, off, images_path.string());
  const auto H = detail::read_be32(imf, off, images_path.string());
  const auto W = detail::read_be32(imf, off, images_path.string());
  if (N == 0 || H == 0 || W == 0) {
    throw IoError(images_path.string() + ": zero dimension in header");
  }
  LabeledImageSet set;
  set.images = Tensor::zeros({N, 1, H, W});
  std::vector<char> bytes(static_cast<std::size_t>(N) * H * W);
  imf.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (imf.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError(images_path.string() + ": truncated pixel payload at byte " +
                  std::to_string(off + static_cast<std::size_t>(imf.gcount())));
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    set.images.data()[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  }

  std::ifstream lbf(labels_path, std::ios::binary);
  if (!lbf) throw IoError("cannot open " + labels_path.string());
  std::size_t loff = 0;
  const auto lmagic = detail::read_be32(lbf, loff, labels_path.string());
  if (lmagic != 0x00000801u) {
    std::ostringstream os;
    os << labels_path.string() << ": bad magic 0x" << std::hex << lmagic << " at byte 0";
    throw IoError(os.str());
  }
  const auto LN = detail::read_be32(lbf, loff, labels_path.string());
  if (LN != N) {
    throw IoError(labels_path.string() + ": label count " + std::to_string(LN) +
                  " != image count " + std::to_string(N));
  }
  set.labels.resize(N);
  int max_label = 0;
  for (std::uint32_t i = 0; i < N; ++i) {
    const int ch = lbf.get();
    if (ch == EOF) {
      throw IoError(labels_path.string() + ": truncated at byte " +
                    std::to_string(loff + i));
    }
    set.labels[i] = ch;
    max_label = std::max(max_label, ch);
  }
  set.class_count = static_cast<std::size_t>(max_label) + 1;
  set.split = "file";
  return set;
}

// ---------------------------------------------------------------------------
// CSV files: "# mona-images <C> <H> <W>" header, then label,v0,v1,... rows.
// ---------------------------------------------------------------------------

inline void write_csv_images(const std::filesystem::path& path,
                             const LabeledImageSet& set) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  const std::size_t C = set.images.dim(1), H = set.images.dim(2), W = set.images.dim(3);
  f << "# mona-images " << C << " " << H << " " << W << "\n";
  f.precision(17);
  const std::size_t px = C * H * W;
  for (std::size_t i = 0; i < set.size(); ++i) {
    f << set.labels[i];
    for (std::size_t p = 0; p < px; ++p) f << "," << set.images.data()[i * px + p];
    f << "\n";
  }
}

inline LabeledImageSet load_csv_images(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string header;
  std::getline(f, header);
  std::istringstream hs(header);
  std::string hash, tag;
  std::size_t C = 0, H = 0, W = 0;
  hs >> hash >> tag >> C >> H >> W;
  if (hash != "#" || tag != "mona-images" || C == 0 || H == 0 || W == 0) {
    throw IoError(path.string() + ": bad header line '" + header + "'");
  }
  const std::size_t px = C * H * W;
  std::vector<double> pixels;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    if (!std::getline(ls, cell, ',')) {
      throw IoError(path.string() + ": bad row at line " + std::to_string(line_no));
    }
    labels.push_back(std::stoi(cell));
    std::size_t count = 0;
    while (std::getline(ls, cell, ',')) {
      pixels.push_back(std::stod(cell));
      ++count;
    }
    if (count != px) {
      throw IoError(path.string() + ": line " + std::to_string(line_no) + " has " +
                    std::to_string(count) + " pixels, expected " + std::to_string(px));
    }
  }
  if (labels.empty()) throw IoError(path.string() + ": no samples");
  LabeledImageSet set;
  set.images = Tensor::from_data({labels.size(), C, H, W}, std::move(pixels));
  set.labels = std::move(labels);
  int max_label = 0;
  for (int l : set.labels) max_label = std::max(max_label, l);
  set.class_count = static_cast<std::size_t>(max_label) + 1;
  set.split = "file";
  return set;
}

}  // namespace mona
