#pragma once

// Dataset handling: 64x64 patch pairs, the HPMD binary container, lattice
// extraction from aligned PGM image pairs, flip augmentation, per-modality
// normalization, train/val/test splits, and the synthetic multimodal
// generator used for desk-scale verification.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hpn/model.hpp"
#include "hpn/tensor.hpp"
#include "hpn/util.hpp"

namespace hpn {

inline constexpr int kPatchArea = kPatchSize * kPatchSize;

using PatchData = std::array<std::uint8_t, kPatchArea>;

struct PatchPair {
  PatchData x{};  // modality X
  PatchData y{};  // modality Y
  Label label = Label::kMatch;
  std::uint64_t source_id = 0;
};

// ---------------------------------------------------------------------------
// Container file: magic "HPMD", u16 version, u32 count, u16 H, u16 W, then
// per record 4096 bytes X, 4096 bytes Y, u8 label. Little-endian.

class ContainerError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kBadVersion, kBadGeometry, kTruncated, kBadLabel };
  ContainerError(Kind k, const std::string& msg)
      : std::runtime_error("container: " + msg), kind(k) {}
  Kind kind;
};

inline constexpr std::uint16_t kContainerVersion = 1;

inline std::vector<std::uint8_t> serialize_container(std::span<const PatchPair> pairs) {
  ByteWriter w;
  w.magic("HPMD");
  w.u16(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(pairs.size()));
  w.u16(kPatchSize);
  w.u16(kPatchSize);
  for (const PatchPair& p : pairs) {
    w.bytes(std::span<const std::uint8_t>(p.x.data(), p.x.size()));
    w.bytes(std::span<const std::uint8_t>(p.y.data(), p.y.size()));
    w.u8(static_cast<std::uint8_t>(p.label));
  }
  return w.take();
}

inline std::vector<PatchPair> parse_container(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (!r.magic("HPMD")) throw ContainerError(ContainerError::Kind::kBadMagic, "bad magic (expected HPMD)");
  std::uint16_t version = 0;
  std::uint32_t count = 0;
  std::uint16_t h = 0, w = 0;
  if (!r.u16(version) || !r.u32(count) || !r.u16(h) || !r.u16(w))
    throw ContainerError(ContainerError::Kind::kTruncated, "truncated header");
  if (version != kContainerVersion)
    throw ContainerError(ContainerError::Kind::kBadVersion, "unsupported version " + std::to_string(version));
  if (h != kPatchSize || w != kPatchSize)
    throw ContainerError(ContainerError::Kind::kBadGeometry,
                         "patch geometry " + std::to_string(h) + "x" + std::to_string(w) +
                             " unsupported (expected 64x64)");
  std::vector<PatchPair> out(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    PatchPair& p = out[i];
    std::uint8_t lab = 0;
    if (!r.bytes(p.x.data(), p.x.size()) || !r.bytes(p.y.data(), p.y.size()) || !r.u8(lab))
      throw ContainerError(ContainerError::Kind::kTruncated,
                           "file truncated in record " + std::to_string(i) + " of " + std::to_string(count));
    if (lab > 1)
      throw ContainerError(ContainerError::Kind::kBadLabel,
                           "record " + std::to_string(i) + " has label byte " + std::to_string(lab));
    p.label = static_cast<Label>(lab);
    p.source_id = i;
  }
  if (!r.done())
    throw ContainerError(ContainerError::Kind::kTruncated,
                         std::to_string(r.remaining()) + " trailing bytes after " +
                             std::to_string(count) + " records");
  return out;
}

inline void save_container(std::span<const PatchPair> pairs, const std::string& path) {
  write_file_bytes(path, serialize_container(pairs));
}

inline std::vector<PatchPair> load_container(const std::string& path) {
  return parse_container(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Grayscale images (binary PGM, maxval <= 255).

struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t at(int r, int c) const {
    return pixels[static_cast<std::size_t>(r) * width + c];
  }
};

inline Image read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pgm: cannot open " + path);
  auto next_token = [&in, &path]() {
    std::string tok;
    for (;;) {
      int c = in.get();
      if (c == EOF) throw std::runtime_error("pgm: truncated header in " + path);
      if (c == '#') {
        while (c != EOF && c != '\n') c = in.get();
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
  };
  if (next_token() != "P5") throw std::runtime_error("pgm: " + path + " is not binary PGM (P5)");
  Image img;
  img.width = std::stoi(next_token());
  img.height = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (img.width <= 0 || img.height <= 0) throw std::runtime_error("pgm: bad dimensions in " + path);
  if (maxval <= 0 || maxval > 255) throw std::runtime_error("pgm: unsupported maxval in " + path);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw std::runtime_error("pgm: truncated pixel data in " + path);
  return img;
}

inline void write_pgm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("pgm: cannot open " + path + " for writing");
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw std::runtime_error("pgm: write failed for " + path);
}

// Manifest CSV: one "x_path,y_path" line per aligned image pair.
inline std::vector<std::pair<std::string, std::string>> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest: cannot open " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  auto trim = [](std::string s) {
    const char* ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(ws) - b + 1);
  };
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto comma = t.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("manifest: line without comma: " + t);
    out.emplace_back(trim(t.substr(0, comma)), trim(t.substr(comma + 1)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lattice extraction: one matched pair per grid node where a full 64x64
// window fits, identical coordinates in both aligned images.

inline std::vector<PatchPair> extract_lattice_pairs(const Image& image_x, const Image& image_y,
                                                    int grid_step, std::uint64_t source_base = 0) {
  if (grid_step < 1) throw std::invalid_argument("extract_lattice_pairs: grid_step must be >= 1");
  if (image_x.width != image_y.width || image_x.height != image_y.height)
    throw std::invalid_argument("extract_lattice_pairs: images are not the same size");
  std::vector<PatchPair> out;
  for (int r = 0; r + kPatchSize <= image_x.height; r += grid_step) {
    for (int c = 0; c + kPatchSize <= image_x.width; c += grid_step) {
      PatchPair p;
      for (int i = 0; i < kPatchSize; ++i) {
        const std::uint8_t* sx = image_x.pixels.data() + static_cast<std::size_t>(r + i) * image_x.width + c;
        const std::uint8_t* sy = image_y.pixels.data() + static_cast<std::size_t>(r + i) * image_y.width + c;
        std::copy(sx, sx + kPatchSize, p.x.begin() + i * kPatchSize);
        std::copy(sy, sy + kPatchSize, p.y.begin() + i * kPatchSize);
      }
      p.label = Label::kMatch;
      p.source_id = source_base + out.size();
      out.push_back(p);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random negatives: for each positive (x_i, y_i), emit (x_i, y_j) with
// j != i drawn uniformly.

inline std::vector<PatchPair> make_negatives(std::span<const PatchPair> positives,
                                             std::uint64_t rng_seed) {
  const std::size_t n = positives.size();
  if (n < 2) throw std::invalid_argument("make_negatives: need at least 2 positive pairs");
  RngEngine rng(derive_seed(rng_seed, {0x9e67}));
  std::vector<PatchPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = uniform_index(rng, n - 1);
    if (j >= i) ++j;
    PatchPair neg;
    neg.x = positives[i].x;
    neg.y = positives[j].y;
    neg.label = Label::kNonMatch;
    neg.source_id = positives[i].source_id;
    out.push_back(neg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation: independent 1/2-probability horizontal and vertical flips,
// the same mask applied to both patches of the pair.

inline void flip_horizontal(PatchData& p) {
  for (int r = 0; r < kPatchSize; ++r)
    for (int c = 0; c < kPatchSize / 2; ++c)
      std::swap(p[static_cast<std::size_t>(r) * kPatchSize + c],
                p[static_cast<std::size_t>(r) * kPatchSize + (kPatchSize - 1 - c)]);
}

inline void flip_vertical(PatchData& p) {
  for (int r = 0; r < kPatchSize / 2; ++r)
    for (int c = 0; c < kPatchSize; ++c)
      std::swap(p[static_cast<std::size_t>(r) * kPatchSize + c],
                p[static_cast<std::size_t>(kPatchSize - 1 - r) * kPatchSize + c]);
}

struct FlipMask {
  bool horizontal = false, vertical = false;
};

inline FlipMask draw_flip_mask(RngEngine& rng) {
  return FlipMask{uniform_real(rng) < 0.5, uniform_real(rng) < 0.5};
}

inline PatchPair apply_flips(PatchPair pair, FlipMask mask) {
  if (mask.horizontal) {
    flip_horizontal(pair.x);
    flip_horizontal(pair.y);
  }
  if (mask.vertical) {
    flip_vertical(pair.x);
    flip_vertical(pair.y);
  }
  return pair;
}

inline PatchPair augment(const PatchPair& pair, RngEngine& rng) {
  return apply_flips(pair, draw_flip_mask(rng));
}

// ---------------------------------------------------------------------------
// Per-modality normalization, statistics from the training split only.

struct NormalizationStats {
  double mean_x = 0, std_x = 1, mean_y = 0, std_y = 1;

  NormalizationStats() = default;
  NormalizationStats(double mx, double sx, double my, double sy)
      : mean_x(mx), std_x(sx), mean_y(my), std_y(sy) {
    if (!(std_x > 0.0) || !(std_y > 0.0))
      throw std::invalid_argument("normalization stats: std must be > 0 per modality");
  }
};

/// Stats over the selected pairs (one pass per modality). Rejects a
/// degenerate (constant) modality.
inline NormalizationStats compute_stats(std::span<const PatchPair> pairs,
                                        std::span<const std::uint32_t> indices) {
  if (indices.empty()) throw std::invalid_argument("compute_stats: no pairs selected");
  double sx = 0, sxx = 0, sy = 0, syy = 0;
  const double count = static_cast<double>(indices.size()) * kPatchArea;
  for (std::uint32_t idx : indices) {
    const PatchPair& p = pairs[idx];
    for (int i = 0; i < kPatchArea; ++i) {
      const double vx = p.x[static_cast<std::size_t>(i)];
      const double vy = p.y[static_cast<std::size_t>(i)];
      sx += vx;
      sxx += vx * vx;
      sy += vy;
      syy += vy * vy;
    }
  }
  const double mx = sx / count, my = sy / count;
  const double var_x = std::max(0.0, sxx / count - mx * mx);
  const double var_y = std::max(0.0, syy / count - my * my);
  return NormalizationStats(mx, std::sqrt(var_x), my, std::sqrt(var_y));
}

struct NormalizedPair {
  std::array<float, kPatchArea> x, y;
  Label label;
};

inline NormalizedPair normalize(const PatchPair& pair, const NormalizationStats& stats) {
  NormalizedPair out;
  out.label = pair.label;
  const float mx = static_cast<float>(stats.mean_x), isx = static_cast<float>(1.0 / stats.std_x);
  const float my = static_cast<float>(stats.mean_y), isy = static_cast<float>(1.0 / stats.std_y);
  for (int i = 0; i < kPatchArea; ++i) {
    out.x[static_cast<std::size_t>(i)] = (static_cast<float>(pair.x[static_cast<std::size_t>(i)]) - mx) * isx;
    out.y[static_cast<std::size_t>(i)] = (static_cast<float>(pair.y[static_cast<std::size_t>(i)]) - my) * isy;
  }
  return out;
}

/// Normalized [N,1,64,64] batch of one modality, patches given by pointer.
template <typename T>
Tensor<T> patch_batch(std::span<const PatchData* const> patches, double mean, double stddev) {
  const int n = static_cast<int>(patches.size());
  Tensor<T> out = Tensor<T>::zeros({n, 1, kPatchSize, kPatchSize});
  const T m = static_cast<T>(mean);
  const T inv = static_cast<T>(1.0 / stddev);
  T* o = out.mutable_data();
  for (int i = 0; i < n; ++i) {
    const PatchData& p = *patches[static_cast<std::size_t>(i)];
    T* dst = o + static_cast<std::int64_t>(i) * kPatchArea;
    for (int j = 0; j < kPatchArea; ++j)
      dst[j] = (static_cast<T>(p[static_cast<std::size_t>(j)]) - m) * inv;
  }
  return out;
}

template <typename T>
Tensor<T> patch_batch(std::span<const PatchPair> pairs, Modality side,
                      const NormalizationStats& stats) {
  std::vector<const PatchData*> ptrs(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i)
    ptrs[i] = side == Modality::kX ? &pairs[i].x : &pairs[i].y;
  return patch_batch<T>(ptrs, side == Modality::kX ? stats.mean_x : stats.mean_y,
                        side == Modality::kX ? stats.std_x : stats.std_y);
}

// ---------------------------------------------------------------------------
// Splits: disjoint, exhaustive, deterministic under seed.

struct SplitFractions {
  double train = 0.70, val = 0.10, test = 0.20;
};

struct DatasetSplit {
  std::vector<std::uint32_t> train, val, test;
};

inline DatasetSplit make_split(std::size_t n, SplitFractions fr, std::uint64_t seed) {
  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  RngEngine rng(derive_seed(seed, {0x51D7}));
  shuffle_inplace(order, rng);
  const std::size_t n_train = static_cast<std::size_t>(fr.train * static_cast<double>(n) + 0.5);
  const std::size_t n_val = static_cast<std::size_t>(fr.val * static_cast<double>(n) + 0.5);
  DatasetSplit s;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train)
      s.train.push_back(order[i]);
    else if (i < n_train + n_val)
      s.val.push_back(order[i]);
    else
      s.test.push_back(order[i]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic multimodal generator. Base patches mix oriented gratings,
// Gaussian blobs, step edges and ramps; modality X adds Gaussian noise,
// modality Y applies a value-inverting quadratic tone curve, contrast
// reversal on a random half-plane, a mild blur and independent noise, all
// blended by `severity` in [0,1]. At severity 0 the modalities differ only
// by the independent noise.

namespace detail {

inline void render_base_patch(RngEngine& rng, std::array<float, kPatchArea>& base) {
  base.fill(0.f);
  const int motifs = 2 + static_cast<int>(uniform_index(rng, 4));
  for (int m = 0; m < motifs; ++m) {
    const std::size_t kind = uniform_index(rng, 4);
    if (kind == 0) {  // oriented grating
      const double theta = uniform_range(rng, 0.0, 3.14159265358979323846);
      const double freq = uniform_range(rng, 0.06, 0.35);
      const double phase = uniform_range(rng, 0.0, 6.28318530717958647692);
      const double amp = uniform_range(rng, 0.35, 1.0);
      const double cx = std::cos(theta) * 6.28318530717958647692 * freq;
      const double cy = std::sin(theta) * 6.28318530717958647692 * freq;
      for (int r = 0; r < kPatchSize; ++r)
        for (int c = 0; c < kPatchSize; ++c)
          base[static_cast<std::size_t>(r) * kPatchSize + c] +=
              static_cast<float>(amp * std::sin(cx * c + cy * r + phase));
    } else if (kind == 1) {  // Gaussian blob
      const double bx = uniform_range(rng, 8.0, 56.0);
      const double by = uniform_range(rng, 8.0, 56.0);
      const double sg = uniform_range(rng, 3.0, 12.0);
      const double amp = uniform_range(rng, 0.4, 1.0) * (uniform_real(rng) < 0.5 ? -1.0 : 1.0);
      const double inv = 1.0 / (2.0 * sg * sg);
      for (int r = 0; r < kPatchSize; ++r)
        for (int c = 0; c < kPatchSize; ++c) {
          const double dx = c - bx, dy = r - by;
          base[static_cast<std::size_t>(r) * kPatchSize + c] +=
              static_cast<float>(amp * std::exp(-(dx * dx + dy * dy) * inv));
        }
    } else if (kind == 2) {  // step edge
      const double theta = uniform_range(rng, 0.0, 3.14159265358979323846);
      const double offset = uniform_range(rng, 16.0, 48.0);
      const double amp = uniform_range(rng, 0.4, 1.0) * (uniform_real(rng) < 0.5 ? -1.0 : 1.0);
      const double nx = std::cos(theta), ny = std::sin(theta);
      for (int r = 0; r < kPatchSize; ++r)
        for (int c = 0; c < kPatchSize; ++c)
          base[static_cast<std::size_t>(r) * kPatchSize + c] +=
              static_cast<float>(nx * c + ny * r > offset ? amp : 0.0);
    } else {  // ramp
      const double theta = uniform_range(rng, 0.0, 6.28318530717958647692);
      const double amp = uniform_range(rng, 0.3, 0.8);
      const double nx = std::cos(theta) / kPatchSize, ny = std::sin(theta) / kPatchSize;
      for (int r = 0; r < kPatchSize; ++r)
        for (int c = 0; c < kPatchSize; ++c)
          base[static_cast<std::size_t>(r) * kPatchSize + c] +=
              static_cast<float>(amp * (nx * c + ny * r));
    }
  }
  float lo = base[0], hi = base[0];
  for (float v : base) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float span = std::max(hi - lo, 1e-6f);
  for (float& v : base) v = (v - lo) / span;
}

inline std::uint8_t to_u8(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace detail

inline std::vector<PatchPair> synth_multimodal(int n_pairs, std::uint64_t rng_seed,
                                               double severity) {
  if (n_pairs < 2) throw std::invalid_argument("synth_multimodal: need n_pairs >= 2");
  if (severity < 0.0 || severity > 1.0)
    throw std::invalid_argument("synth_multimodal: severity must be in [0,1]");
  RngEngine rng(derive_seed(rng_seed, {0x5E17}));
  GaussianSampler gauss(rng);
  const double s = severity;
  const double noise_sigma = 0.02 + 0.02 * s;

  std::vector<PatchPair> positives;
  positives.reserve(static_cast<std::size_t>(n_pairs));
  std::array<float, kPatchArea> base{};
  std::array<double, kPatchArea> ych{};
  for (int i = 0; i < n_pairs; ++i) {
    detail::render_base_patch(rng, base);
    PatchPair p;
    p.label = Label::kMatch;
    p.source_id = static_cast<std::uint64_t>(i);

    for (int j = 0; j < kPatchArea; ++j)
      p.x[static_cast<std::size_t>(j)] =
          detail::to_u8(static_cast<double>(base[static_cast<std::size_t>(j)]) +
                        gauss.next() * noise_sigma);

    // Tone curve: blend toward the value-inverting quadratic 1-(2v-1)^2.
    for (int j = 0; j < kPatchArea; ++j) {
      const double v = base[static_cast<std::size_t>(j)];
      const double t = 1.0 - (2.0 * v - 1.0) * (2.0 * v - 1.0);
      ych[static_cast<std::size_t>(j)] = (1.0 - s) * v + s * t;
    }
    // Contrast reversal on a random half-plane through a random interior point.
    {
      const double theta = uniform_range(rng, 0.0, 6.28318530717958647692);
      const double px = uniform_range(rng, 16.0, 48.0);
      const double py = uniform_range(rng, 16.0, 48.0);
      const double nx = std::cos(theta), ny = std::sin(theta);
      for (int r = 0; r < kPatchSize; ++r)
        for (int c = 0; c < kPatchSize; ++c)
          if (nx * (c - px) + ny * (r - py) > 0.0) {
            double& v = ych[static_cast<std::size_t>(r) * kPatchSize + c];
            v = (1.0 - s) * v + s * (1.0 - v);
          }
    }
    // Mild 3x3 binomial blur, blended by severity.
    if (s > 0.0) {
      std::array<double, kPatchArea> blurred = ych;
      for (int r = 1; r < kPatchSize - 1; ++r)
        for (int c = 1; c < kPatchSize - 1; ++c) {
          double acc = 0.0;
          static constexpr double kKernel[3] = {0.25, 0.5, 0.25};
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc)
              acc += kKernel[dr + 1] * kKernel[dc + 1] *
                     ych[static_cast<std::size_t>(r + dr) * kPatchSize + (c + dc)];
          blurred[static_cast<std::size_t>(r) * kPatchSize + c] = acc;
        }
      const double wb = 0.5 * s;
      for (int j = 0; j < kPatchArea; ++j)
        ych[static_cast<std::size_t>(j)] =
            (1.0 - wb) * ych[static_cast<std::size_t>(j)] + wb * blurred[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < kPatchArea; ++j)
      p.y[static_cast<std::size_t>(j)] =
          detail::to_u8(ych[static_cast<std::size_t>(j)] + gauss.next() * noise_sigma);

    positives.push_back(p);
  }

  std::vector<PatchPair> out = positives;
  std::vector<PatchPair> negatives =
      make_negatives(positives, derive_seed(rng_seed, {0x5E17, 0xBAD}));
  out.insert(out.end(), negatives.begin(), negatives.end());
  return out;
}

/// Mean Pearson correlation between the X and Y patches of matched pairs;
/// the generator's difficulty diagnostic.
inline double mean_pair_correlation(std::span<const PatchPair> pairs) {
  double acc = 0;
  std::size_t n = 0;
  for (const PatchPair& p : pairs) {
    if (!is_match(p.label)) continue;
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (int i = 0; i < kPatchArea; ++i) {
      const double a = p.x[static_cast<std::size_t>(i)];
      const double b = p.y[static_cast<std::size_t>(i)];
      sx += a;
      sy += b;
      sxx += a * a;
      syy += b * b;
      sxy += a * b;
    }
    const double m = kPatchArea;
    const double cov = sxy / m - (sx / m) * (sy / m);
    const double vx = std::max(1e-12, sxx / m - (sx / m) * (sx / m));
    const double vy = std::max(1e-12, syy / m - (sy / m) * (sy / m));
    acc += cov / std::sqrt(vx * vy);
    ++n;
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

}  // namespace hpn
