#pragma once

// Shared utilities: deterministic RNG helpers, byte-level I/O, hashing,
// and the worker-thread pool honoring the HPN_THREADS environment cap.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace hpn {

enum class Label : std::uint8_t { kNonMatch = 0, kMatch = 1 };

inline bool is_match(Label l) { return l == Label::kMatch; }

// ---------------------------------------------------------------------------
// Deterministic RNG. All randomness in the library flows through these
// helpers so that datasets, initializations and training runs are
// byte-reproducible under a fixed seed.

using RngEngine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Mixes a base seed with salt values into an independent stream seed.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> salts) {
  std::uint64_t s = base ^ 0x5851f42d4c957f2dULL;
  std::uint64_t out = splitmix64(s);
  for (std::uint64_t v : salts) {
    s ^= v + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
    out ^= splitmix64(s);
  }
  return out;
}

// Uniform integer in [0, n). Modulo bias is negligible for the index ranges
// used here (n << 2^64) and keeps the draw count fixed and portable.
inline std::size_t uniform_index(RngEngine& rng, std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be > 0");
  return static_cast<std::size_t>(rng() % n);
}

// Uniform in [0, 1) with 53-bit resolution.
inline double uniform_real(RngEngine& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_range(RngEngine& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform_real(rng);
}

// Box-Muller normal sampler; the pair is cached so draw count per sample
// alternates 2,0,2,0,... deterministically.
class GaussianSampler {
 public:
  explicit GaussianSampler(RngEngine& rng) : rng_(rng) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform_real(rng_);
    double u2 = uniform_real(rng_);
    // Guard log(0); u1 == 0 has probability 2^-53 per draw.
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  RngEngine& rng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Fisher-Yates shuffle driven by the library RNG helpers so the permutation
// depends only on the engine state, not on the standard library build.
template <typename T>
void shuffle_inplace(std::vector<T>& v, RngEngine& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = uniform_index(rng, i);
    std::swap(v[i - 1], v[j]);
  }
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64-bit) for checkpoint ids and config fingerprints.

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string hex_u64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Little-endian byte stream helpers for the binary file formats.

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void magic(const char (&m)[5]) { raw(m, 4); }

  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked reader; every read reports success so callers can raise
// their format-specific truncation errors.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : buf_(b) {}

  bool u8(std::uint8_t& v) { return raw(&v, 1); }
  bool u16(std::uint16_t& v) { return raw(&v, 2); }
  bool u32(std::uint32_t& v) { return raw(&v, 4); }
  bool u64(std::uint64_t& v) { return raw(&v, 8); }
  bool f32(float& v) { return raw(&v, 4); }
  bool f64(double& v) { return raw(&v, 8); }
  bool bytes(std::uint8_t* out, std::size_t n) { return raw(out, n); }
  bool magic(const char (&m)[5]) {
    char got[4];
    if (!raw(got, 4)) return false;
    return std::memcmp(got, m, 4) == 0;
  }

  std::size_t remaining() const { return buf_.size() - pos_; }
  bool done() const { return pos_ == buf_.size(); }

 private:
  bool raw(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) return false;
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
    return true;
  }
  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return out;
}

inline void write_file_bytes(const std::string& path,
                             std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline void write_file_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::span<const std::uint8_t>(
                             reinterpret_cast<const std::uint8_t*>(text.data()),
                             text.size()));
}

// ---------------------------------------------------------------------------
// Worker threads. HPN_THREADS caps the pool; unset means one worker per
// hardware thread. All parallel loops in the library partition work into
// fixed chunks whose results are combined in chunk order, so outputs are
// identical for every worker count.

inline int worker_threads() {
  if (const char* env = std::getenv("HPN_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<int>(std::min<long>(v, 256));
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(chunk) for chunk in [0, num_chunks) on up to worker_threads()
// threads. fn must write only chunk-local state.
template <typename Fn>
void parallel_for_chunks(std::size_t num_chunks, Fn&& fn) {
  const int workers = std::min<std::size_t>(worker_threads(), num_chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < num_chunks; ++c) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t c = next.fetch_add(1);
        if (c >= num_chunks) return;
        fn(c);
      }
    });
  }
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------

template <typename T>
bool all_finite(std::span<const T> vals) {
  for (T v : vals)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace hpn
