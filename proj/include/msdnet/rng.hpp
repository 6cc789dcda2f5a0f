#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace msdnet {

// Counter-based generator: every value is a pure function of (seed, stream,
// counter), so draws can be made in any order and replayed exactly.
// Core mixer is the splitmix64 finalizer.

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

enum RngStream : std::uint64_t {
  kStreamSigma = 1,       // per-band blind sigma draws
  kStreamNoise = 2,       // per-voxel Gaussian noise
  kStreamInit = 3,        // weight initialization
  kStreamShuffle = 4,     // per-epoch batch order
  kStreamBatchNoise = 5,  // per-sample noise sub-seeds during training
  kStreamSynth = 6,       // synthetic cube parameters
};

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

inline std::uint64_t rand_u64(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
  return mix64(mix64(seed + kGolden * (stream + 1)) + kGolden * (counter + 1));
}

// Uniform in [0,1), 53-bit resolution.
inline double rand_unit(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
  return static_cast<double>(rand_u64(seed, stream, counter) >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller; draw i consumes counters 2i and 2i+1.
inline double rand_normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t i) {
  const double u1 =
      (static_cast<double>(rand_u64(seed, stream, 2 * i) >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
  const double u2 = rand_unit(seed, stream, 2 * i + 1);                              // [0,1)
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Sequential convenience wrapper over one (seed, stream) pair.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

  std::uint64_t next_u64() { return rand_u64(seed_, stream_, counter_++); }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Fisher-Yates with draws from this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

// FNV-1a, used to derive per-parameter init streams from names.
inline std::uint64_t fnv1a(const char* s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (; *s; ++s) {
    h ^= static_cast<unsigned char>(*s);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace msdnet
