#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace unmark {

// Exit codes shared between the CLI and the tests that drive it.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

/// Bad configuration, unusable checkpoint version, CLI misuse.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Anything wrong with input data: I/O failures, undecodable files,
/// shape mismatches, invalid placements, insufficient inputs.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite values where a healthy run requires finite ones.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64-style mixer; derives per-sample and per-epoch streams from one
// master seed so parallel and serial generation agree byte for byte.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministic uniform draws decoupled from stdlib distribution details,
/// so identical seeds give identical datasets on any platform.
class UniformSource {
 public:
  explicit UniformSource(uint64_t seed) : state_(seed ? seed : 0x6a09e667f3bcc909ULL) {}

  uint64_t next_u64() {
    // xorshift64* keeps this self-contained and reproducible.
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dULL;
  }

  /// Uniform in [0, 1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double next_range(double lo, double hi) { return lo + next_unit() * (hi - lo); }

  /// Uniform integer in [0, n).
  int64_t next_index(int64_t n) {
    if (n <= 1) return 0;
    auto i = static_cast<int64_t>(next_unit() * static_cast<double>(n));
    return i >= n ? n - 1 : i;
  }

  /// In-place Fisher-Yates shuffle with this source.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[next_index(i + 1)]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace unmark
