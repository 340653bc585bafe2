#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace lvlm {

/// FNV-1a, 64-bit.
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);

/// Stable seed for a subsystem: mixes the user seed with a tag (and an optional index).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

// The std:: distributions are implementation-defined, so draws are built directly
// on top of mt19937_64 (whose output sequence the standard fixes).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal (Box-Muller, one value per call).
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lvlm
