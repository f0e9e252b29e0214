#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>

namespace samediff {

// Random stream with platform-independent draws. The std distributions are
// implementation-defined, so every draw here is derived from raw engine output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling removes modulo bias.
  std::uint64_t uniform_int(std::uint64_t n);

  int uniform_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(uniform_int(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller, one value per call.
  double normal();

  // Child stream seeded from a hash of this stream's seed and the name.
  // Does not advance this stream.
  Rng substream(std::string_view name) const { return Rng(derive_seed(seed_, name)); }

  std::uint64_t seed() const { return seed_; }

  static std::uint64_t derive_seed(std::uint64_t root, std::string_view name);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = uniform_int(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

}  // namespace samediff
