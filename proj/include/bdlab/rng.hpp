#pragma once

#include <cstdint>
#include <vector>

namespace bdlab {

// Counter-based generator: draw k of stream (seed) is mix(seed + k * gamma).
// split() derives statistically independent child streams, so dataset,
// poisoning and initialization never share a sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), key_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);
  // Standard normal via Box-Muller; no cached spare so state == counter.
  double normal();

  Rng split(std::uint64_t stream) const;

 private:
  static std::uint64_t mix(std::uint64_t z);

  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// n draws from N(mean, std^2). std == 0 returns the constant mean.
std::vector<float> gaussian(Rng& rng, float mean, float std, std::size_t n);

// Fisher-Yates with rng.uniform_int.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(rng.uniform_int(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace bdlab
