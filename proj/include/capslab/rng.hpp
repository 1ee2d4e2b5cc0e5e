#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace capslab {

// Deterministic random source. Wraps std::mt19937 (whose output sequence is
// fixed by the standard) and derives floats with explicit arithmetic instead
// of std::*_distribution, whose sequences vary between standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}
  Rng(uint64_t seed, uint64_t stream) {
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                      static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
    gen_.seed(seq);
  }

  uint32_t next_u32() { return gen_(); }

  // Uniform in [0, 1), 24 bits of resolution.
  float uniform() { return static_cast<float>(gen_() >> 8) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes two variates per pair, caches the second.
  float normal(float mean = 0.0f, float stddev = 1.0f) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    float u1 = uniform();
    float u2 = uniform();
    if (u1 < 1e-12f) u1 = 1e-12f;
    float r = std::sqrt(-2.0f * std::log(u1));
    float theta = 6.28318530717958647692f * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * (r * std::cos(theta));
  }

  int below(int n) { return static_cast<int>(gen_() % static_cast<uint32_t>(n)); }

  // Fisher-Yates with a fixed sampling rule so shuffles are reproducible
  // across standard library versions.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = below(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937 gen_;
  bool have_spare_ = false;
  float spare_ = 0.0f;
};

}  // namespace capslab
