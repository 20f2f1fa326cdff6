#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <utility>

namespace graftkd {

// splitmix64, the usual seed expander. All randomness in the library flows
// through this so results do not depend on the standard library's
// distribution implementations.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed and a list of tags
// (stage id, unit index, epoch, sample index, ...).
inline std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = seed ^ 0xD1B54A32D192ED03ULL;
  for (std::uint64_t t : tags) {
    s ^= splitmix64(t) + 0x9E3779B97F4A7C15ULL + (s << 6) + (s >> 2);
    splitmix64(s);
  }
  return s;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0xA5A5A5A55A5A5A5AULL) {
    // warm up so nearby seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // standard normal via Box-Muller (no cached spare; two uniforms per draw)
  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates
  template <typename Container>
  void shuffle(Container& c) {
    for (int i = static_cast<int>(c.size()) - 1; i > 0; --i) {
      const int j = uniform_int(i + 1);
      std::swap(c[i], c[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace graftkd
