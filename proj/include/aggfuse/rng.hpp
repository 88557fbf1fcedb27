#pragma once

#include <cmath>
#include <cstdint>

namespace aggfuse {

namespace detail {
// SplitMix64 finalizer; full-period mixer used both to derive substream keys
// and as the generator step.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace detail

// Counter-based generator: output_i = mix(key + i * gamma). Substreams are
// keyed by (seed, stream, substream), so any replication can be generated
// independently of execution order or worker count.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t substream)
      : key_(derive_key(seed, stream, substream)), counter_(0) {}
  explicit CounterRng(std::uint64_t seed) : CounterRng(seed, 0, 0) {}

  std::uint64_t next_u64() { return detail::mix64(key_ + (counter_++) * kGamma); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller; both variates are consumed to keep the draw count per call
  // fixed (one call, two uniforms), which keeps substreams alignment-free.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586476925286766559 * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  static std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream,
                                  std::uint64_t substream) {
    std::uint64_t k = detail::mix64(seed);
    k = detail::mix64(k ^ detail::mix64(stream + 0x632BE59BD9B4E019ULL));
    k = detail::mix64(k ^ detail::mix64(substream + 0x9E3779B97F4A7C15ULL));
    return k;
  }

  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  std::uint64_t key_;
  std::uint64_t counter_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace aggfuse
