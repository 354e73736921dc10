#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>

namespace earm {

/// Counter-based pseudo-random generator built on the SplitMix64 finalizer.
///
/// A generator is a (key, counter) pair; output i is mix(key + i * golden).
/// Streams are split with derive(tag): the child key is a hash of the parent
/// key and the tag, so a stream per (epoch, batch, element) can be obtained
/// as rng.derive(epoch).derive(batch).derive(element) without any shared
/// mutable state. All arithmetic is 64-bit integer, so sequences are
/// identical across platforms and thread schedules.
class CounterRng {
public:
  explicit CounterRng(std::uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  /// Child stream for `tag`. Pure; does not advance this stream.
  [[nodiscard]] CounterRng derive(std::uint64_t tag) const {
    CounterRng child(0);
    child.key_ = mix(key_ ^ mix(tag + 0x632be59bd9b4e019ull));
    child.counter_ = 0;
    return child;
  }

  std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  /// Uniform double in [0, 1) with 53 random mantissa bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double next_in(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  /// Uniform integer in [0, n), unbiased (rejection sampling).
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("CounterRng::next_below: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t draw = next_u64();
    while (draw >= limit) draw = next_u64();
    return draw % n;
  }

  /// Index drawn from a probability vector (cumulative walk). The vector is
  /// assumed normalized; floating-point tail mass falls on the last index.
  int sample_categorical(std::span<const double> probs) {
    const double u = next_unit();
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

/// Fixed tags for the well-known top-level streams, so call sites do not
/// collide by accident.
namespace stream_tag {
inline constexpr std::uint64_t corpus = 1;
inline constexpr std::uint64_t split = 2;
inline constexpr std::uint64_t init = 3;
inline constexpr std::uint64_t batch_order = 4;
inline constexpr std::uint64_t scheduled_sampling = 5;
inline constexpr std::uint64_t negative = 6;
inline constexpr std::uint64_t decode = 7;
}  // namespace stream_tag

}  // namespace earm
