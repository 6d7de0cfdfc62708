#pragma once

#include "itsr/abi.hpp"

#include <array>
#include <cstdint>
#include <string_view>

namespace itsr::inline ITSR_ABI {

/// xoshiro256** generator seeded through splitmix64.
///
/// Conversions to floating point and bounded integers are done here rather
/// than through <random> distributions so that streams are identical across
/// standard library implementations.
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed = 0);

  /// Independent stream for a named purpose ("init", "dropout", "shuffle",
  /// "caption", ...) and an optional index such as the epoch or round.
  static Rng stream(std::uint64_t seed, std::string_view purpose,
                    std::uint64_t index = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();

  const State& state() const { return s_; }
  void set_state(const State& s) { s_ = s; }

 private:
  State s_{};
};

std::uint64_t splitmix64(std::uint64_t& x);
std::uint64_t fnv1a64(std::string_view text);

/// In-place Fisher-Yates shuffle driven by `rng`.
template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    using std::swap;
    swap(first[i - 1], first[j]);
  }
}

}  // namespace itsr
