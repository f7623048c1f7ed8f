#pragma once

#include <array>
#include <cstdint>

namespace opd {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
//
// Output is a pure function of (key, counter), so any rollout token can be drawn
// without touching shared state; parallel generation is order independent.
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter block(Counter ctr, Key key);
};

// SplitMix64 finalizer, used to derive independent 64-bit seeds.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

// A uniform stream keyed by a 64-bit seed and a 64-bit stream id; draw i is independent
// of every other (seed, stream, i).
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

  // Uniform double in [0, 1) with 53 random bits, for draw index `i`.
  double uniform(std::uint64_t i) const;
  // Sequential convenience wrapper.
  double next() { return uniform(position_++); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t position_ = 0;
};

}  // namespace opd
