#pragma once

#include <cstdint>
#include <random>

namespace constellation {

/// splitmix64 finalizer; derives independent stream seeds from (seed, tag).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Stream tags.
inline constexpr std::uint64_t kTagSlotOrder = 1;
inline constexpr std::uint64_t kTagInit = 2;
inline constexpr std::uint64_t kTagEpoch = 3;
inline constexpr std::uint64_t kTagNoise = 4;
inline constexpr std::uint64_t kTagScan = 5;
inline constexpr std::uint64_t kTagEval = 6;

}  // namespace constellation
