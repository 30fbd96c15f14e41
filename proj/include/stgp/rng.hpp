#pragma once

#include <cstdint>
#include <random>

namespace stgp {

// splitmix64 step; used to derive well-separated seeds for substreams.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d4a2895df624fcull;
  return z ^ (z >> 31);
}

// Deterministic substream: (seed, stream) pairs map to independent engines,
// so chain- and draw-level parallelism cannot affect results.
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed;
  std::uint64_t a = splitmix64(s);
  s = seed ^ (0x9e3779b97f4a7c15ull * (stream + 1));
  std::uint64_t b = splitmix64(s);
  std::seed_seq seq{static_cast<unsigned>(a), static_cast<unsigned>(a >> 32),
                    static_cast<unsigned>(b), static_cast<unsigned>(b >> 32)};
  return std::mt19937_64(seq);
}

} // namespace stgp
