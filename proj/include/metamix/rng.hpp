#pragma once

// Seed splitting. Every random stream in a run is derived from the master
// seed, a stream id and a counter (usually the iteration or a cluster slot),
// so draws never depend on evaluation order or thread count.

#include <cstdint>
#include <random>

namespace metamix {

using Rng = std::mt19937_64;

enum class Stream : std::uint64_t {
  ClusterInit = 1,
  Tasks = 2,
  Spawn = 3,
  Bank = 4,
  Misc = 5,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t counter) {
  return splitmix64(splitmix64(splitmix64(master) ^ static_cast<std::uint64_t>(stream)) ^ counter);
}

inline Rng make_rng(std::uint64_t master, Stream stream, std::uint64_t counter) {
  return Rng(derive_seed(master, stream, counter));
}

}  // namespace metamix
