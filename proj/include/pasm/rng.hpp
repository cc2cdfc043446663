#pragma once

#include <cstdint>
#include <random>

namespace pasm {

// splitmix64 step; used to derive independent stream seeds from one root seed.
inline std::uint64_t mix_seed(std::uint64_t state) {
  std::uint64_t z = state + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  return mix_seed(root ^ mix_seed(stream));
}

inline std::mt19937_64 make_rng(std::uint64_t root, std::uint64_t stream = 0) {
  return std::mt19937_64(derive_seed(root, stream));
}

}  // namespace pasm
