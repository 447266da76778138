#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace maskprune {

/// Derives an independent stream seed from a root seed and a stream name:
/// splitmix64(root ^ fnv1a64(name)). Every random draw in the toolkit goes
/// through a named stream ("model", "data", "instances", ...).
inline std::uint64_t split_seed(std::uint64_t root, std::string_view stream) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : stream) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = root ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t root, std::string_view stream) {
  return std::mt19937_64(split_seed(root, stream));
}

}  // namespace maskprune
