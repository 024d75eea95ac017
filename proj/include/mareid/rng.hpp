#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mareid {

using Rng = std::mt19937_64;

// SplitMix64 finaliser; used to derive independent substreams.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline Rng substream(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return Rng(mix64(mix64(seed ^ mix64(stream)) ^ index));
}

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}
inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}
inline int uniform_int(Rng& rng, int lo, int hi) {  // inclusive
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::string rng_state(const Rng& rng);
void set_rng_state(Rng& rng, const std::string& state);

// FNV-1a, stable across platforms (config hashing).
std::uint64_t fnv1a(const std::string& s);

}  // namespace mareid
