// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "t3d/error.hpp"

namespace t3d {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a. Stable across platforms, used for ids, fingerprints and splits.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a key, so that workers
/// never share a generator.
inline std::uint64_t child_seed(std::uint64_t base, std::uint64_t key) {
  return splitmix64(base ^ splitmix64(key + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t child_seed(std::uint64_t base, std::string_view key) {
  return child_seed(base, fnv1a64(key));
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void rng_restore(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  require(!is.fail(), Errc::format, "malformed generator state");
}

/// Normal sample rejected outside two standard deviations.
inline double truncated_normal(Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  double z = 0.0;
  do {
    z = dist(rng);
  } while (std::abs(z) > 2.0);
  return z * stddev;
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace t3d
