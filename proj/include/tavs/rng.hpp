#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tavs {

/// Derives an independent engine from a run seed and a fixed component label,
/// so each component draws from its own stream regardless of call order.
inline std::mt19937_64 fork_rng(std::uint64_t seed, std::string_view label) {
    std::uint64_t h = 1469598103934665603ULL; // FNV-1a
    for (unsigned char c : label) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::uint64_t z = seed ^ h;
    // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return std::mt19937_64(z);
}

} // namespace tavs
