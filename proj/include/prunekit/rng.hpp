#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace prunekit {

// All randomness in the toolkit flows through these helpers so that draws
// are reproducible from a seed alone. std::uniform_int_distribution and
// friends are implementation-defined and are not used anywhere.

using Rng = std::mt19937_64;

// Uniform integer in [0, n), unbiased via rejection sampling.
inline uint64_t rng_below(Rng & rng, uint64_t n) {
    if (n == 0) {
        return 0;
    }
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % n;
}

// Uniform double in [0, 1) with 53 bits of randomness.
inline double rng_unit(Rng & rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller (no cached spare; one value per call).
inline double rng_normal(Rng & rng) {
    double u1 = rng_unit(rng);
    while (u1 <= 0.0) {
        u1 = rng_unit(rng);
    }
    const double u2 = rng_unit(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Stream splitter: derives an independent seed from a base seed and an
// index (splitmix64 finalizer). Used for per-item evaluation draws.
inline uint64_t rng_derive_seed(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace prunekit
