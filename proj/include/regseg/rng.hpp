#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace regseg {

using Rng = std::mt19937_64;

// splitmix64; used to derive independent per-case streams from one seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t seed, const std::string& salt) {
    uint64_t h = 14695981039346656037ULL;  // FNV-1a
    for (char c : salt) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ULL;
    }
    return mix_seed(seed, h);
}

inline double draw_normal(Rng& rng, double mu, double sigma) {
    std::normal_distribution<double> d(mu, sigma);
    return d(rng);
}

// Normal(mu, sigma) truncated to [lo, hi] by rejection.
inline double draw_truncated_normal(Rng& rng, double mu, double sigma, double lo, double hi) {
    std::normal_distribution<double> d(mu, sigma);
    for (;;) {
        const double v = d(rng);
        if (v >= lo && v <= hi) return v;
    }
}

inline double draw_uniform(Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(rng);
}

inline long long draw_index(Rng& rng, long long n) {
    std::uniform_int_distribution<long long> d(0, n - 1);
    return d(rng);
}

}  // namespace regseg
