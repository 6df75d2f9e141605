#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "icsfuzz/bytes.hpp"

namespace icsfuzz {

/// Deterministic random stream. Campaign-level reproducibility relies on every
/// agent instance drawing from its own stream derived as
/// derive(master_seed, role, instance); two runs with the same master seed and
/// topology see identical draws.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : engine_(seed) {}

    static RngStream derive(uint64_t master, std::string_view role, uint64_t instance) {
        uint64_t h = fnv1a(role);
        h ^= master + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h ^= instance * 0xff51afd7ed558ccdULL;
        return RngStream(splitmix(h));
    }

    uint64_t next() { return engine_(); }

    /// Uniform in [0, bound). bound must be > 0.
    uint64_t below(uint64_t bound) {
        return std::uniform_int_distribution<uint64_t>(0, bound - 1)(engine_);
    }

    /// Uniform in [lo, hi], inclusive.
    uint64_t between(uint64_t lo, uint64_t hi) {
        return std::uniform_int_distribution<uint64_t>(lo, hi)(engine_);
    }

    double unit() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    std::mt19937_64& engine() { return engine_; }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
};

}  // namespace icsfuzz
