// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace cotformer {

// Deterministic, platform-independent generator (xoshiro256++ seeded via
// splitmix64). std::uniform_real_distribution is implementation-defined, so
// reproducible runs roll their own mapping from bits to reals.
//
// Every subsystem derives its own stream with derive("label"); adding a new
// consumer never perturbs existing streams.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // i in [0, n)
    std::uint64_t next_below(std::uint64_t n) {
        // Rejection sampling keeps the draw exactly uniform.
        const std::uint64_t threshold = -n % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Box-Muller; one value per call, deterministic call sequence.
    double normal() {
        for (;;) {
            double u1 = uniform();
            if (u1 <= 0.0) continue;
            double u2 = uniform();
            return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        }
    }

    // Normal(0, std) re-drawn until within 2 standard deviations.
    double truncated_normal(double stddev) {
        for (;;) {
            double z = normal();
            if (std::fabs(z) <= 2.0) return z * stddev;
        }
    }

    // Independent child stream identified by a stable label.
    Rng derive(std::string_view label) const {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the label
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        std::uint64_t mix = s_[0];
        mix = splitmix64(mix);
        return Rng(mix ^ h);
    }

  private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::uint64_t s_[4];
};

}  // namespace cotformer
