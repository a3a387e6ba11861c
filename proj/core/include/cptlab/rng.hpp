// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "cptlab/common.hpp"

namespace cptlab {

namespace detail {
// splitmix64 finalizer (Steele, Lea, Flood 2014).
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}
}  // namespace detail

// Counter-based generator: output i is a pure function of (key, i), so a
// stream can be forked by label without coordinating state between
// consumers. Every stochastic operation in the project takes one of these
// explicitly; nothing draws from a global source.
class Rng {
public:
    Rng() : key_(0) {}
    explicit Rng(std::uint64_t seed) : key_(detail::splitmix64(seed ^ 0xA02B0D3FFD8A5A9BULL)) {}

    // Independent child stream. Deriving with the same label twice yields the
    // same stream; different labels yield uncorrelated ones.
    Rng derive(std::string_view label) const {
        Rng child;
        child.key_ = detail::splitmix64(key_ ^ fnv1a(label));
        return child;
    }
    Rng derive(std::uint64_t salt) const {
        Rng child;
        child.key_ = detail::splitmix64(key_ ^ detail::splitmix64(salt ^ 0x6C62272E07BB0142ULL));
        return child;
    }

    std::uint64_t next_u64() { return detail::splitmix64(key_ ^ detail::splitmix64(counter_++)); }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    float next_float() { return static_cast<float>(next_double()); }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t next_below(std::uint64_t n) {
        // Lemire-style rejection to stay unbiased.
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            std::uint64_t t = (0 - n) % n;
            while (lo < t) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    // Standard normal via Box-Muller. No spare caching: each call consumes
    // exactly two uniforms, which keeps the stream position predictable.
    double gaussian() {
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Normal clipped to [-2s, 2s] by resampling.
    double truncated_gaussian(double stddev) {
        for (;;) {
            double g = gaussian() * stddev;
            if (std::abs(g) <= 2.0 * stddev) return g;
        }
    }

    // Fisher-Yates. std::shuffle is not used anywhere: its draws are
    // implementation-defined and would break cross-toolchain reproducibility.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<std::int64_t> permutation(std::int64_t n) {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        shuffle(idx);
        return idx;
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace cptlab
