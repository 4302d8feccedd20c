#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace templora {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Counter-based generator: the n-th draw is a pure function of (key, n).
///
/// Streams are split by name or index, so every stochastic consumer (weight
/// init, dropout, sampling, corpus generation) owns a reproducible substream
/// regardless of how many draws other consumers make.
class Rng {
public:
    constexpr explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed ^ 0x5DEECE66DULL)) {}

    [[nodiscard]] constexpr Rng substream(std::string_view name) const {
        return from_key(mix64(key_ ^ fnv1a64(name)));
    }
    [[nodiscard]] constexpr Rng substream(std::uint64_t index) const {
        return from_key(mix64(key_ + 0x9E3779B97F4A7C15ULL * (index + 1)) ^ 0xA5A5A5A5ULL);
    }

    constexpr std::uint64_t next_u64() {
        return mix64(key_ + 0x9E3779B97F4A7C15ULL * ++counter_);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    /// Standard normal via Box-Muller. Uses two draws per call.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    [[nodiscard]] constexpr std::uint64_t key() const { return key_; }
    [[nodiscard]] constexpr std::uint64_t counter() const { return counter_; }

private:
    static constexpr Rng from_key(std::uint64_t key) {
        Rng r;
        r.key_ = key;
        r.counter_ = 0;
        return r;
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace templora
