// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace ttmoe {

// Deterministic PRNG (splitmix64 + Box-Muller). Self-contained so that seeded
// runs are bit-reproducible regardless of the standard library's distribution
// implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(next_u64() % n);
    }

    // Standard normal via Box-Muller; the second draw of each pair is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = 1.0 - uniform(); // (0, 1]
        const double v = uniform();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double theta = 2.0 * std::numbers::pi * v;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T> void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = uniform_index(i + 1);
            std::swap(v[i], v[j]);
        }
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace ttmoe
