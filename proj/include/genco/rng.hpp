#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace genco {

// Counter-style RNG built on splitmix64. Keys are derived by folding in
// purpose strings and indices, so every consumer (data synthesis, init,
// augmentation, noise) owns an independent stream keyed off the root seed.
// Changing how one stream is consumed cannot shift any other stream.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

struct RngKey {
    uint64_t state = 0;

    static RngKey root(uint64_t seed) { return RngKey{splitmix64(seed ^ 0x6a09e667f3bcc908ull)}; }

    RngKey fold(uint64_t v) const { return RngKey{splitmix64(state ^ splitmix64(v))}; }

    RngKey fold(std::string_view name) const {
        uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return fold(h);
    }
};

// Sequential generator seeded from a key. Draws are deterministic and
// platform-independent (no <random> distributions involved).
class RngStream {
public:
    explicit RngStream(RngKey key) : s_(key.state) {}

    uint64_t next_u64() {
        s_ += 0x9e3779b97f4a7c15ull;
        uint64_t x = s_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Uniform integer in [0, n); n must be positive.
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller. Two uniforms per draw, no caching,
    // so the stream position is a pure function of the draw count.
    double next_normal() {
        double u1 = next_unit();
        double u2 = next_unit();
        // avoid log(0)
        u1 = u1 > 0.0 ? u1 : 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    bool next_bernoulli(double p) { return next_unit() < p; }

private:
    uint64_t s_;
};

}  // namespace genco
