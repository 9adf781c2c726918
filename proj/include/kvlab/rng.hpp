#pragma once

#include <cmath>
#include <cstdint>

namespace kvlab {

// SplitMix64 generator. Hand-rolled (rather than <random>) so every stream
// is reproducible bit-for-bit regardless of standard library; the whole lab
// depends on that for byte-identical replays.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1), 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; one draw consumes two uniforms.
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Unbiased integer in [0, n). n must be > 0.
    std::uint64_t bounded(std::uint64_t n) {
        const std::uint64_t threshold = (0ull - n) % n;  // 2^64 mod n
        std::uint64_t r;
        do {
            r = next_u64();
        } while (r < threshold);
        return r % n;
    }

private:
    std::uint64_t state_;
};

// Derives a child seed from (base, tag). Stable: only depends on inputs.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    Rng r(base ^ (0x632be59bd9b4e019ull * (tag + 0x9e3779b97f4a7c15ull)));
    r.next_u64();
    return r.next_u64();
}

}  // namespace kvlab
