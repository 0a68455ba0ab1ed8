#pragma once

#include <cstdint>

namespace d3tom {

// SplitMix64 (Steele et al.). Every generated tensor must be regenerable
// bit-exactly from (seed, ordinal) on any platform, so this is the only
// random source in the project.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1) with 53-bit resolution
    double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // uniform in [-bound, +bound)
    float next_symmetric(double bound) {
        return static_cast<float>((2.0 * next_unit() - 1.0) * bound);
    }

private:
    std::uint64_t state_;
};

// Per-tensor stream key. seed + ordinal alone would give streams that are
// shifted copies of each other; mixing twice decorrelates them.
inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t ordinal) {
    SplitMix64 outer(seed);
    SplitMix64 inner(outer.next() ^ (ordinal + 1));
    return inner.next();
}

}  // namespace d3tom
