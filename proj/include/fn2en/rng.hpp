#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace fn2en {

// Deterministic RNG used everywhere in the toolkit. The engine is std::mt19937_64
// (fully specified by the standard, so portable); the uniform/normal transforms are
// spelled out here instead of using std::*_distribution, whose internals differ
// across standard libraries and carry hidden state that would break bit-exact
// resume.
//
// Training code never shares one long-lived stream across epochs. Streams are
// derived from (seed, tag...) so that the batch order, crops and dropout masks of
// epoch e are a pure function of (seed, e) -- this is what makes resuming from an
// epoch boundary bit-exact without serializing engine state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), n >= 1. Modulo bias is irrelevant at the
    // magnitudes used here (n < 2^32 against a 64-bit draw).
    std::uint64_t uniform_int(std::uint64_t n) { return n <= 1 ? 0 : engine_() % n; }

    // Standard normal via Box-Muller. Uses two draws and keeps no cached spare,
    // so the stream position is always a pure function of the call count.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 engine_;
};

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
}  // namespace detail

// Stream purposes. Keeping them in one enum guarantees two different uses of the
// same (seed, stage, epoch) never collide.
enum class RngUse : std::uint64_t {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Dropout = 4,
    Data = 5,
};

inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t s = detail::mix64(seed);
    for (std::uint64_t t : tags) s = detail::mix64(s ^ detail::mix64(t));
    return Rng(s);
}

inline Rng derive_rng(std::uint64_t seed, RngUse use, std::uint64_t stage = 0,
                      std::uint64_t epoch = 0) {
    return derive_rng(seed, {static_cast<std::uint64_t>(use), stage, epoch});
}

}  // namespace fn2en
