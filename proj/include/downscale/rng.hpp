#pragma once

// Portable counter-based random number generator.
//
// The generator is keyed by a 64-bit seed and advanced by a 64-bit counter.
// Output n (n = 1, 2, ...) is
//
//     z  = key + n * 0x9E3779B97F4A7C15           (mod 2^64)
//     z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//     z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
//     out = z ^ (z >> 31)
//
// which is the SplitMix64 finalizer applied to a Weyl sequence. Because the
// state is just (key, counter) any stream can be re-created in another
// language from the two integers. Sub-streams are keyed with derive().
//
// uniform() takes the top 53 bits of an output and scales by 2^-53, giving a
// double in [0, 1). normal() uses one Box-Muller transform per call (two
// outputs consumed, the sine branch discarded).

#include <cmath>
#include <cstdint>
#include <numbers>

namespace downscale {

class CounterRng {
  public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Key for an independent sub-stream `stream` of `seed`.
    static constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        return mix(seed ^ mix(stream + 0x632BE59BD9B4E019ULL));
    }

    std::uint64_t next() {
        ++counter_;
        return mix(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        // (0, 1] so the log is finite
        const double u1 = static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer in [0, n). Uses rejection to stay unbiased.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r = next();
        while (r >= limit) r = next();
        return r % n;
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Fisher-Yates shuffle driven by CounterRng.
template <typename Vec>
void shuffle(Vec& v, CounterRng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace downscale
