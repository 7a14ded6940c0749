#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace bnfair {

// Advances a splitmix64 state and returns the next output word.
std::uint64_t splitmix64_next(std::uint64_t& state);

/// Deterministic PRNG: splitmix64 seeds a xoshiro256++ state.
///
/// Gaussian draws use Box-Muller on two consecutive uniforms; the first
/// value returned is r*cos(2*pi*u2), the sine companion is cached and
/// returned by the following call. The cache is part of the stream state,
/// so equal seeds give equal sequences regardless of call mix.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform double in [0, 1), 53-bit resolution.
    double uniform();
    double uniform(double lo, double hi);

    /// Standard normal via Box-Muller (pair-consuming).
    double gaussian();
    double gaussian(double mu, double sigma);

    bool bernoulli(double p);

    /// Uniform integer in [0, n), n > 0. Bitmask rejection; unbiased and
    /// platform-independent.
    std::uint64_t uniform_int(std::uint64_t n);

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Disjoint substream: a fresh stream seeded with splitmix64(seed ^ index).
    RngStream substream(std::uint64_t index) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t draw_count() const { return draw_count_; }

private:
    std::array<std::uint64_t, 4> state_{};
    std::uint64_t seed_ = 0;
    std::uint64_t draw_count_ = 0;
    bool has_cached_gaussian_ = false;
    double cached_gaussian_ = 0.0;
};

/// One-step seed derivation used for substreams and stage seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace bnfair
