#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace ounet {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d49bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counted random stream: a seed plus the number of draws consumed.
/// The same seed always yields the same sequence, and a stream can be
/// reconstructed from (seed, draws) by replay.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

    static RngStream restore(std::uint64_t seed, std::uint64_t draws) {
        RngStream s(seed);
        s.engine_.discard(draws);
        s.draws_ = draws;
        return s;
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t draws() const { return draws_; }

    /// Independent stream derived from this one's seed and a tag.
    RngStream fork(std::uint64_t tag) const { return RngStream(splitmix64(seed_ ^ splitmix64(tag))); }

    std::uint64_t next_u64() {
        ++draws_;
        return engine_();
    }

    double uniform() {  // [0,1)
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n) {
        return n <= 1 ? 0 : static_cast<std::int64_t>(uniform() * static_cast<double>(n));
    }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + uniform_int(hi - lo + 1);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        // Box-Muller on two counted draws; no cached spare so that the
        // draw count stays an exact function of the call sequence.
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
    }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t draws_ = 0;
    std::mt19937_64 engine_;
};

}  // namespace ounet
