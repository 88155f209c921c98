// Deterministic RNG: the same seed produces the same stream on every
// platform, which the reproducibility contract of every pipeline stage
// relies on. std::mt19937 streams are portable but the standard
// distributions are not, so sampling is implemented here.
#pragma once

#include <cmath>
#include <cstdint>

namespace msd::rng {

// Stateless splitmix64 step, also used as the seed-derivation hash.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Per-component / per-tile seed derivation: root XOR stream index, hashed.
inline std::uint64_t derive(std::uint64_t root, std::uint64_t stream) {
    std::uint64_t s = root ^ (stream * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL);
    return splitmix64(s);
}

// xoshiro256** seeded through splitmix64.
class Generator {
public:
    explicit Generator(std::uint64_t seed = 1) {
        for (auto& word : s_) word = splitmix64(seed);
        gauss_valid_ = false;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // Standard normal via Box-Muller; both values of each pair are used.
    double normal() {
        if (gauss_valid_) {
            gauss_valid_ = false;
            return gauss_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        gauss_ = r * std::sin(a);
        gauss_valid_ = true;
        return r * std::cos(a);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t s_[4];
    double gauss_ = 0.0;
    bool gauss_valid_ = false;
};

// Fisher-Yates shuffle of [0,n) index vector, deterministic under seed.
template <typename IndexVec>
void shuffle_indices(IndexVec& idx, Generator& gen) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(gen.below(i));
        std::swap(idx[i - 1], idx[j]);
    }
}

}  // namespace msd::rng
