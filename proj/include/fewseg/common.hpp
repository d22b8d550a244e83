#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace fewseg {

using Scalar = double;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IngestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; also used to derive independent seed streams.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t tag) {
    return mix64(base ^ mix64(tag + 0x51ed2701ab0cf3d5ull));
}

inline uint64_t derive_seed(uint64_t base, uint64_t tag_a, uint64_t tag_b) {
    return derive_seed(derive_seed(base, tag_a), tag_b);
}

// xoshiro256++ with an explicit uniform mapping, so streams are identical
// across platforms and standard library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t z = seed;
        for (auto& word : state_) {
            z = mix64(z);
            word = z;
        }
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0,1)
    double uniform() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n)
    int uniform_int(int n) {
        return static_cast<int>(uniform() * static_cast<double>(n)) % n;
    }

    // Box-Muller, spare value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4];
    bool has_spare_;
    double spare_;
};

}  // namespace fewseg
