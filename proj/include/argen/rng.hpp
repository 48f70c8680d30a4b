#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace argen {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t mix_u64(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    return splitmix64(s);
}

// Deterministic counter-based generator. The whole state is one u64, so
// snapshots for checkpointing are trivial and bit-exact.
class Rng {
public:
    Rng() : state_(0x853c49e6748fea9bull) {}
    explicit Rng(uint64_t seed) : state_(splitmix64(seed)) {}

    // Independent child stream, e.g. one per dataset record.
    Rng derive(uint64_t tag) const {
        Rng r;
        r.state_ = mix_u64(state_, tag);
        return r;
    }
    Rng derive(uint64_t tag_a, uint64_t tag_b) const {
        Rng r;
        r.state_ = mix_u64(mix_u64(state_, tag_a), tag_b);
        return r;
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    int rand_int(int n) { return int(next_u64() % uint64_t(n)); }

    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_u64() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

// FNV-1a over bytes, used for content addressing and checkpoint digests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace argen
