#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mmdc {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Combine a seed with stream ids so substreams are independent of
// iteration order.
inline uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    return splitmix64(h ^ c);
}

// Deterministic RNG. mt19937 output is pinned by the standard; the
// normal draw is an explicit Box-Muller so behavior does not depend on
// the library's distribution implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(static_cast<uint32_t>(splitmix64(seed))) {}

    float uniform() {  // [0, 1)
        return static_cast<float>(engine_() >> 8) * (1.0f / 16777216.0f);
    }

    float normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        float u1 = 0.0f;
        do {
            u1 = uniform();
        } while (u1 <= 1e-12f);
        const float u2 = uniform();
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float a = 6.2831853071795864769f * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // [0, n)
    int uniform_int(int n) {
        return static_cast<int>(engine_() % static_cast<uint32_t>(n));
    }

    uint32_t next_u32() { return engine_(); }

private:
    std::mt19937 engine_;
    float spare_ = 0.0f;
    bool has_spare_ = false;
};

// Rng for logical substream (seed, a, b, c).
inline Rng sub_rng(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    return Rng(mix_seed(seed, a, b, c));
}

}  // namespace mmdc
