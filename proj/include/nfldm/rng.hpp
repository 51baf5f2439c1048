#pragma once

#include <cstdint>
#include <cmath>
#include <string>
#include <string_view>

namespace nfldm {

// pcg32 (XSH-RR). Hand-rolled so streams are bit-identical across platforms
// and stdlib versions; every random draw in the project goes through this.
struct Rng {
    uint64_t state = 0x853c49e6748fea9bULL;
    uint64_t inc   = 0xda3e39cb94b95bdbULL;
    bool   has_spare = false;
    double spare     = 0.0;

    Rng() = default;
    Rng(uint64_t seed, uint64_t stream) {
        state = 0;
        inc = (stream << 1u) | 1u;
        next_u32();
        state += seed;
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state;
        state = old * 6364136223846793005ULL + inc;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    // [0, 1)
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }
    double uniform(double a, double b) { return a + (b - a) * uniform(); }
    float uniform_f() { return static_cast<float>(uniform()); }
    float uniform_f(float a, float b) { return static_cast<float>(uniform(a, b)); }

    // [0, n)
    int uniform_int(int n) { return static_cast<int>(uniform() * n) % n; }

    // Box-Muller; spare value cached between calls.
    double normal() {
        if (has_spare) { has_spare = false; return spare; }
        double u1 = 0.0, u2 = 0.0;
        do { u1 = uniform(); } while (u1 <= 1e-12);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }
    float normal_f() { return static_cast<float>(normal()); }
};

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Named substream of a root seed. All randomness in a stage derives from
// substream(config_seed, "purpose...") so runs are reproducible bit for bit.
inline Rng substream(uint64_t seed, std::string_view name) {
    return Rng(seed, fnv1a64(name));
}

inline Rng substream(uint64_t seed, std::string_view name, int64_t index) {
    return Rng(seed, fnv1a64(std::string(name) + "#" + std::to_string(index)));
}

} // namespace nfldm
