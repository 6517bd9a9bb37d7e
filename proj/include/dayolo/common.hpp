#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dayolo {

// Error taxonomy shared by all modules. The CLI maps these onto its
// exit-code contract: validation/shape -> 1, IO -> 2, divergence -> 3.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public ValidationError {
public:
    explicit ShapeError(const std::string& msg) : ValidationError(msg) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// splitmix64, used to derive independent child seeds from (seed, index).
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t child_seed(uint64_t seed, uint64_t stream, uint64_t index) {
    return splitmix64(splitmix64(seed ^ (0x517cc1b727220a95ULL * stream)) + index);
}

// Deterministic RNG. xoshiro-free: plain splitmix stream so the byte
// output never depends on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0xd1b54a32d192ed03ULL)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [lo, hi] inclusive
    int uniform_int(int lo, int hi) {
        return lo + int(next_u64() % uint64_t(hi - lo + 1));
    }

    // standard normal via Box-Muller (no cached spare: keeps the stream
    // position a pure function of call count)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    uint64_t state_;
};

// FNV-1a over a byte string; used for config hashing.
inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace dayolo
