#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qdqkd {

// Canonical unit convention: energies in ueV, times in ps (converted to ns
// only where hbar enters), rates in Hz.  hbar in ueV*ns.
inline constexpr double kHbarUevNs = 0.6582119569;
inline constexpr double kPsPerNs = 1000.0;

struct invalid_input : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derive an independent stream seed from (seed, stream tag, index).
inline uint64_t derive_seed(uint64_t seed, uint64_t tag, uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ splitmix64(tag)) + index);
}

// Deterministic RNG with self-owned distributions.  std:: distributions are
// implementation-defined; these are not, so identical seeds give identical
// streams everywhere the same binary runs.
class Rng {
public:
    explicit Rng(uint64_t seed) : s_(splitmix64(seed ^ 0xd1b54a32d192ed03ull)) {
        if (s_ == 0) s_ = 0x9e3779b97f4a7c15ull;
    }

    uint64_t next_u64() {
        // xoshiro-style splitmix stepping: small, fast, good enough here
        s_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = s_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double u01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return u01() < p; }

    // exponential with given mean (mean <= 0 returns 0)
    double expo(double mean) {
        if (mean <= 0.0) return 0.0;
        return -mean * std::log1p(-u01());
    }

    // standard normal, Box-Muller (both draws consumed every call)
    double gauss() {
        double u1 = u01(), u2 = u01();
        while (u1 <= 0.0) u1 = u01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double gauss(double mean, double sigma) { return mean + sigma * gauss(); }

    // exact Poisson; large means are split into exact i.i.d. chunks
    uint64_t poisson(double mean) {
        if (mean <= 0.0) return 0;
        uint64_t total = 0;
        while (mean > 32.0) {
            total += poisson_small_(32.0);
            mean -= 32.0;
        }
        return total + poisson_small_(mean);
    }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        return next_u64() % n;
    }

private:
    uint64_t poisson_small_(double mean) {
        double limit = std::exp(-mean), prod = u01();
        uint64_t k = 0;
        while (prod > limit) {
            ++k;
            prod *= u01();
        }
        return k;
    }

    uint64_t s_;
};

} // namespace qdqkd
