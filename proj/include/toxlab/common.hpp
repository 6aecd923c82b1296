#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

namespace toxlab {

// ---------------------------------------------------------------- hashing

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
    return splitmix64(seed ^ splitmix64(v));
}

inline uint64_t fnv1a64(const void* bytes, size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// ---------------------------------------------------------------- rng
//
// All distribution draws are hand-rolled on top of mt19937_64 so that
// streams are identical across standard libraries. std::*_distribution
// output is implementation-defined and would break byte-exact reruns.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t bits() { return eng_(); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // standard normal, Box-Muller (cosine branch only, one draw per call)
    double gauss() {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double gauss(double mean, double stddev) { return mean + stddev * gauss(); }

    // unbiased integer in [0, n), rejection sampling
    uint64_t below(uint64_t n) {
        const uint64_t bound = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = eng_();
        while (x >= bound) x = eng_();
        return x % n;
    }

    size_t index(size_t n) { return static_cast<size_t>(below(n)); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

private:
    std::mt19937_64 eng_;
};

// ---------------------------------------------------------------- formatting

// Shortest round-trippable decimal form; used everywhere a double is
// written to CSV/JSON so that re-emitted files are byte-identical.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // trim to the shortest representation that still round-trips
    for (int prec = 1; prec < 17; ++prec) {
        char probe[40];
        std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
        double back = 0.0;
        std::sscanf(probe, "%lf", &back);
        if (back == v) return probe;
    }
    return buf;
}

}  // namespace toxlab
