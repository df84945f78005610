#include "bifrec/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace bifrec {

uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t hash_label(std::string_view label) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

RandomStream::RandomStream(uint64_t key) : key_(key), state_(key) {}

uint64_t RandomStream::next_u64() { return splitmix64(state_); }

double RandomStream::uniform() {
    // 53 random bits into [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RandomStream::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double RandomStream::normal(double mean, double stddev) {
    // Box-Muller; two fresh draws per call keeps the stream layout simple.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
}

std::size_t RandomStream::uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
    // Rejection-free modulo is fine here: n is tiny relative to 2^64.
    return static_cast<std::size_t>(next_u64() % n);
}

bool RandomStream::bernoulli(double p) { return uniform() < p; }

RandomStream RandomStream::fork(uint64_t label) const {
    uint64_t mix = key_ ^ (0x9e3779b97f4a7c15ULL + label * 0xff51afd7ed558ccdULL);
    uint64_t s = mix;
    return RandomStream(splitmix64(s));
}

RandomStream RandomStream::fork(std::string_view label) const {
    return fork(hash_label(label));
}

}  // namespace bifrec
