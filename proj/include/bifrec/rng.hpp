#pragma once

#include <cstdint>
#include <cstddef>
#include <string_view>

namespace bifrec {

// splitmix64 step. Advances the state and returns the next 64-bit word.
uint64_t splitmix64(uint64_t& state);

// FNV-1a over a label, used to derive substream keys from names.
uint64_t hash_label(std::string_view label);

// Counter-based splittable stream. A stream is identified by an immutable
// key; draws advance a separate counter state, so forks taken before or
// after any number of draws are identical. Every stochastic choice in the
// project flows through one of these, keyed ultimately by the run seed.
class RandomStream {
public:
    explicit RandomStream(uint64_t key);

    uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    double normal(double mean = 0.0, double stddev = 1.0);
    std::size_t uniform_index(std::size_t n);  // [0, n), n > 0
    bool bernoulli(double p);

    RandomStream fork(uint64_t label) const;
    RandomStream fork(std::string_view label) const;

    uint64_t key() const { return key_; }

private:
    uint64_t key_;
    uint64_t state_;
};

}  // namespace bifrec
