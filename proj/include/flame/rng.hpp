#pragma once

#include <cstdint>
#include <string_view>

namespace flame {

// Splittable counter-based generator. Each instance is an independent stream
// keyed by a 64-bit value; split() derives a child stream whose draws are
// unrelated to the parent's, so modules can pull independent randomness from
// one root seed without coordinating counters.
class SplitRng {
public:
    explicit SplitRng(std::uint64_t seed);

    SplitRng split(std::uint64_t stream) const;
    SplitRng split(std::string_view label) const;

    std::uint64_t next_u64();
    // Uniform in [0,1) with 53 random bits.
    double uniform();
    // Standard normal via Box-Muller; second value cached.
    double normal();
    // Uniform integer in [0, n), n >= 1.
    std::uint64_t below(std::uint64_t n);

private:
    SplitRng() = default;
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

} // namespace flame
