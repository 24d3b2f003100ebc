#include "flame/rng.hpp"

#include "flame/errors.hpp"

#include <cmath>
#include <numbers>

namespace flame {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// SplitMix64 finalizer; full-period bijection on 64-bit words.
std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

} // namespace

SplitRng::SplitRng(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

SplitRng SplitRng::split(std::uint64_t stream) const {
    SplitRng child;
    child.key_ = mix64(key_ ^ mix64(stream + kGolden));
    return child;
}

SplitRng SplitRng::split(std::string_view label) const { return split(fnv1a(label)); }

std::uint64_t SplitRng::next_u64() { return mix64(key_ + kGolden * ++counter_); }

double SplitRng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SplitRng::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    // u1 in (0,1] so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(a);
    has_cached_normal_ = true;
    return r * std::cos(a);
}

std::uint64_t SplitRng::below(std::uint64_t n) {
    if (n == 0) throw precondition_error("SplitRng::below: n must be >= 1");
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = n * ((~0ull) / n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

} // namespace flame
