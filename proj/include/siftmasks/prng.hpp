#pragma once

#include <cstdint>
#include <string_view>

namespace siftmasks {

/// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// FNV-1a over the label bytes; used to turn stream labels into integers.
constexpr std::uint64_t hash_label(std::string_view label) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Child seed for a labelled sub-stream. A pure function of its inputs, so
/// any stream can be re-derived later from the parent seed and the label.
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t label) noexcept {
    return mix64(parent ^ mix64(label + 0x9E3779B97F4A7C15ULL));
}

constexpr std::uint64_t derive_seed(std::uint64_t parent, std::string_view label) noexcept {
    return derive_seed(parent, hash_label(label));
}

/// SplitMix64 generator. Every random draw in the library goes through one of
/// these, seeded from a derived seed; there is no ambient randomness.
class PrngStream {
public:
    explicit constexpr PrngStream(std::uint64_t seed) noexcept : state_(seed) {}

    constexpr std::uint64_t next() noexcept {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix64(state_);
    }

    constexpr std::uint64_t state() const noexcept { return state_; }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n) noexcept;

    /// Standard normal via Box-Muller (one value per call, the pair's second
    /// half is dropped so the stream position stays a function of call count).
    double normal() noexcept;

    bool coin() noexcept { return (next() >> 63) != 0; }

private:
    std::uint64_t state_;
};

}  // namespace siftmasks
