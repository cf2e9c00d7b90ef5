#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace siftmasks {

/// Bit-packed boolean vector over M parameters.
///
/// Layout: bit i lives in word i/32 at position i%32; pad bits past M are
/// always zero. This is also the serialized form (words written little-endian).
class BitMask {
public:
    BitMask() = default;
    /// All-zero mask of length `size`.
    explicit BitMask(std::size_t size);
    /// Rebuild from serialized words. Throws DataError if the word count is
    /// not ceil(size/32) or any pad bit is set.
    BitMask(std::size_t size, std::vector<std::uint32_t> words);

    static BitMask ones(std::size_t size);
    static BitMask from_bools(std::span<const bool> bits);

    std::size_t size() const noexcept { return size_; }
    std::size_t popcount() const noexcept { return popcount_; }
    double density() const noexcept {
        return size_ == 0 ? 0.0 : static_cast<double>(popcount_) / static_cast<double>(size_);
    }

    bool test(std::size_t i) const noexcept { return (words_[i >> 5] >> (i & 31)) & 1U; }
    void set(std::size_t i, bool value) noexcept;

    std::span<const std::uint32_t> words() const noexcept { return words_; }
    static constexpr std::size_t words_for(std::size_t size) noexcept { return (size + 31) / 32; }

    /// True when every set bit of *this is also set in `other`.
    bool subset_of(const BitMask& other) const;

    friend bool operator==(const BitMask&, const BitMask&) = default;

private:
    std::size_t size_ = 0;
    std::size_t popcount_ = 0;
    std::vector<std::uint32_t> words_;
};

/// The global random sign vector shared by every task. Bit 1 means +1,
/// bit 0 means -1. Regenerating from `seed` reproduces the same bits.
class SignVector {
public:
    SignVector() = default;

    std::size_t size() const noexcept { return bits_.size(); }
    std::uint64_t seed() const noexcept { return seed_; }
    const BitMask& bits() const noexcept { return bits_; }

    int operator[](std::size_t i) const noexcept { return bits_.test(i) ? 1 : -1; }

    friend bool operator==(const SignVector&, const SignVector&) = default;
    friend SignVector gen_sign_vector(std::uint64_t seed, std::size_t size);

private:
    SignVector(std::uint64_t seed, BitMask bits) : seed_(seed), bits_(std::move(bits)) {}

    std::uint64_t seed_ = 0;
    BitMask bits_;
};

/// Uniform random signs: each entry is an independent fair coin drawn from
/// PrngStream(seed). Throws ConfigError if size == 0.
SignVector gen_sign_vector(std::uint64_t seed, std::size_t size);

}  // namespace siftmasks
