#include "siftmasks/bits.hpp"

#include <bit>
#include <string>

#include "siftmasks/errors.hpp"
#include "siftmasks/prng.hpp"

namespace siftmasks {

BitMask::BitMask(std::size_t size) : size_(size), words_(words_for(size), 0U) {}

BitMask::BitMask(std::size_t size, std::vector<std::uint32_t> words)
    : size_(size), words_(std::move(words)) {
    if (words_.size() != words_for(size_)) {
        throw DataError("mask of " + std::to_string(size_) + " bits needs " +
                        std::to_string(words_for(size_)) + " words, got " +
                        std::to_string(words_.size()));
    }
    if (const std::size_t tail = size_ & 31; tail != 0) {
        if ((words_.back() >> tail) != 0U) {
            throw DataError("mask has nonzero pad bits");
        }
    }
    for (std::uint32_t w : words_) {
        popcount_ += static_cast<std::size_t>(std::popcount(w));
    }
}

BitMask BitMask::ones(std::size_t size) {
    BitMask m(size);
    for (std::size_t i = 0; i < size; ++i) {
        m.set(i, true);
    }
    return m;
}

BitMask BitMask::from_bools(std::span<const bool> bits) {
    BitMask m(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (bits[i]) {
            m.set(i, true);
        }
    }
    return m;
}

void BitMask::set(std::size_t i, bool value) noexcept {
    const std::uint32_t bit = 1U << (i & 31);
    std::uint32_t& w = words_[i >> 5];
    const bool was = (w & bit) != 0U;
    if (was == value) {
        return;
    }
    if (value) {
        w |= bit;
        ++popcount_;
    } else {
        w &= ~bit;
        --popcount_;
    }
}

bool BitMask::subset_of(const BitMask& other) const {
    if (other.size_ != size_) {
        throw DataError("mask length mismatch");
    }
    for (std::size_t k = 0; k < words_.size(); ++k) {
        if ((words_[k] & ~other.words_[k]) != 0U) {
            return false;
        }
    }
    return true;
}

SignVector gen_sign_vector(std::uint64_t seed, std::size_t size) {
    if (size == 0) {
        throw ConfigError("sign vector length must be positive");
    }
    PrngStream rng(seed);
    std::vector<std::uint32_t> words(BitMask::words_for(size), 0U);
    for (std::size_t k = 0; k < words.size(); k += 2) {
        const std::uint64_t draw = rng.next();
        words[k] = static_cast<std::uint32_t>(draw);
        if (k + 1 < words.size()) {
            words[k + 1] = static_cast<std::uint32_t>(draw >> 32);
        }
    }
    if (const std::size_t tail = size & 31; tail != 0) {
        words.back() &= (1U << tail) - 1U;
    }
    return SignVector(seed, BitMask(size, std::move(words)));
}

}  // namespace siftmasks
