#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "siftmasks/bits.hpp"
#include "siftmasks/param_vector.hpp"

namespace siftmasks {

inline constexpr int kDefaultScaleBits = 32;

/// Entries must stay strictly below this magnitude.
inline constexpr std::int64_t kFxpLimit = std::int64_t{1} << 62;

/// Round-to-nearest-even of x * 2^scale_bits. Throws OverflowError when
/// |x| >= 2^(62 - scale_bits) or x is not finite.
std::int64_t quantize(double x, int scale_bits = kDefaultScaleBits);

double dequantize(std::int64_t q, int scale_bits = kDefaultScaleBits) noexcept;

/// Fixed-point vector used as the exact merge accumulator. Integer addition
/// is associative and commutative, so any fold order gives the same bits and
/// subtraction undoes addition exactly.
class FxpVector {
public:
    FxpVector() = default;
    explicit FxpVector(std::size_t size, int scale_bits = kDefaultScaleBits);
    /// Throws OverflowError if any |value| >= 2^62.
    FxpVector(std::vector<std::int64_t> values, int scale_bits);

    std::size_t size() const noexcept { return values_.size(); }
    int scale_bits() const noexcept { return scale_bits_; }
    std::int64_t operator[](std::size_t i) const noexcept { return values_[i]; }
    std::span<const std::int64_t> view() const noexcept { return values_; }

    bool is_zero() const noexcept;

    /// In-place exact add/sub. Throws DataError on shape mismatch and
    /// OverflowError (naming the index) when a result leaves the range.
    FxpVector& operator+=(const FxpVector& other);
    FxpVector& operator-=(const FxpVector& other);

    std::vector<double> dequantized() const;

    friend bool operator==(const FxpVector&, const FxpVector&) = default;

private:
    std::vector<std::int64_t> values_;
    int scale_bits_ = kDefaultScaleBits;
};

FxpVector fxp_add(const FxpVector& a, const FxpVector& b);
FxpVector fxp_sub(const FxpVector& a, const FxpVector& b);

/// Elementwise quantize; the error message names the offending index.
FxpVector quantize(const ParamVector& x, int scale_bits = kDefaultScaleBits);

/// Entry i kept where the bit is set, zeroed elsewhere.
FxpVector mask_apply(const BitMask& mask, const FxpVector& x);

}  // namespace siftmasks
