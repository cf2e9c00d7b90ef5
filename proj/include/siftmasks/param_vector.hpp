#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "siftmasks/bits.hpp"

namespace siftmasks {

/// Flat model parameters or task-vector deltas in 32-bit floats.
class ParamVector {
public:
    ParamVector() = default;
    explicit ParamVector(std::size_t size) : values_(size, 0.0f) {}
    explicit ParamVector(std::vector<float> values) : values_(std::move(values)) {}

    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    float operator[](std::size_t i) const noexcept { return values_[i]; }
    float& operator[](std::size_t i) noexcept { return values_[i]; }

    std::span<const float> view() const noexcept { return values_; }
    std::span<float> view() noexcept { return values_; }
    const std::vector<float>& values() const noexcept { return values_; }

    /// Throws DataError naming the first NaN/Inf entry.
    void check_finite() const;

    /// Bitwise equality; distinguishes -0.0f from +0.0f.
    bool bit_equal(const ParamVector& other) const noexcept;

    friend bool operator==(const ParamVector&, const ParamVector&) = default;

private:
    std::vector<float> values_;
};

/// Entry i is x[i] where the bit is set, 0 elsewhere.
ParamVector mask_apply(const BitMask& mask, const ParamVector& x);

/// Number of nonzero entries.
std::size_t count_nonzero(const ParamVector& x) noexcept;

double l1_norm(const ParamVector& x) noexcept;
double l2_distance(const ParamVector& a, const ParamVector& b);

}  // namespace siftmasks
