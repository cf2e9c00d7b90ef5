#include "siftmasks/param_vector.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "siftmasks/errors.hpp"

namespace siftmasks {

void ParamVector::check_finite() const {
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (!std::isfinite(values_[i])) {
            throw DataError("non-finite parameter at entry " + std::to_string(i));
        }
    }
}

bool ParamVector::bit_equal(const ParamVector& other) const noexcept {
    if (values_.size() != other.values_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (std::bit_cast<std::uint32_t>(values_[i]) != std::bit_cast<std::uint32_t>(other.values_[i])) {
            return false;
        }
    }
    return true;
}

ParamVector mask_apply(const BitMask& mask, const ParamVector& x) {
    if (mask.size() != x.size()) {
        throw DataError("mask/vector length mismatch: " + std::to_string(mask.size()) + " vs " +
                        std::to_string(x.size()));
    }
    ParamVector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (mask.test(i)) {
            out[i] = x[i];
        }
    }
    return out;
}

std::size_t count_nonzero(const ParamVector& x) noexcept {
    std::size_t n = 0;
    for (float v : x.view()) {
        n += v != 0.0f ? 1 : 0;
    }
    return n;
}

double l1_norm(const ParamVector& x) noexcept {
    double s = 0.0;
    for (float v : x.view()) {
        s += std::fabs(static_cast<double>(v));
    }
    return s;
}

double l2_distance(const ParamVector& a, const ParamVector& b) {
    if (a.size() != b.size()) {
        throw DataError("length mismatch in l2_distance");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace siftmasks
