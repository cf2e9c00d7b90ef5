#include "siftmasks/fixed_point.hpp"

#include <cmath>
#include <string>

#include "siftmasks/errors.hpp"

namespace siftmasks {

namespace {

void check_scale(int scale_bits) {
    if (scale_bits < 0 || scale_bits > 61) {
        throw ConfigError("scale_bits must lie in [0, 61], got " + std::to_string(scale_bits));
    }
}

// Round half to even without depending on the floating-point environment.
double round_half_even(double y) {
    const double lower = std::floor(y);
    const double frac = y - lower;
    if (frac > 0.5) {
        return lower + 1.0;
    }
    if (frac < 0.5) {
        return lower;
    }
    return std::fmod(lower, 2.0) == 0.0 ? lower : lower + 1.0;
}

std::int64_t checked(std::int64_t v, std::size_t index) {
    if (v >= kFxpLimit || v <= -kFxpLimit) {
        throw OverflowError("fixed-point overflow at entry " + std::to_string(index));
    }
    return v;
}

void check_same_shape(const FxpVector& a, const FxpVector& b) {
    if (a.size() != b.size()) {
        throw DataError("fixed-point length mismatch: " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
    }
    if (a.scale_bits() != b.scale_bits()) {
        throw DataError("fixed-point scale mismatch");
    }
}

}  // namespace

std::int64_t quantize(double x, int scale_bits) {
    check_scale(scale_bits);
    if (!std::isfinite(x) || std::fabs(x) >= std::ldexp(1.0, 62 - scale_bits)) {
        throw OverflowError("value out of fixed-point range");
    }
    return static_cast<std::int64_t>(round_half_even(std::ldexp(x, scale_bits)));
}

double dequantize(std::int64_t q, int scale_bits) noexcept {
    return std::ldexp(static_cast<double>(q), -scale_bits);
}

FxpVector::FxpVector(std::size_t size, int scale_bits) : values_(size, 0), scale_bits_(scale_bits) {
    check_scale(scale_bits);
}

FxpVector::FxpVector(std::vector<std::int64_t> values, int scale_bits)
    : values_(std::move(values)), scale_bits_(scale_bits) {
    check_scale(scale_bits);
    for (std::size_t i = 0; i < values_.size(); ++i) {
        checked(values_[i], i);
    }
}

bool FxpVector::is_zero() const noexcept {
    for (std::int64_t v : values_) {
        if (v != 0) {
            return false;
        }
    }
    return true;
}

FxpVector& FxpVector::operator+=(const FxpVector& other) {
    check_same_shape(*this, other);
    for (std::size_t i = 0; i < values_.size(); ++i) {
        std::int64_t out = 0;
        if (__builtin_add_overflow(values_[i], other.values_[i], &out)) {
            throw OverflowError("fixed-point overflow at entry " + std::to_string(i));
        }
        values_[i] = checked(out, i);
    }
    return *this;
}

FxpVector& FxpVector::operator-=(const FxpVector& other) {
    check_same_shape(*this, other);
    for (std::size_t i = 0; i < values_.size(); ++i) {
        std::int64_t out = 0;
        if (__builtin_sub_overflow(values_[i], other.values_[i], &out)) {
            throw OverflowError("fixed-point overflow at entry " + std::to_string(i));
        }
        values_[i] = checked(out, i);
    }
    return *this;
}

std::vector<double> FxpVector::dequantized() const {
    std::vector<double> out(values_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) {
        out[i] = dequantize(values_[i], scale_bits_);
    }
    return out;
}

FxpVector fxp_add(const FxpVector& a, const FxpVector& b) {
    FxpVector out = a;
    out += b;
    return out;
}

FxpVector fxp_sub(const FxpVector& a, const FxpVector& b) {
    FxpVector out = a;
    out -= b;
    return out;
}

FxpVector quantize(const ParamVector& x, int scale_bits) {
    check_scale(scale_bits);
    std::vector<std::int64_t> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        try {
            out[i] = quantize(static_cast<double>(x[i]), scale_bits);
        } catch (const OverflowError&) {
            throw OverflowError("cannot quantize entry " + std::to_string(i) + " (value " +
                                std::to_string(x[i]) + ")");
        }
    }
    return FxpVector(std::move(out), scale_bits);
}

FxpVector mask_apply(const BitMask& mask, const FxpVector& x) {
    if (mask.size() != x.size()) {
        throw DataError("mask/vector length mismatch: " + std::to_string(mask.size()) + " vs " +
                        std::to_string(x.size()));
    }
    std::vector<std::int64_t> out(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (mask.test(i)) {
            out[i] = x[i];
        }
    }
    return FxpVector(std::move(out), x.scale_bits());
}

}  // namespace siftmasks
