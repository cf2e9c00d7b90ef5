#include "siftmasks/prng.hpp"

#include <cmath>
#include <numbers>

namespace siftmasks {

std::uint64_t PrngStream::below(std::uint64_t n) noexcept {
    if (n <= 1) {
        return 0;
    }
    // Largest multiple of n representable; draws at or above it are rejected.
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t x = next();
    while (x >= limit) {
        x = next();
    }
    return x % n;
}

double PrngStream::normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace siftmasks
