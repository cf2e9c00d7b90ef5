#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "siftmasks/bits.hpp"
#include "siftmasks/errors.hpp"
#include "siftmasks/fixed_point.hpp"
#include "siftmasks/param_vector.hpp"
#include "siftmasks/prng.hpp"

using namespace siftmasks;

namespace {

FxpVector random_fxp(PrngStream& rng, std::size_t n, std::int64_t bound) {
    std::vector<std::int64_t> v(n);
    for (auto& x : v) {
        x = static_cast<std::int64_t>(rng.below(2 * static_cast<std::uint64_t>(bound))) - bound;
    }
    return FxpVector(std::move(v), kDefaultScaleBits);
}

}  // namespace

TEST_CASE("quantize examples") {
    CHECK(quantize(0.5, 32) == 2147483648LL);
    CHECK(quantize(0.0, 32) == 0);
    CHECK(quantize(-0.25, 32) == -1073741824LL);
}

TEST_CASE("quantize rounds half to even") {
    const double ulp = std::ldexp(1.0, -32);
    CHECK(quantize(2.5 * ulp) == 2);
    CHECK(quantize(3.5 * ulp) == 4);
    CHECK(quantize(-2.5 * ulp) == -2);
    CHECK(quantize(-3.5 * ulp) == -4);
    CHECK(quantize(2.25 * ulp) == 2);
    CHECK(quantize(2.75 * ulp) == 3);
}

TEST_CASE("quantize rejects out-of-range input") {
    CHECK_THROWS_AS(quantize(std::ldexp(1.0, 30)), OverflowError);
    CHECK_THROWS_AS(quantize(-std::ldexp(1.0, 30)), OverflowError);
    CHECK_THROWS_AS(quantize(std::nan("")), OverflowError);
    CHECK_THROWS_AS(quantize(INFINITY), OverflowError);
    CHECK_NOTHROW(quantize(std::ldexp(1.0, 30) - 1.0));

    ParamVector x(5);
    x[3] = 2e9f;
    try {
        quantize(x);
        FAIL("expected an overflow");
    } catch (const OverflowError& e) {
        CHECK(std::string(e.what()).find("3") != std::string::npos);
    }
}

TEST_CASE("quantize/dequantize round trip stays within half a grid step") {
    PrngStream rng(99);
    const double bound = std::ldexp(1.0, -33);
    for (int i = 0; i < 10000; ++i) {
        const double x = (rng.uniform() - 0.5) * 2000.0;
        CHECK(std::fabs(dequantize(quantize(x)) - x) <= bound);
    }
}

TEST_CASE("fxp add/sub examples") {
    const FxpVector a(std::vector<std::int64_t>{3}, 32);
    const FxpVector b(std::vector<std::int64_t>{-5}, 32);
    const FxpVector sum = fxp_add(a, b);
    CHECK(sum[0] == -2);
    CHECK(fxp_sub(sum, b) == a);
    CHECK(fxp_sub(a, a).is_zero());
}

TEST_CASE("fxp add is commutative and associative") {
    PrngStream rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const auto a = random_fxp(rng, 17, 1LL << 50);
        const auto b = random_fxp(rng, 17, 1LL << 50);
        const auto c = random_fxp(rng, 17, 1LL << 50);
        CHECK(fxp_add(fxp_add(a, b), c) == fxp_add(fxp_add(c, a), b));
        CHECK(fxp_sub(fxp_add(a, b), b) == a);
    }
}

TEST_CASE("fxp errors") {
    CHECK_THROWS_AS(fxp_add(FxpVector(3), FxpVector(4)), DataError);
    CHECK_THROWS_AS(fxp_add(FxpVector(3, 32), FxpVector(3, 16)), DataError);
    const std::int64_t near = kFxpLimit - 1;
    const FxpVector big(std::vector<std::int64_t>{0, near}, 32);
    try {
        fxp_add(big, FxpVector(std::vector<std::int64_t>{0, 1}, 32));
        FAIL("expected an overflow");
    } catch (const OverflowError& e) {
        CHECK(std::string(e.what()).find("1") != std::string::npos);
    }
    CHECK_THROWS_AS(FxpVector(std::vector<std::int64_t>{kFxpLimit}, 32), OverflowError);
}

TEST_CASE("merge exactness: removing one element from any fold order") {
    PrngStream rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t count = 2 + rng.below(8);
        std::vector<FxpVector> set;
        for (std::size_t i = 0; i < count; ++i) {
            set.push_back(random_fxp(rng, 9, 1LL << 40));
        }
        const std::size_t u = rng.below(count);
        std::vector<std::size_t> order(count);
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = count; i > 1; --i) {
            std::swap(order[i - 1], order[rng.below(i)]);
        }
        FxpVector all(9);
        for (std::size_t i : order) {
            all += set[i];
        }
        FxpVector rest(9);
        for (std::size_t i = 0; i < count; ++i) {
            if (i != u) {
                rest += set[i];
            }
        }
        CHECK(fxp_sub(all, set[u]) == rest);
    }
}

TEST_CASE("prng: splitmix64 reference output and reproducibility") {
    PrngStream zero(0);
    CHECK(zero.next() == 0xE220A8397B1DCDAFULL);
    PrngStream a(42), b(42);
    bool same = true;
    for (int i = 0; i < 10000; ++i) {
        same = same && a.next() == b.next();
    }
    CHECK(same);
    CHECK(derive_seed(7, "data") == derive_seed(7, "data"));
    CHECK(derive_seed(7, "data") != derive_seed(7, "init"));
    CHECK(derive_seed(7, 1) != derive_seed(8, 1));
    PrngStream r(3);
    for (int i = 0; i < 1000; ++i) {
        CHECK(r.below(7) < 7);
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("sign vector: determinism, codomain, balance") {
    const SignVector a = gen_sign_vector(1, 100000);
    const SignVector b = gen_sign_vector(1, 100000);
    CHECK(a == b);
    std::size_t plus = 0;
    bool codomain = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
        codomain = codomain && (a[i] == 1 || a[i] == -1);
        plus += a[i] == 1 ? 1 : 0;
    }
    CHECK(codomain);
    const double frac = static_cast<double>(plus) / 1e5;
    CHECK(std::fabs(frac - 0.5) <= 3.0 * 0.5 / std::sqrt(1e5));
    CHECK(a.bits().popcount() == plus);
    CHECK_FALSE(gen_sign_vector(2, 100000) == a);
    CHECK_THROWS_AS(gen_sign_vector(1, 0), ConfigError);
}

TEST_CASE("bit mask storage and serialization") {
    for (std::size_t m : {1u, 31u, 32u, 33u, 64u, 1000u, 1024u}) {
        BitMask mask(m);
        CHECK(mask.words().size() == (m + 31) / 32);
        PrngStream rng(m);
        std::size_t set = 0;
        for (std::size_t i = 0; i < m; ++i) {
            if (rng.coin()) {
                mask.set(i, true);
                ++set;
            }
        }
        CHECK(mask.popcount() == set);
        const std::vector<std::uint32_t> words(mask.words().begin(), mask.words().end());
        CHECK(BitMask(m, words) == mask);
    }
    // Bit i in word i/32 at position i%32.
    BitMask m(40);
    m.set(33, true);
    CHECK(m.words()[1] == (1u << 1));
    CHECK_THROWS_AS(BitMask(40, {0u, 1u << 9}), DataError);
    CHECK_THROWS_AS(BitMask(40, {0u}), DataError);
    m.set(33, false);
    CHECK(m.popcount() == 0);
}

TEST_CASE("mask_apply examples") {
    const std::array<bool, 3> bits{true, false, true};
    const BitMask m = BitMask::from_bools(bits);
    const ParamVector x(std::vector<float>{2, 3, 4});
    CHECK(mask_apply(m, x) == ParamVector(std::vector<float>{2, 0, 4}));
    CHECK(mask_apply(BitMask::ones(3), x) == x);
    CHECK(mask_apply(BitMask(3), x) == ParamVector(3));
    CHECK_THROWS_AS(mask_apply(BitMask(4), x), DataError);
    CHECK(count_nonzero(x) == 3);
}

TEST_CASE("param vector finiteness check names the entry") {
    ParamVector x(4);
    x[2] = NAN;
    try {
        x.check_finite();
        FAIL("expected a data error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("2") != std::string::npos);
    }
}
