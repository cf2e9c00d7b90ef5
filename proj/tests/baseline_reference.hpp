#pragma once

// Direct-from-definition baselines in double precision, used as oracles.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "siftmasks/merging.hpp"
#include "siftmasks/prng.hpp"

namespace reference {

inline int sgn(double x) { return (x > 0) - (x < 0); }

inline std::vector<bool> tall(const std::vector<double>& tau, const std::vector<double>& total, double lambda) {
    std::vector<bool> m(tau.size());
    for (std::size_t i = 0; i < tau.size(); ++i) {
        m[i] = std::fabs(tau[i]) >= lambda * std::fabs(total[i] - tau[i]);
    }
    return m;
}

struct Emr {
    std::vector<double> unified;
    std::vector<std::vector<bool>> masks;
    std::vector<double> scales;
};

inline Emr emr(const std::vector<std::vector<double>>& taus) {
    const std::size_t m = taus[0].size();
    Emr r;
    r.unified.assign(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (const auto& t : taus) s += t[j];
        double top = 0;
        for (const auto& t : taus) {
            if (sgn(t[j]) == sgn(s) && sgn(s) != 0) top = std::max(top, std::fabs(t[j]));
        }
        r.unified[j] = sgn(s) * top;
    }
    for (const auto& t : taus) {
        std::vector<bool> mask(m);
        double l1 = 0, masked = 0;
        for (std::size_t j = 0; j < m; ++j) {
            l1 += std::fabs(t[j]);
            mask[j] = t[j] * r.unified[j] > 0;
            if (mask[j]) masked += std::fabs(r.unified[j]);
        }
        r.masks.push_back(mask);
        r.scales.push_back(masked == 0 ? 1.0 : l1 / masked);
    }
    return r;
}

inline std::vector<double> ties(const std::vector<std::vector<double>>& taus, double density) {
    const std::size_t m = taus[0].size();
    const auto keep = static_cast<std::size_t>(std::ceil(density * double(m) - 1e-9));
    std::vector<std::vector<double>> trimmed;
    for (const auto& t : taus) {
        std::vector<std::size_t> idx(m);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return std::fabs(t[a]) > std::fabs(t[b]); });
        std::vector<double> out(m, 0.0);
        for (std::size_t r = 0; r < keep; ++r) out[idx[r]] = t[idx[r]];
        trimmed.push_back(out);
    }
    std::vector<double> out(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (const auto& t : trimmed) s += t[j];
        double agree = 0;
        int n = 0;
        for (const auto& t : trimmed) {
            if (sgn(t[j]) == sgn(s) && sgn(s) != 0) {
                agree += t[j];
                ++n;
            }
        }
        out[j] = n == 0 ? 0.0 : agree / n;
    }
    return out;
}

inline siftmasks::TaskVector tv(siftmasks::TaskId id, std::vector<float> values) {
    siftmasks::TaskVector t;
    t.delta = siftmasks::ParamVector(std::move(values));
    t.source_task = id;
    return t;
}

// Values on a 1/8 grid keep every double sum exact, so the references can be
// compared bit for bit.
inline std::vector<float> dyadic(siftmasks::PrngStream& rng, std::size_t n, int zero_one_in = 5) {
    std::vector<float> v(n);
    for (auto& x : v) {
        x = rng.below(zero_one_in) == 0 ? 0.0f : static_cast<float>(static_cast<int>(rng.below(33)) - 16) / 8.0f;
    }
    return v;
}

inline std::vector<double> as_double(const siftmasks::ParamVector& x) {
    return {x.values().begin(), x.values().end()};
}

inline std::vector<bool> as_bools(const siftmasks::BitMask& m) {
    std::vector<bool> b(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) b[i] = m.test(i);
    return b;
}

// tall_mask, emr_build and ties_merge against the references on random
// vectors of length <= 64. Returns the number of differing outputs.
inline int brute_force_mismatches(std::uint64_t seed, int trials) {
    using namespace siftmasks;

    PrngStream rng(seed);
    int mismatches = 0;
    for (int trial = 0; trial < trials; ++trial) {
        const std::size_t n = 1 + rng.below(64);
        const std::size_t T = 1 + rng.below(5);
        std::vector<TaskVector> taus;
        std::vector<std::vector<double>> ref;
        for (std::size_t t = 0; t < T; ++t) {
            taus.push_back(reference::tv(static_cast<TaskId>(t), dyadic(rng, n)));
            ref.push_back(as_double(taus.back().delta));
        }
        std::vector<double> total(n, 0.0);
        for (const auto& r : ref) {
            for (std::size_t i = 0; i < n; ++i) total[i] += r[i];
        }

        const MergedState state = merge(taus);
        const double lambda = rng.uniform() * 2;
        const std::size_t pick = rng.below(T);
        mismatches += as_bools(tall_mask(taus[pick], state, lambda)) != reference::tall(ref[pick], total, lambda);

        const EmrResult emr = emr_build(taus);
        const reference::Emr er = reference::emr(ref);
        mismatches += as_double(emr.unified) != er.unified;
        for (std::size_t t = 0; t < T; ++t) {
            mismatches += as_bools(emr.masks.at(static_cast<TaskId>(t))) != er.masks[t];
            mismatches += emr.scales.at(static_cast<TaskId>(t)) != er.scales[t];
        }

        const double density = 0.05 + 0.95 * rng.uniform();
        const ParamVector ties = ties_merge(taus, density);
        const std::vector<double> tr = reference::ties(ref, density);
        for (std::size_t i = 0; i < n; ++i) {
            mismatches += ties[i] != static_cast<float>(tr[i]);
        }
    }
    return mismatches;
}

}  // namespace reference
