#include "siftmasks/merging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "siftmasks/errors.hpp"
#include "siftmasks/prng.hpp"

namespace siftmasks {

namespace {

int sign_of(double x) noexcept {
    return (x > 0.0) - (x < 0.0);
}

const BitMask& mask_for(const MergedState& state, TaskId id) {
    if (!state.contains(id)) {
        throw DataError("task " + std::to_string(id) + " is not retained");
    }
    auto it = state.masks.find(id);
    if (it == state.masks.end()) {
        throw DataError("no mask stored for task " + std::to_string(id));
    }
    if (it->second.size() != state.size()) {
        throw DataError("mask length does not match the accumulator");
    }
    return it->second;
}

void check_base(const MergedState& state, const ParamVector& base) {
    if (base.size() != state.size()) {
        throw DataError("base model has " + std::to_string(base.size()) + " entries, state has " +
                        std::to_string(state.size()));
    }
}

std::size_t common_size(std::span<const TaskVector> tvs) {
    const std::size_t m = tvs.front().delta.size();
    std::set<TaskId> seen;
    for (const auto& tv : tvs) {
        if (tv.delta.size() != m) {
            throw DataError("task vector length mismatch: " + std::to_string(tv.delta.size()) + " vs " +
                            std::to_string(m));
        }
        if (!seen.insert(tv.source_task).second) {
            throw DataError("duplicate task id " + std::to_string(tv.source_task));
        }
    }
    return m;
}

}  // namespace

std::string_view to_string(MethodTag tag) noexcept {
    switch (tag) {
        case MethodTag::sift_masks: return "sift_masks";
        case MethodTag::ft_merge: return "ft_merge";
        case MethodTag::tall_masks: return "tall_masks";
        case MethodTag::emr: return "emr";
        case MethodTag::ties: return "ties";
        case MethodTag::central: return "central";
    }
    return "unknown";
}

MethodTag method_tag_from_string(std::string_view name) {
    for (MethodTag tag : {MethodTag::sift_masks, MethodTag::ft_merge, MethodTag::tall_masks, MethodTag::emr,
                          MethodTag::ties, MethodTag::central}) {
        if (name == to_string(tag)) {
            return tag;
        }
    }
    throw ConfigError("unknown method '" + std::string(name) +
                      "' (valid: sift_masks, ft_merge, tall_masks, emr, ties, central)");
}

bool is_merge_family(MethodTag tag) noexcept {
    return tag != MethodTag::central;
}

bool stores_masks(MethodTag tag) noexcept {
    return tag == MethodTag::sift_masks || tag == MethodTag::tall_masks || tag == MethodTag::emr;
}

bool uses_sift(MethodTag tag) noexcept {
    return tag == MethodTag::sift_masks;
}

void LocalizationMethod::validate() const {
    if (density_grid.empty() || alpha_grid.empty()) {
        throw ConfigError("density and alpha grids must be nonempty");
    }
    for (double d : density_grid) {
        if (!(d > 0.0 && d <= 1.0)) {
            throw ConfigError("density grid values must lie in (0, 1], got " + std::to_string(d));
        }
    }
    for (double a : alpha_grid) {
        if (!std::isfinite(a)) {
            throw ConfigError("alpha grid values must be finite");
        }
    }
    if (!(ties_density > 0.0 && ties_density <= 1.0)) {
        throw ConfigError("ties density must lie in (0, 1], got " + std::to_string(ties_density));
    }
}

bool MergedState::contains(TaskId id) const noexcept {
    return std::binary_search(retained.begin(), retained.end(), id);
}

std::uint64_t fxp_digest(const FxpVector& x) noexcept {
    std::uint64_t h = derive_seed(static_cast<std::uint64_t>(x.size()), static_cast<std::uint64_t>(x.scale_bits()));
    for (std::int64_t v : x.view()) {
        h = mix64(h ^ mix64(static_cast<std::uint64_t>(v) + 0x9E3779B97F4A7C15ULL));
    }
    return h;
}

MergedState merge(std::span<const TaskVector> task_vectors, std::size_t size, int scale_bits) {
    MergedState state;
    if (task_vectors.empty()) {
        state.accumulator = FxpVector(size, scale_bits);
        return state;
    }
    const std::size_t m = common_size(task_vectors);
    if (size != 0 && size != m) {
        throw DataError("task vectors have length " + std::to_string(m) + ", expected " + std::to_string(size));
    }
    state.accumulator = FxpVector(m, scale_bits);
    for (const auto& tv : task_vectors) {
        const FxpVector q = quantize(tv.delta, scale_bits);
        state.accumulator += q;
        state.digests[tv.source_task] = fxp_digest(q);
        state.retained.push_back(tv.source_task);
    }
    std::sort(state.retained.begin(), state.retained.end());
    return state;
}

MergedState unmerge(const MergedState& state, TaskId id, const FxpVector& quantized) {
    if (!state.contains(id)) {
        throw DataError("cannot unmerge task " + std::to_string(id) + ": not retained");
    }
    MergedState out = state;
    out.accumulator -= quantized;
    out.retained.erase(std::lower_bound(out.retained.begin(), out.retained.end(), id));
    out.masks.erase(id);
    out.digests.erase(id);
    out.lambdas.erase(id);
    out.scales.erase(id);
    return out;
}

MergedState unmerge(const MergedState& state, const TaskVector& tau_u) {
    if (tau_u.delta.size() != state.size()) {
        throw DataError("task vector length " + std::to_string(tau_u.delta.size()) +
                        " does not match the accumulator (" + std::to_string(state.size()) + ")");
    }
    return unmerge(state, tau_u.source_task, quantize(tau_u.delta, state.accumulator.scale_bits()));
}

ParamVector localize_sift(const MergedState& state, TaskId id, const ParamVector& base,
                          bool overlap_normalize) {
    const BitMask& mask = mask_for(state, id);
    check_base(state, base);
    const int bits = state.accumulator.scale_bits();
    const double n = static_cast<double>(state.retained.size());
    ParamVector out = base;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!mask.test(i)) {
            continue;
        }
        double divisor = n;
        if (overlap_normalize) {
            divisor = 0.0;
            for (const auto& [other, m] : state.masks) {
                divisor += m.test(i) ? 1.0 : 0.0;
            }
        }
        out[i] = static_cast<float>(static_cast<double>(base[i]) +
                                    dequantize(state.accumulator[i], bits) / divisor);
    }
    return out;
}

ParamVector serve_merged(const MergedState& state, const ParamVector& base) {
    check_base(state, base);
    if (state.retained.empty()) {
        return base;
    }
    const int bits = state.accumulator.scale_bits();
    const double n = static_cast<double>(state.retained.size());
    ParamVector out(base.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(static_cast<double>(base[i]) + dequantize(state.accumulator[i], bits) / n);
    }
    return out;
}

BitMask tall_mask(const FxpVector& quantized_tau, const FxpVector& accumulator, double lambda) {
    if (quantized_tau.size() != accumulator.size()) {
        throw DataError("tall_mask: length mismatch " + std::to_string(quantized_tau.size()) + " vs " +
                        std::to_string(accumulator.size()));
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ConfigError("tall threshold must be finite and >= 0");
    }
    BitMask mask(quantized_tau.size());
    for (std::size_t i = 0; i < quantized_tau.size(); ++i) {
        const double own = std::fabs(static_cast<double>(quantized_tau[i]));
        const double rest = std::fabs(static_cast<double>(accumulator[i] - quantized_tau[i]));
        if (own >= lambda * rest) {
            mask.set(i, true);
        }
    }
    return mask;
}

BitMask tall_mask(const TaskVector& tau, const MergedState& state, double lambda) {
    if (tau.delta.size() != state.size()) {
        throw DataError("tall_mask: length mismatch");
    }
    return tall_mask(quantize(tau.delta, state.accumulator.scale_bits()), state.accumulator, lambda);
}

double tall_lambda_for_density(const FxpVector& quantized_tau, const FxpVector& accumulator, double target) {
    if (quantized_tau.size() != accumulator.size()) {
        throw DataError("tall threshold search: length mismatch");
    }
    const std::size_t m = quantized_tau.size();
    std::size_t always = 0;
    std::vector<double> ratios;
    ratios.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double own = std::fabs(static_cast<double>(quantized_tau[i]));
        const double rest = std::fabs(static_cast<double>(accumulator[i] - quantized_tau[i]));
        if (rest == 0.0) {
            ++always;
        } else {
            ratios.push_back(own / rest);
        }
    }
    std::sort(ratios.begin(), ratios.end(), std::greater<>());

    // Candidate thresholds in decreasing order with the mask size each gives.
    std::vector<double> lambdas;
    std::vector<std::size_t> counts;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        if (i + 1 < ratios.size() && ratios[i + 1] == ratios[i]) {
            continue;
        }
        lambdas.push_back(ratios[i]);
        counts.push_back(always + i + 1);
    }
    // The full mask is always reported at threshold 0.
    if (!counts.empty() && counts.back() == m) {
        lambdas.back() = 0.0;
    } else {
        lambdas.push_back(0.0);
        counts.push_back(m);
    }

    const double want = target * static_cast<double>(m);
    auto it = std::lower_bound(counts.begin(), counts.end(), want,
                               [](std::size_t c, double w) { return static_cast<double>(c) < w; });
    std::size_t pick = it == counts.end() ? counts.size() - 1 : static_cast<std::size_t>(it - counts.begin());
    if (pick > 0) {
        const double above = std::fabs(static_cast<double>(counts[pick]) - want);
        const double below = std::fabs(static_cast<double>(counts[pick - 1]) - want);
        if (below <= above) {
            --pick;
        }
    }
    return lambdas[pick];
}

ParamVector localize_tall(const FxpVector& accumulator, std::size_t retained, const BitMask& mask, double alpha,
                          const ParamVector& base) {
    if (mask.size() != accumulator.size() || base.size() != accumulator.size()) {
        throw DataError("tall localization: length mismatch");
    }
    if (retained == 0) {
        return base;
    }
    const int bits = accumulator.scale_bits();
    const double n = static_cast<double>(retained);
    ParamVector out = base;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (mask.test(i)) {
            out[i] = static_cast<float>(static_cast<double>(base[i]) +
                                        alpha * dequantize(accumulator[i], bits) / n);
        }
    }
    return out;
}

ParamVector localize_tall(const MergedState& state, TaskId id, const ParamVector& base) {
    const BitMask& mask = mask_for(state, id);
    auto it = state.scales.find(id);
    if (it == state.scales.end()) {
        throw DataError("no tall rescale stored for task " + std::to_string(id));
    }
    return localize_tall(state.accumulator, state.retained.size(), mask, it->second, base);
}

TallChoice tall_tune(const FxpVector& quantized_tau, const MergedState& state, const ParamVector& base,
                     const ModelSpec& spec, std::span<const double> density_grid,
                     std::span<const double> alpha_grid, std::span<const Example* const> examples) {
    if (density_grid.empty() || alpha_grid.empty()) {
        throw ConfigError("tall tuning needs nonempty density and alpha grids");
    }
    std::vector<double> densities(density_grid.begin(), density_grid.end());
    std::vector<double> alphas(alpha_grid.begin(), alpha_grid.end());
    std::sort(densities.begin(), densities.end());
    std::sort(alphas.begin(), alphas.end());

    TallChoice best;
    bool have = false;
    for (double density : densities) {
        const double lambda = tall_lambda_for_density(quantized_tau, state.accumulator, density);
        BitMask mask = tall_mask(quantized_tau, state.accumulator, lambda);
        for (double alpha : alphas) {
            const ParamVector model = localize_tall(state.accumulator, state.retained.size(), mask, alpha, base);
            const double acc = accuracy(model.view(), spec, examples);
            if (!have || acc > best.accuracy) {
                best = TallChoice{lambda, alpha, density, acc, mask};
                have = true;
            }
        }
    }
    return best;
}

EmrResult emr_build(std::span<const TaskVector> task_vectors) {
    if (task_vectors.empty()) {
        throw ConfigError("emr needs at least one task vector");
    }
    const std::size_t m = common_size(task_vectors);
    EmrResult out;
    out.unified = ParamVector(m);
    for (std::size_t j = 0; j < m; ++j) {
        double sum = 0.0;
        for (const auto& tv : task_vectors) {
            sum += static_cast<double>(tv.delta[j]);
        }
        const int s = sign_of(sum);
        if (s == 0) {
            continue;
        }
        float top = 0.0f;
        for (const auto& tv : task_vectors) {
            const float x = tv.delta[j];
            if (sign_of(x) == s) {
                top = std::max(top, std::fabs(x));
            }
        }
        out.unified[j] = s > 0 ? top : -top;
    }
    for (const auto& tv : task_vectors) {
        BitMask mask(m);
        double masked_l1 = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (static_cast<double>(tv.delta[j]) * static_cast<double>(out.unified[j]) > 0.0) {
                mask.set(j, true);
                masked_l1 += std::fabs(static_cast<double>(out.unified[j]));
            }
        }
        out.scales[tv.source_task] = masked_l1 == 0.0 ? 1.0 : l1_norm(tv.delta) / masked_l1;
        out.masks.emplace(tv.source_task, std::move(mask));
    }
    return out;
}

ParamVector emr_localize(const ParamVector& unified, const BitMask& mask, double scale, const ParamVector& base) {
    if (unified.size() != base.size() || mask.size() != base.size()) {
        throw DataError("emr localization: length mismatch");
    }
    ParamVector out = base;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (mask.test(i)) {
            out[i] = static_cast<float>(static_cast<double>(base[i]) + scale * static_cast<double>(unified[i]));
        }
    }
    return out;
}

std::size_t ties_keep_count(std::size_t size, double density) {
    if (!(density > 0.0 && density <= 1.0)) {
        throw ConfigError("ties density must lie in (0, 1], got " + std::to_string(density));
    }
    // Guard against products like 0.3 * 10 = 3.0000000000000004.
    const double want = density * static_cast<double>(size);
    const auto k = static_cast<std::size_t>(std::ceil(want - 1e-9 * std::max(1.0, want)));
    return std::clamp<std::size_t>(k, size == 0 ? 0 : 1, size);
}

ParamVector ties_merge(std::span<const TaskVector> task_vectors, double density) {
    if (task_vectors.empty()) {
        throw ConfigError("ties needs at least one task vector");
    }
    const std::size_t m = common_size(task_vectors);
    const std::size_t keep = ties_keep_count(m, density);

    std::vector<ParamVector> trimmed;
    trimmed.reserve(task_vectors.size());
    std::vector<std::size_t> order(m);
    for (const auto& tv : task_vectors) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        const auto& d = tv.delta;
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1), order.end(),
                         [&](std::size_t a, std::size_t b) {
                             const float ma = std::fabs(d[a]);
                             const float mb = std::fabs(d[b]);
                             return ma != mb ? ma > mb : a < b;
                         });
        ParamVector t(m);
        for (std::size_t r = 0; r < keep; ++r) {
            t[order[r]] = d[order[r]];
        }
        trimmed.push_back(std::move(t));
    }

    ParamVector out(m);
    for (std::size_t j = 0; j < m; ++j) {
        double sum = 0.0;
        for (const auto& t : trimmed) {
            sum += static_cast<double>(t[j]);
        }
        const int gamma = sign_of(sum);
        if (gamma == 0) {
            continue;
        }
        double agree = 0.0;
        int count = 0;
        for (const auto& t : trimmed) {
            if (sign_of(t[j]) == gamma) {
                agree += static_cast<double>(t[j]);
                ++count;
            }
        }
        out[j] = static_cast<float>(agree / count);
    }
    return out;
}

ParamVector localize(const MergedState& state, TaskId id, const ParamVector& base, bool overlap_normalize) {
    switch (state.method) {
        case MethodTag::sift_masks:
            return localize_sift(state, id, base, overlap_normalize);
        case MethodTag::ft_merge:
            return serve_merged(state, base);
        case MethodTag::tall_masks:
            return localize_tall(state, id, base);
        case MethodTag::emr: {
            const BitMask& mask = mask_for(state, id);
            return emr_localize(state.unified, mask, state.scales.at(id), base);
        }
        case MethodTag::ties: {
            check_base(state, base);
            if (state.ties_delta.empty()) {
                return base;
            }
            ParamVector out(base.size());
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = static_cast<float>(static_cast<double>(base[i]) + static_cast<double>(state.ties_delta[i]));
            }
            return out;
        }
        case MethodTag::central:
            break;
    }
    throw ConfigError("central systems have no merged state to localize");
}

}  // namespace siftmasks
