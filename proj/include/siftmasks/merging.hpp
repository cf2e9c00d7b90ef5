#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "siftmasks/bits.hpp"
#include "siftmasks/fixed_point.hpp"
#include "siftmasks/param_vector.hpp"
#include "siftmasks/trainer.hpp"

namespace siftmasks {

enum class MethodTag { sift_masks, ft_merge, tall_masks, emr, ties, central };

std::string_view to_string(MethodTag tag) noexcept;
MethodTag method_tag_from_string(std::string_view name);

/// Whether the method keeps a merged accumulator (everything but central).
bool is_merge_family(MethodTag tag) noexcept;
/// Whether the method stores one bit mask per retained task.
bool stores_masks(MethodTag tag) noexcept;
/// Whether task vectors come from sign-fixed tuning.
bool uses_sift(MethodTag tag) noexcept;

struct LocalizationMethod {
    MethodTag tag = MethodTag::sift_masks;
    std::vector<double> density_grid{0.1, 0.3, 0.5, 0.7, 0.9};
    std::vector<double> alpha_grid{0.8, 1.0, 1.2, 1.4, 1.6};
    double ties_density = 0.2;
    /// SIFT localization divisor: false divides by |retained|, true divides
    /// each entry by the number of retained masks covering it.
    bool overlap_normalize = false;
    /// TALL/EMR/TIES rebuilds reuse in-memory task vectors instead of
    /// retraining. The ledger charges retraining either way.
    bool cache_task_vectors = false;

    void validate() const;

    friend bool operator==(const LocalizationMethod&, const LocalizationMethod&) = default;
};

/// The stored merged system for one group of tasks.
struct MergedState {
    MethodTag method = MethodTag::ft_merge;
    std::uint64_t base_seed = 0;
    std::uint64_t sign_seed = 0;
    FxpVector accumulator;
    std::vector<TaskId> retained;  // ascending
    std::map<TaskId, BitMask> masks;
    /// Digest of each retained task's quantized vector, checked on replay.
    std::map<TaskId, std::uint64_t> digests;
    std::map<TaskId, double> lambdas;  // tall
    std::map<TaskId, double> scales;   // tall: alpha, emr: l1 rescale
    ParamVector unified;               // emr
    ParamVector ties_delta;            // ties

    bool contains(TaskId id) const noexcept;
    std::size_t size() const noexcept { return accumulator.size(); }

    friend bool operator==(const MergedState&, const MergedState&) = default;
};

/// 64-bit digest of a fixed-point vector (scale bits included).
std::uint64_t fxp_digest(const FxpVector& x) noexcept;

/// Exact sum of the quantized deltas; retained = all ids, digests filled.
/// Throws DataError on duplicate ids or length mismatch. An empty list
/// gives an empty state of length `size`.
MergedState merge(std::span<const TaskVector> task_vectors, std::size_t size = 0,
                  int scale_bits = kDefaultScaleBits);

/// Subtracts the quantized vector of a retained task and drops its mask and
/// per-task payload. Throws DataError for an unknown id.
MergedState unmerge(const MergedState& state, const TaskVector& tau_u);
MergedState unmerge(const MergedState& state, TaskId id, const FxpVector& quantized);

/// M0 + deq(m_t * acc) / |retained| (or per-entry mask coverage when
/// overlap_normalize is set).
ParamVector localize_sift(const MergedState& state, TaskId id, const ParamVector& base,
                          bool overlap_normalize = false);

/// M0 + deq(acc) / |retained|; M0 when nothing is retained.
ParamVector serve_merged(const MergedState& state, const ParamVector& base);

/// Bit i set iff |q_t[i]| >= lambda * |acc[i] - q_t[i]|, evaluated on the
/// fixed-point grid.
BitMask tall_mask(const FxpVector& quantized_tau, const FxpVector& accumulator, double lambda);
BitMask tall_mask(const TaskVector& tau, const MergedState& state, double lambda);

struct TallChoice {
    double lambda = 0.0;
    double alpha = 1.0;
    double density = 1.0;   // grid target
    double accuracy = 0.0;  // on the tuning examples
    BitMask mask;
};

/// Threshold achieving the mask density closest to `target` (bisection over
/// the sorted per-entry ratios; lambda 0 gives the full mask).
double tall_lambda_for_density(const FxpVector& quantized_tau, const FxpVector& accumulator,
                               double target);

/// Grid search over (density, alpha) scored on `examples`. Ties go to the
/// smaller density, then the smaller alpha.
TallChoice tall_tune(const FxpVector& quantized_tau, const MergedState& state, const ParamVector& base,
                     const ModelSpec& spec, std::span<const double> density_grid,
                     std::span<const double> alpha_grid, std::span<const Example* const> examples);

/// M0 + alpha * deq(m * acc) / |retained|.
ParamVector localize_tall(const MergedState& state, TaskId id, const ParamVector& base);
ParamVector localize_tall(const FxpVector& accumulator, std::size_t retained, const BitMask& mask,
                          double alpha, const ParamVector& base);

struct EmrResult {
    ParamVector unified;
    std::map<TaskId, BitMask> masks;
    std::map<TaskId, double> scales;
};

/// Elect sign(sum), keep the largest same-sign magnitude per entry, mask
/// 1{tau * unified > 0}, rescale to tau's l1 norm (1 when the masked norm is 0).
EmrResult emr_build(std::span<const TaskVector> task_vectors);

/// M0 + scale * (mask * unified).
ParamVector emr_localize(const ParamVector& unified, const BitMask& mask, double scale,
                         const ParamVector& base);

/// Trim each task to its top ceil(density * M) magnitudes (lower index wins
/// ties), elect sign(sum), disjoint mean over agreeing tasks.
ParamVector ties_merge(std::span<const TaskVector> task_vectors, double density);

/// Number of entries kept by the TIES trim step.
std::size_t ties_keep_count(std::size_t size, double density);

/// The per-task model served under the state's method. For ft_merge and
/// ties every task gets the same model.
ParamVector localize(const MergedState& state, TaskId id, const ParamVector& base,
                     bool overlap_normalize = false);

}  // namespace siftmasks
