#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "siftmasks/bits.hpp"
#include "siftmasks/merging.hpp"
#include "siftmasks/tasks.hpp"
#include "siftmasks/trainer.hpp"

namespace siftmasks {

struct EngineConfig {
    LocalizationMethod method;
    ModelSpec model;
    TrainConfig train;
    std::uint64_t base_seed = 0;
    std::uint64_t sign_seed = 0;
    /// Central step budget; 0 means train.steps * |tasks in the group|.
    int central_steps = 0;
    int scale_bits = kDefaultScaleBits;
    /// Upper bound on concurrently running task finetunes.
    std::size_t threads = 1;
    /// After each deletion, rebuild the group from scratch and compare.
    bool audit_unlearn = true;

    void validate() const;
};

enum class Phase { build, unlearn };

std::string_view to_string(Phase phase) noexcept;

struct LedgerEvent {
    Phase phase = Phase::build;
    TaskId task = -1;  // -1 for build events
    std::int64_t task_finetunes = 0;
    std::int64_t finetune_steps = 0;

    friend bool operator==(const LedgerEvent&, const LedgerEvent&) = default;
};

/// Compute spent on learning and unlearning, in task-finetunes and steps.
struct CostLedger {
    std::vector<LedgerEvent> events;

    void charge(Phase phase, TaskId task, std::int64_t task_finetunes, std::int64_t finetune_steps);

    std::int64_t task_finetunes() const noexcept;
    std::int64_t finetune_steps() const noexcept;
    std::int64_t task_finetunes(Phase phase) const noexcept;
    std::int64_t finetune_steps(Phase phase) const noexcept;

    friend bool operator==(const CostLedger&, const CostLedger&) = default;
};

struct StorageReport {
    std::int64_t model_words = 0;
    std::int64_t mask_words = 0;
    std::int64_t words() const noexcept { return model_words + mask_words; }
};

/// Words needed to serve `tasks` retained tasks with `models` stored models.
StorageReport storage_words(MethodTag method, std::size_t param_count, std::size_t tasks, std::size_t models = 1);

struct ExactnessReport {
    TaskId task = -1;
    bool replayed = false;        // a finetune was rerun for this check
    bool replay_matches = true;   // rerun vectors equal the build-time ones
    bool state_checked = false;
    bool state_matches_oracle = true;
    std::int64_t task_finetunes = 0;
    std::int64_t finetune_steps = 0;
    std::vector<TaskId> mismatched;

    bool exact() const noexcept { return replay_matches && (!state_checked || state_matches_oracle); }
};

/// One independently merged (or centrally trained) set of tasks.
struct Group {
    std::vector<TaskId> members;  // every task ever assigned, ascending
    MergedState merged;           // merge family
    ParamVector central;          // central; M0 once every member is gone
    std::vector<TaskId> central_retained;

    const std::vector<TaskId>& retained(MethodTag method) const noexcept {
        return method == MethodTag::central ? central_retained : merged.retained;
    }

    friend bool operator==(const Group&, const Group&) = default;
};

struct SystemState {
    EngineConfig config;
    std::vector<TaskSpec> tasks;          // registry, ascending id
    std::map<TaskId, std::size_t> assignment;  // task -> group index
    std::vector<Group> groups;
    std::vector<TaskId> unlearned;        // in deletion order
    CostLedger ledger;
    ParamVector base;
    SignVector signs;                     // empty unless sift_masks
    /// Task vectors kept when method.cache_task_vectors is set. Never persisted.
    std::map<TaskId, TaskVector> cache;

    MethodTag method() const noexcept { return config.method.tag; }
    const TaskSpec& task(TaskId id) const;
    bool is_retained(TaskId id) const;
    std::vector<TaskId> retained() const;
};

/// Deterministic shuffle then round-robin into `clusters` groups; sizes
/// differ by at most one. Returns task id -> cluster index.
std::map<TaskId, std::size_t> cluster_random(std::span<const TaskSpec> tasks, std::size_t clusters,
                                             std::uint64_t seed);

/// Trains every task and builds the system. Without an assignment all tasks
/// form one group.
SystemState build(std::vector<TaskSpec> tasks, const EngineConfig& cfg,
                  std::optional<std::map<TaskId, std::size_t>> assignment = std::nullopt);

/// Same as build() with cluster_random(tasks, clusters, cluster_seed).
SystemState build_clustered(std::vector<TaskSpec> tasks, const EngineConfig& cfg, std::size_t clusters,
                            std::uint64_t cluster_seed);

/// Deletes one retained task. Throws DataError for unknown or already
/// unlearned ids and ExactnessError when replay does not reproduce the
/// build-time vector.
ExactnessReport unlearn(SystemState& system, TaskId id);

/// Replays every retained task and compares against the stored state.
ExactnessReport verify_exactness(const SystemState& system);

/// Compares fold-add of the given vectors with the accumulator of the group
/// that holds them (single-group systems).
ExactnessReport verify_exactness(const SystemState& system, std::span<const TaskVector> retained_vectors);

/// The group's state rebuilt from scratch on its current retained set.
Group rebuild_group(const SystemState& system, std::size_t group_index);

enum class EvalMode { held_in, held_out };

std::string_view to_string(EvalMode mode) noexcept;

struct TaskAccuracy {
    TaskId task = 0;
    bool retained = true;
    double accuracy = 0.0;
};

struct EvalReport {
    EvalMode mode = EvalMode::held_in;
    std::vector<TaskAccuracy> per_task;
    /// Mean of per-task accuracies; 0 when no task is evaluated.
    double aggregate = 0.0;
};

/// held_in: retained tasks with their localized models. held_out: every
/// task; unlearned ones get the group's merged model without a mask.
EvalReport evaluate(const SystemState& system, EvalMode mode);

/// Accuracy of M0 averaged over every task's eval split.
double zeroshot_accuracy(const SystemState& system);

/// The model a retained task is served with.
ParamVector served_model(const SystemState& system, TaskId id);

StorageReport storage(const SystemState& system);

/// Closed-form ledger for deleting all T tasks one by one (no training).
struct CostProjection {
    std::vector<std::int64_t> per_deletion;  // task-finetunes of deletion i
    std::vector<std::int64_t> cumulative;
    std::int64_t total_finetunes = 0;
    std::int64_t total_steps = 0;
};

CostProjection project_total_cost(std::size_t num_tasks, MethodTag method, int steps_per_finetune = 20);

/// Task-finetunes charged when a group of `retained` tasks loses one.
std::int64_t unlearn_cost(MethodTag method, std::size_t retained);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are
/// rethrown on the caller's thread (the lowest index wins).
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace siftmasks
