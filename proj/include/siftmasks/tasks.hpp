#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace siftmasks {

using TaskId = std::int64_t;

struct Example {
    std::vector<float> features;
    int label = 0;
    /// Generator tag: region of the shared pool (conflicting), task code
    /// (distinct), or -1 when unknown (loaded from file).
    int region = -1;
};

/// One task c_t: its examples and the held-out evaluation indices.
struct TaskSpec {
    TaskId id = 0;
    std::vector<Example> examples;
    std::vector<std::size_t> eval_split;

    std::size_t input_dim() const noexcept {
        return examples.empty() ? 0 : examples.front().features.size();
    }
    /// Indices not in eval_split, ascending.
    std::vector<std::size_t> train_indices() const;
    std::vector<const Example*> train_examples() const;
    std::vector<const Example*> eval_examples() const;

    /// Throws DataError if the task has no training example, a label falls
    /// outside [0, num_classes), feature widths disagree, or the splits overlap.
    void validate(std::size_t num_classes) const;
};

/// Number of held-out examples for a task of n examples: ceil(20% of n),
/// capped so at least one example remains for training.
std::size_t eval_count(std::size_t n) noexcept;

enum class RegimeKind { conflicting, distinct, similar };

std::string_view to_string(RegimeKind kind) noexcept;
RegimeKind regime_kind_from_string(std::string_view name);

/// Parameters of the synthetic multi-task generators.
///
/// conflicting: every task sees the same pool of inputs. Feature coordinates
///   are split into `regions` blocks, each labelled by its own linear rule.
///   Some regions are contested: there tasks relabel through cyclic class
///   shifts assigned round-robin over a random task order. Each input falls in
///   a contested region with the probability needed for two distinct tasks to
///   disagree on it with probability `conflict_rate`.
/// distinct: each task owns a disjoint orthant-coded feature region and a
///   private linear labelling rule.
/// similar: one global linear rule labels features drawn independently per task.
///
/// In every regime inputs whose top-two logit gap is below `margin` are
/// rejected, so the rules are separable with that margin.
struct HeterogeneityRegime {
    RegimeKind kind = RegimeKind::conflicting;
    double conflict_rate = 0.5;
    std::size_t regions = 4;
    double margin = 0.25;

    void validate() const;

    friend bool operator==(const HeterogeneityRegime&, const HeterogeneityRegime&) = default;
};

/// Deterministic generation: identical arguments give identical datasets.
std::vector<TaskSpec> synth_generate(const HeterogeneityRegime& regime, std::size_t num_tasks,
                                     std::size_t examples_per_task, std::size_t input_dim,
                                     std::size_t num_classes, std::uint64_t seed);

/// Probability that two distinct tasks get different class shifts inside one
/// contested region (balanced round-robin assignment of C shifts to T tasks).
double contested_disagreement(std::size_t num_tasks, std::size_t num_classes) noexcept;

/// JSON-lines reader: one {"task_id", "features", "label"} object per line.
/// Records are grouped by task id in order of first appearance; each task's
/// last eval_count(n) records form its eval split. Pass num_classes = 0 to
/// infer it as max label + 1. Errors name the offending line.
std::vector<TaskSpec> load_tasks(const std::filesystem::path& path, std::size_t num_classes = 0);

/// Writes records task by task in example order. Floats are written with
/// enough digits to read back bit-identically.
void save_tasks(const std::filesystem::path& path, std::span<const TaskSpec> tasks);

void to_json(nlohmann::json& j, const HeterogeneityRegime& regime);
void from_json(const nlohmann::json& j, HeterogeneityRegime& regime);

}  // namespace siftmasks
