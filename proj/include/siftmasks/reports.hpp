#pragma once

#include <cstddef>
#include <ostream>
#include <string>

#include "json.hpp"
#include "siftmasks/engine.hpp"

namespace siftmasks {

/// Flat CSV: method,event_index,task_id,metric,value. Aggregate rows leave
/// task_id empty.
inline constexpr const char* kCsvHeader = "method,event_index,task_id,metric,value";

/// Per-task held-in and held-out accuracy plus aggregates and the zeroshot
/// accuracy of M0. event_index is the number of deletions processed so far.
void write_eval_csv(std::ostream& out, const SystemState& system);

/// One row per ledger event (task_finetunes, finetune_steps), then the
/// storage words of the current state.
void write_ledger_csv(std::ostream& out, const SystemState& system);

/// Cumulative task-finetunes for deleting all tasks one by one, per method.
void write_projection_csv(std::ostream& out, std::size_t num_tasks, int steps_per_finetune);

nlohmann::json to_json(const ExactnessReport& report);
nlohmann::json to_json(const StorageReport& report);

/// Ledger, storage and (optionally) accuracy summary of a system.
nlohmann::json summary_json(const SystemState& system, bool with_accuracy);

/// Fig-7 style totals for unlearning all T tasks.
nlohmann::json projection_json(std::size_t num_tasks, int steps_per_finetune);

std::string format_value(double v);

}  // namespace siftmasks
