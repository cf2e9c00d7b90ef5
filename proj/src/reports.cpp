#include "siftmasks/reports.hpp"

#include <cstdio>

namespace siftmasks {

namespace {

constexpr MethodTag kAllMethods[] = {MethodTag::sift_masks, MethodTag::ft_merge, MethodTag::tall_masks,
                                     MethodTag::emr,        MethodTag::ties,     MethodTag::central};

void row(std::ostream& out, MethodTag method, std::size_t event, const std::string& task, const char* metric,
         const std::string& value) {
    out << to_string(method) << ',' << event << ',' << task << ',' << metric << ',' << value << '\n';
}

}  // namespace

std::string format_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void write_eval_csv(std::ostream& out, const SystemState& system) {
    const MethodTag method = system.method();
    const std::size_t event = system.unlearned.size();
    out << kCsvHeader << '\n';
    for (EvalMode mode : {EvalMode::held_in, EvalMode::held_out}) {
        const EvalReport report = evaluate(system, mode);
        const std::string metric = std::string(to_string(mode)) + "_accuracy";
        for (const auto& t : report.per_task) {
            row(out, method, event, std::to_string(t.task), metric.c_str(), format_value(t.accuracy));
        }
        const std::string aggregate = std::string(to_string(mode)) + "_aggregate";
        row(out, method, event, "", aggregate.c_str(), format_value(report.aggregate));
    }
    row(out, method, event, "", "zeroshot_accuracy", format_value(zeroshot_accuracy(system)));
}

void write_ledger_csv(std::ostream& out, const SystemState& system) {
    const MethodTag method = system.method();
    out << kCsvHeader << '\n';
    std::size_t deletions = 0;
    std::int64_t cumulative = 0;
    for (const auto& e : system.ledger.events) {
        deletions += e.phase == Phase::unlearn ? 1 : 0;
        cumulative += e.task_finetunes;
        const std::string task = e.task < 0 ? std::string() : std::to_string(e.task);
        const std::string phase(to_string(e.phase));
        row(out, method, deletions, task, (phase + "_task_finetunes").c_str(), std::to_string(e.task_finetunes));
        row(out, method, deletions, task, (phase + "_finetune_steps").c_str(), std::to_string(e.finetune_steps));
        row(out, method, deletions, task, "cumulative_task_finetunes", std::to_string(cumulative));
    }
    const StorageReport s = storage(system);
    row(out, method, deletions, "", "storage_words", std::to_string(s.words()));
}

void write_projection_csv(std::ostream& out, std::size_t num_tasks, int steps_per_finetune) {
    out << kCsvHeader << '\n';
    for (MethodTag method : kAllMethods) {
        const CostProjection p = project_total_cost(num_tasks, method, steps_per_finetune);
        for (std::size_t i = 0; i < p.cumulative.size(); ++i) {
            row(out, method, i + 1, "", "cumulative_task_finetunes", std::to_string(p.cumulative[i]));
        }
    }
}

nlohmann::json to_json(const ExactnessReport& r) {
    return nlohmann::json{{"task_id", r.task},
                          {"replayed", r.replayed},
                          {"replay_matches", r.replay_matches},
                          {"state_checked", r.state_checked},
                          {"state_matches_oracle", r.state_matches_oracle},
                          {"exact", r.exact()},
                          {"task_finetunes", r.task_finetunes},
                          {"finetune_steps", r.finetune_steps},
                          {"mismatched", r.mismatched}};
}

nlohmann::json to_json(const StorageReport& s) {
    return nlohmann::json{{"model_words", s.model_words}, {"mask_words", s.mask_words}, {"words", s.words()}};
}

nlohmann::json summary_json(const SystemState& system, bool with_accuracy) {
    const CostLedger& ledger = system.ledger;
    nlohmann::json j{
        {"method", std::string(to_string(system.method()))},
        {"param_count", system.config.model.param_count()},
        {"tasks", system.tasks.size()},
        {"retained", system.retained().size()},
        {"unlearned", system.unlearned},
        {"groups", system.groups.size()},
        {"storage", to_json(storage(system))},
        {"ledger",
         {{"build",
           {{"task_finetunes", ledger.task_finetunes(Phase::build)},
            {"finetune_steps", ledger.finetune_steps(Phase::build)}}},
          {"unlearn",
           {{"task_finetunes", ledger.task_finetunes(Phase::unlearn)},
            {"finetune_steps", ledger.finetune_steps(Phase::unlearn)}}},
          {"total", {{"task_finetunes", ledger.task_finetunes()}, {"finetune_steps", ledger.finetune_steps()}}}}},
    };
    if (with_accuracy) {
        j["accuracy"] = {{"held_in", evaluate(system, EvalMode::held_in).aggregate},
                         {"held_out", evaluate(system, EvalMode::held_out).aggregate},
                         {"zeroshot", zeroshot_accuracy(system)}};
    }
    return j;
}

nlohmann::json projection_json(std::size_t num_tasks, int steps_per_finetune) {
    nlohmann::json methods = nlohmann::json::object();
    for (MethodTag method : kAllMethods) {
        const CostProjection p = project_total_cost(num_tasks, method, steps_per_finetune);
        methods[std::string(to_string(method))] = {
            {"total_task_finetunes", p.total_finetunes},
            {"total_finetune_steps", p.total_steps},
            {"first_deletion_task_finetunes", p.per_deletion.front()},
            {"first_deletion_finetune_steps", p.per_deletion.front() * steps_per_finetune},
        };
    }
    const auto central = project_total_cost(num_tasks, MethodTag::central, steps_per_finetune).total_finetunes;
    const auto merged = project_total_cost(num_tasks, MethodTag::sift_masks, steps_per_finetune).total_finetunes;
    return nlohmann::json{{"tasks", num_tasks},
                          {"steps_per_finetune", steps_per_finetune},
                          {"methods", methods},
                          {"central_over_merge_ratio",
                           merged == 0 ? 0.0 : static_cast<double>(central) / static_cast<double>(merged)}};
}

}  // namespace siftmasks
