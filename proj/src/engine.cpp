#include "siftmasks/engine.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <set>
#include <thread>

#include "siftmasks/errors.hpp"
#include "siftmasks/prng.hpp"

namespace siftmasks {

namespace {

std::vector<TaskId> without(const std::vector<TaskId>& ids, TaskId drop) {
    std::vector<TaskId> out;
    out.reserve(ids.size());
    for (TaskId id : ids) {
        if (id != drop) {
            out.push_back(id);
        }
    }
    return out;
}

TaskVector train_task(const SystemState& system, TaskId id) {
    const TaskSpec& task = system.task(id);
    const EngineConfig& cfg = system.config;
    if (uses_sift(cfg.method.tag)) {
        return sift_finetune(task, system.base, cfg.model, system.signs, cfg.train).tau;
    }
    return ft_finetune(task, system.base, cfg.model, cfg.train);
}

std::vector<TaskVector> train_tasks(const SystemState& system, const std::vector<TaskId>& ids) {
    std::vector<TaskVector> out(ids.size());
    parallel_for(ids.size(), system.config.threads, [&](std::size_t i) { out[i] = train_task(system, ids[i]); });
    return out;
}

int central_step_budget(const EngineConfig& cfg, std::size_t tasks) {
    if (cfg.central_steps > 0) {
        return cfg.central_steps;
    }
    return cfg.train.steps * static_cast<int>(tasks);
}

ParamVector train_central(const SystemState& system, const std::vector<TaskId>& ids) {
    if (ids.empty()) {
        return system.base;
    }
    const EngineConfig& cfg = system.config;
    std::vector<const Example*> pooled;
    std::uint64_t seed = cfg.train.seed;
    for (TaskId id : ids) {
        const auto part = system.task(id).train_examples();
        pooled.insert(pooled.end(), part.begin(), part.end());
        seed = derive_seed(seed, static_cast<std::uint64_t>(id));
    }
    TrainConfig tc = cfg.train;
    tc.steps = central_step_budget(cfg, ids.size());
    const ParamVector tau = finetune_delta(pooled, system.base, cfg.model, tc, seed);
    ParamVector out(tau.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = system.base[i] + tau[i];
    }
    return out;
}

// Builds the merged state of one group from its retained task vectors.
MergedState assemble(const SystemState& system, const std::vector<TaskVector>& vectors) {
    const EngineConfig& cfg = system.config;
    const std::size_t m = cfg.model.param_count();
    MergedState state = merge(vectors, m, cfg.scale_bits);
    state.method = cfg.method.tag;
    state.base_seed = cfg.base_seed;
    state.sign_seed = cfg.sign_seed;
    if (vectors.empty()) {
        return state;
    }
    switch (cfg.method.tag) {
        case MethodTag::sift_masks:
            for (const auto& tv : vectors) {
                state.masks.emplace(tv.source_task, sign_mask(tv.delta, system.signs));
            }
            break;
        case MethodTag::tall_masks: {
            std::vector<TallChoice> choices(vectors.size());
            parallel_for(vectors.size(), cfg.threads, [&](std::size_t i) {
                const auto train = system.task(vectors[i].source_task).train_examples();
                choices[i] = tall_tune(quantize(vectors[i].delta, cfg.scale_bits), state, system.base, cfg.model,
                                       cfg.method.density_grid, cfg.method.alpha_grid, train);
            });
            for (std::size_t i = 0; i < vectors.size(); ++i) {
                const TaskId id = vectors[i].source_task;
                state.masks.emplace(id, std::move(choices[i].mask));
                state.lambdas[id] = choices[i].lambda;
                state.scales[id] = choices[i].alpha;
            }
            break;
        }
        case MethodTag::emr: {
            EmrResult emr = emr_build(vectors);
            state.unified = std::move(emr.unified);
            state.masks = std::move(emr.masks);
            state.scales = std::move(emr.scales);
            break;
        }
        case MethodTag::ties:
            state.ties_delta = ties_merge(vectors, cfg.method.ties_density);
            break;
        case MethodTag::ft_merge:
        case MethodTag::central:
            break;
    }
    return state;
}

std::vector<TaskVector> sorted_by_id(std::vector<TaskVector> vectors) {
    std::sort(vectors.begin(), vectors.end(),
              [](const TaskVector& a, const TaskVector& b) { return a.source_task < b.source_task; });
    return vectors;
}

}  // namespace

void EngineConfig::validate() const {
    method.validate();
    model.validate();
    train.validate();
    if (threads < 1) {
        throw ConfigError("threads must be >= 1");
    }
    if (central_steps < 0) {
        throw ConfigError("central_steps must be >= 0");
    }
    if (scale_bits < 1 || scale_bits > 60) {
        throw ConfigError("scale_bits must lie in [1, 60]");
    }
}

std::string_view to_string(Phase phase) noexcept {
    return phase == Phase::build ? "build" : "unlearn";
}

void CostLedger::charge(Phase phase, TaskId task, std::int64_t finetunes, std::int64_t steps) {
    events.push_back(LedgerEvent{phase, task, finetunes, steps});
}

std::int64_t CostLedger::task_finetunes() const noexcept {
    std::int64_t n = 0;
    for (const auto& e : events) {
        n += e.task_finetunes;
    }
    return n;
}

std::int64_t CostLedger::finetune_steps() const noexcept {
    std::int64_t n = 0;
    for (const auto& e : events) {
        n += e.finetune_steps;
    }
    return n;
}

std::int64_t CostLedger::task_finetunes(Phase phase) const noexcept {
    std::int64_t n = 0;
    for (const auto& e : events) {
        n += e.phase == phase ? e.task_finetunes : 0;
    }
    return n;
}

std::int64_t CostLedger::finetune_steps(Phase phase) const noexcept {
    std::int64_t n = 0;
    for (const auto& e : events) {
        n += e.phase == phase ? e.finetune_steps : 0;
    }
    return n;
}

StorageReport storage_words(MethodTag method, std::size_t param_count, std::size_t tasks, std::size_t models) {
    StorageReport r;
    r.model_words = static_cast<std::int64_t>(models * param_count);
    if (stores_masks(method)) {
        r.mask_words = static_cast<std::int64_t>(tasks * BitMask::words_for(param_count));
    }
    return r;
}

const TaskSpec& SystemState::task(TaskId id) const {
    auto it = std::lower_bound(tasks.begin(), tasks.end(), id,
                               [](const TaskSpec& t, TaskId v) { return t.id < v; });
    if (it == tasks.end() || it->id != id) {
        throw DataError("unknown task id " + std::to_string(id));
    }
    return *it;
}

bool SystemState::is_retained(TaskId id) const {
    auto it = assignment.find(id);
    if (it == assignment.end()) {
        return false;
    }
    const auto& ids = groups[it->second].retained(method());
    return std::binary_search(ids.begin(), ids.end(), id);
}

std::vector<TaskId> SystemState::retained() const {
    std::vector<TaskId> out;
    for (const auto& g : groups) {
        const auto& ids = g.retained(method());
        out.insert(out.end(), ids.begin(), ids.end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::map<TaskId, std::size_t> cluster_random(std::span<const TaskSpec> tasks, std::size_t clusters,
                                             std::uint64_t seed) {
    if (clusters < 1 || clusters > tasks.size()) {
        throw ConfigError("cluster count must lie in [1, " + std::to_string(tasks.size()) + "], got " +
                          std::to_string(clusters));
    }
    std::vector<TaskId> ids;
    ids.reserve(tasks.size());
    for (const auto& t : tasks) {
        ids.push_back(t.id);
    }
    std::sort(ids.begin(), ids.end());
    PrngStream rng(seed);
    for (std::size_t i = ids.size(); i > 1; --i) {
        std::swap(ids[i - 1], ids[rng.below(i)]);
    }
    std::map<TaskId, std::size_t> out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out[ids[i]] = i % clusters;
    }
    return out;
}

Group rebuild_group(const SystemState& system, std::size_t group_index) {
    const Group& current = system.groups.at(group_index);
    const MethodTag method = system.method();
    Group out;
    out.members = current.members;
    if (method == MethodTag::central) {
        out.central_retained = current.central_retained;
        out.central = train_central(system, out.central_retained);
        out.merged = assemble(system, {});
        return out;
    }
    out.merged = assemble(system, train_tasks(system, current.merged.retained));
    return out;
}

SystemState build(std::vector<TaskSpec> tasks, const EngineConfig& cfg,
                  std::optional<std::map<TaskId, std::size_t>> assignment) {
    if (tasks.empty()) {
        throw ConfigError("cannot build a system from an empty task list");
    }
    cfg.validate();
    std::sort(tasks.begin(), tasks.end(), [](const TaskSpec& a, const TaskSpec& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (i > 0 && tasks[i].id == tasks[i - 1].id) {
            throw DataError("duplicate task id " + std::to_string(tasks[i].id));
        }
        tasks[i].validate(cfg.model.num_classes);
        if (tasks[i].input_dim() != cfg.model.input_dim) {
            throw DataError("task " + std::to_string(tasks[i].id) + " has feature dimension " +
                            std::to_string(tasks[i].input_dim()) + ", model expects " +
                            std::to_string(cfg.model.input_dim));
        }
    }

    SystemState system;
    system.config = cfg;
    system.tasks = std::move(tasks);
    system.base = init_params(cfg.model, cfg.base_seed);
    if (uses_sift(cfg.method.tag)) {
        system.signs = gen_sign_vector(cfg.sign_seed, cfg.model.param_count());
    }

    std::size_t group_count = 1;
    if (assignment) {
        for (const auto& t : system.tasks) {
            auto it = assignment->find(t.id);
            if (it == assignment->end()) {
                throw ConfigError("cluster assignment misses task " + std::to_string(t.id));
            }
            group_count = std::max(group_count, it->second + 1);
        }
        system.assignment = *assignment;
        for (auto it = system.assignment.begin(); it != system.assignment.end();) {
            bool known = std::any_of(system.tasks.begin(), system.tasks.end(),
                                     [&](const TaskSpec& t) { return t.id == it->first; });
            it = known ? std::next(it) : system.assignment.erase(it);
        }
    } else {
        for (const auto& t : system.tasks) {
            system.assignment[t.id] = 0;
        }
    }
    system.groups.resize(group_count);
    for (const auto& t : system.tasks) {
        system.groups[system.assignment[t.id]].members.push_back(t.id);
    }

    const std::int64_t steps = cfg.train.steps;
    if (cfg.method.tag == MethodTag::central) {
        for (auto& g : system.groups) {
            g.central_retained = g.members;
            g.central = train_central(system, g.members);
            g.merged = assemble(system, {});
            system.ledger.charge(Phase::build, -1, static_cast<std::int64_t>(g.members.size()),
                                 g.members.empty() ? 0 : central_step_budget(cfg, g.members.size()));
        }
        return system;
    }

    std::vector<TaskId> all;
    for (const auto& t : system.tasks) {
        all.push_back(t.id);
    }
    std::vector<TaskVector> vectors = train_tasks(system, all);
    std::map<TaskId, std::size_t> index;
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        index[vectors[i].source_task] = i;
    }
    for (auto& g : system.groups) {
        std::vector<TaskVector> own;
        for (TaskId id : g.members) {
            own.push_back(vectors[index[id]]);
        }
        g.merged = assemble(system, own);
        system.ledger.charge(Phase::build, -1, static_cast<std::int64_t>(g.members.size()),
                             static_cast<std::int64_t>(g.members.size()) * steps);
    }
    if (cfg.method.cache_task_vectors) {
        for (auto& tv : vectors) {
            system.cache.emplace(tv.source_task, std::move(tv));
        }
    }
    return system;
}

SystemState build_clustered(std::vector<TaskSpec> tasks, const EngineConfig& cfg, std::size_t clusters,
                            std::uint64_t cluster_seed) {
    auto assignment = cluster_random(tasks, clusters, cluster_seed);
    return build(std::move(tasks), cfg, std::move(assignment));
}

std::int64_t unlearn_cost(MethodTag method, std::size_t retained) {
    if (retained == 0) {
        return 0;
    }
    if (method == MethodTag::sift_masks || method == MethodTag::ft_merge) {
        return retained == 1 ? 0 : 1;
    }
    return static_cast<std::int64_t>(retained) - 1;
}

ExactnessReport unlearn(SystemState& system, TaskId id) {
    system.task(id);  // unknown ids raise here
    if (!system.is_retained(id)) {
        throw DataError("task " + std::to_string(id) + " was already unlearned");
    }
    const EngineConfig& cfg = system.config;
    const MethodTag method = system.method();
    const std::size_t gi = system.assignment.at(id);
    Group& group = system.groups[gi];

    ExactnessReport report;
    report.task = id;

    if (method == MethodTag::central) {
        group.central_retained = without(group.central_retained, id);
        group.central = train_central(system, group.central_retained);
        report.replayed = !group.central_retained.empty();
        report.task_finetunes = static_cast<std::int64_t>(group.central_retained.size());
        report.finetune_steps =
            group.central_retained.empty() ? 0 : central_step_budget(cfg, group.central_retained.size());
    } else if (method == MethodTag::sift_masks || method == MethodTag::ft_merge) {
        MergedState& merged = group.merged;
        const std::uint64_t expected = merged.digests.at(id);
        if (merged.retained.size() == 1) {
            // The accumulator is this task's vector alone.
            if (fxp_digest(merged.accumulator) != expected) {
                throw ExactnessError("accumulator of the last retained task " + std::to_string(id) +
                                     " does not match its build-time digest");
            }
            merged = unmerge(merged, id, merged.accumulator);
        } else {
            const TaskVector tau = train_task(system, id);
            const FxpVector q = quantize(tau.delta, merged.accumulator.scale_bits());
            report.replayed = true;
            bool same = fxp_digest(q) == expected;
            if (same && method == MethodTag::sift_masks) {
                same = sign_mask(tau.delta, system.signs) == merged.masks.at(id);
            }
            if (!same) {
                report.replay_matches = false;
                report.mismatched.push_back(id);
                throw ExactnessError("replayed finetune of task " + std::to_string(id) +
                                     " differs from the build-time vector; refusing to unmerge");
            }
            merged = unmerge(merged, id, q);
            report.task_finetunes = 1;
            report.finetune_steps = cfg.train.steps;
        }
    } else {
        const std::vector<TaskId> remaining = without(group.merged.retained, id);
        std::vector<TaskVector> vectors;
        if (cfg.method.cache_task_vectors &&
            std::all_of(remaining.begin(), remaining.end(), [&](TaskId r) { return system.cache.count(r) > 0; })) {
            for (TaskId r : remaining) {
                vectors.push_back(system.cache.at(r));
            }
        } else {
            vectors = train_tasks(system, remaining);
            report.replayed = !remaining.empty();
            for (const auto& tv : vectors) {
                const FxpVector q = quantize(tv.delta, cfg.scale_bits);
                if (fxp_digest(q) != group.merged.digests.at(tv.source_task)) {
                    report.mismatched.push_back(tv.source_task);
                }
            }
            if (!report.mismatched.empty()) {
                report.replay_matches = false;
                throw ExactnessError("retraining task " + std::to_string(report.mismatched.front()) +
                                     " did not reproduce its build-time vector");
            }
        }
        group.merged = assemble(system, sorted_by_id(std::move(vectors)));
        report.task_finetunes = static_cast<std::int64_t>(remaining.size());
        report.finetune_steps = report.task_finetunes * cfg.train.steps;
    }

    system.unlearned.push_back(id);
    system.cache.erase(id);
    system.ledger.charge(Phase::unlearn, id, report.task_finetunes, report.finetune_steps);

    if (cfg.audit_unlearn) {
        report.state_checked = true;
        report.state_matches_oracle = rebuild_group(system, gi) == group;
    }
    return report;
}

ExactnessReport verify_exactness(const SystemState& system) {
    ExactnessReport report;
    report.state_checked = true;
    for (std::size_t gi = 0; gi < system.groups.size(); ++gi) {
        const Group& group = system.groups[gi];
        const Group oracle = rebuild_group(system, gi);
        report.replayed = report.replayed || !group.retained(system.method()).empty();
        if (system.method() != MethodTag::central) {
            for (const auto& [id, digest] : group.merged.digests) {
                auto it = oracle.merged.digests.find(id);
                if (it == oracle.merged.digests.end() || it->second != digest) {
                    report.replay_matches = false;
                    report.mismatched.push_back(id);
                }
            }
        }
        if (!(oracle == group)) {
            report.state_matches_oracle = false;
        }
    }
    return report;
}

ExactnessReport verify_exactness(const SystemState& system, std::span<const TaskVector> retained_vectors) {
    if (system.method() == MethodTag::central) {
        throw ConfigError("verification from task vectors needs a merge-family system");
    }
    ExactnessReport report;
    report.state_checked = true;
    std::map<std::size_t, std::vector<TaskVector>> by_group;
    for (const auto& tv : retained_vectors) {
        auto it = system.assignment.find(tv.source_task);
        if (it == system.assignment.end()) {
            throw DataError("unknown task id " + std::to_string(tv.source_task));
        }
        by_group[it->second].push_back(tv);
    }
    for (std::size_t gi = 0; gi < system.groups.size(); ++gi) {
        const MergedState& stored = system.groups[gi].merged;
        const MergedState fresh = merge(by_group[gi], stored.size(), stored.accumulator.scale_bits());
        for (const auto& [id, digest] : fresh.digests) {
            auto it = stored.digests.find(id);
            if (it == stored.digests.end() || it->second != digest) {
                report.replay_matches = false;
                report.mismatched.push_back(id);
            }
        }
        if (fresh.accumulator != stored.accumulator || fresh.retained != stored.retained) {
            report.state_matches_oracle = false;
        }
    }
    return report;
}

std::string_view to_string(EvalMode mode) noexcept {
    return mode == EvalMode::held_in ? "held_in" : "held_out";
}

ParamVector served_model(const SystemState& system, TaskId id) {
    if (!system.is_retained(id)) {
        throw DataError("task " + std::to_string(id) + " is not retained");
    }
    const Group& group = system.groups[system.assignment.at(id)];
    if (system.method() == MethodTag::central) {
        return group.central;
    }
    return localize(group.merged, id, system.base, system.config.method.overlap_normalize);
}

EvalReport evaluate(const SystemState& system, EvalMode mode) {
    EvalReport report;
    report.mode = mode;
    const ModelSpec& spec = system.config.model;
    std::map<std::size_t, ParamVector> unmasked;
    double total = 0.0;
    for (const auto& task : system.tasks) {
        const bool retained = system.is_retained(task.id);
        if (!retained && mode == EvalMode::held_in) {
            continue;
        }
        const auto examples = task.eval_examples();
        double acc = 0.0;
        if (retained) {
            acc = accuracy(served_model(system, task.id).view(), spec, examples);
        } else {
            const std::size_t gi = system.assignment.at(task.id);
            auto it = unmasked.find(gi);
            if (it == unmasked.end()) {
                const Group& g = system.groups[gi];
                ParamVector model = system.method() == MethodTag::central ? g.central
                                                                         : serve_merged(g.merged, system.base);
                it = unmasked.emplace(gi, std::move(model)).first;
            }
            acc = accuracy(it->second.view(), spec, examples);
        }
        report.per_task.push_back(TaskAccuracy{task.id, retained, acc});
        total += acc;
    }
    if (!report.per_task.empty()) {
        report.aggregate = total / static_cast<double>(report.per_task.size());
    }
    return report;
}

double zeroshot_accuracy(const SystemState& system) {
    double total = 0.0;
    for (const auto& task : system.tasks) {
        total += accuracy(system.base.view(), system.config.model, task.eval_examples());
    }
    return system.tasks.empty() ? 0.0 : total / static_cast<double>(system.tasks.size());
}

StorageReport storage(const SystemState& system) {
    return storage_words(system.method(), system.config.model.param_count(), system.retained().size(),
                         system.groups.size());
}

CostProjection project_total_cost(std::size_t num_tasks, MethodTag method, int steps_per_finetune) {
    if (num_tasks < 1) {
        throw ConfigError("cost projection needs at least one task");
    }
    CostProjection out;
    std::int64_t running = 0;
    for (std::size_t retained = num_tasks; retained >= 1; --retained) {
        const std::int64_t cost = unlearn_cost(method, retained);
        running += cost;
        out.per_deletion.push_back(cost);
        out.cumulative.push_back(running);
    }
    out.total_finetunes = running;
    out.total_steps = running * steps_per_finetune;
    return out;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(threads, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex lock;
    std::size_t failed_at = n;
    std::exception_ptr failure;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> guard(lock);
                if (i < failed_at) {
                    failed_at = i;
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back(work);
    }
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

}  // namespace siftmasks
