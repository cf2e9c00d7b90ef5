#include <algorithm>
#include <vector>

#include "doctest.h"
#include "siftmasks/engine.hpp"
#include "siftmasks/errors.hpp"
#include "siftmasks/prng.hpp"

using namespace siftmasks;

namespace {

EngineConfig small_config(MethodTag method, int steps = 5) {
    EngineConfig cfg;
    cfg.method.tag = method;
    cfg.method.density_grid = {0.3, 0.9};
    cfg.method.alpha_grid = {1.0, 1.4};
    cfg.model = ModelSpec{ModelKind::logistic, 10, 0, 3};
    cfg.train.steps = steps;
    cfg.train.batch_size = 16;
    cfg.train.seed = 77;
    cfg.base_seed = 5;
    cfg.sign_seed = 6;
    return cfg;
}

std::vector<TaskSpec> small_tasks(std::size_t T, std::uint64_t seed = 1, std::size_t n = 30) {
    HeterogeneityRegime r;
    r.conflict_rate = 0.3;
    return synth_generate(r, T, n, 10, 3, seed);
}

// Fresh build on the retained subset, ids preserved.
SystemState fresh(const SystemState& sys) {
    std::vector<TaskSpec> kept;
    for (const auto& t : sys.tasks) {
        if (sys.is_retained(t.id)) kept.push_back(t);
    }
    return build(kept, sys.config);
}

}  // namespace

TEST_CASE("build ledger counts finetunes and steps") {
    SystemState sys = build(small_tasks(10), small_config(MethodTag::sift_masks, 20));
    CHECK(sys.ledger.task_finetunes() == 10);
    CHECK(sys.ledger.finetune_steps() == 200);
    CHECK(sys.ledger.finetune_steps(Phase::unlearn) == 0);

    SystemState central = build(small_tasks(4), small_config(MethodTag::central, 20));
    CHECK(central.ledger.task_finetunes() == 4);
    CHECK(central.ledger.finetune_steps() == 80);
    CHECK_THROWS_AS(build({}, small_config(MethodTag::sift_masks)), ConfigError);
}

TEST_CASE("storage words") {
    CHECK(storage_words(MethodTag::sift_masks, 1000, 64).words() == 3048);
    CHECK(storage_words(MethodTag::sift_masks, 1024, 64).words() == 1024 * (1 + 64 / 32));
    CHECK(storage_words(MethodTag::tall_masks, 1000, 64).words() == 3048);
    CHECK(storage_words(MethodTag::emr, 1000, 64).words() == 3048);
    for (MethodTag m : {MethodTag::ft_merge, MethodTag::ties, MethodTag::central}) {
        CHECK(storage_words(m, 1000, 64).words() == 1000);
    }

    SystemState sys = build(small_tasks(5), small_config(MethodTag::sift_masks));
    std::int64_t last = storage(sys).words();
    for (TaskId id : {3, 0, 4}) {
        unlearn(sys, id);
        CHECK(storage(sys).words() <= last);
        last = storage(sys).words();
    }
}

TEST_CASE("unlearn costs per method") {
    CHECK(unlearn_cost(MethodTag::sift_masks, 100) == 1);
    CHECK(unlearn_cost(MethodTag::ft_merge, 100) == 1);
    CHECK(unlearn_cost(MethodTag::tall_masks, 100) == 99);
    CHECK(unlearn_cost(MethodTag::emr, 100) == 99);
    CHECK(unlearn_cost(MethodTag::ties, 100) == 99);
    CHECK(unlearn_cost(MethodTag::central, 100) == 99);
    CHECK(unlearn_cost(MethodTag::sift_masks, 1) == 0);
    CHECK(project_total_cost(500, MethodTag::tall_masks).per_deletion.front() * 20 == 9980);

    for (MethodTag m : {MethodTag::sift_masks, MethodTag::tall_masks, MethodTag::central}) {
        SystemState sys = build(small_tasks(5), small_config(m));
        const ExactnessReport r = unlearn(sys, 2);
        CHECK(r.task_finetunes == unlearn_cost(m, 5));
        CHECK(sys.ledger.task_finetunes(Phase::unlearn) == unlearn_cost(m, 5));
        CHECK(sys.ledger.finetune_steps(Phase::unlearn) == unlearn_cost(m, 5) * 5);
    }
}

TEST_CASE("projection closed forms") {
    const auto central = project_total_cost(500, MethodTag::central);
    const auto merged = project_total_cost(500, MethodTag::sift_masks);
    CHECK(central.total_finetunes == 124750);
    CHECK(merged.total_finetunes == 499);
    const double ratio = double(central.total_finetunes) / double(merged.total_finetunes);
    CHECK(ratio >= 249.0);
    CHECK(ratio <= 251.0);
    CHECK(project_total_cost(500, MethodTag::ft_merge).total_finetunes == 499);
    CHECK(project_total_cost(1, MethodTag::central).total_finetunes == 0);
    CHECK_THROWS_AS(project_total_cost(0, MethodTag::central), ConfigError);

    std::int64_t sum = 0;
    for (std::int64_t i = 1; i <= 499; ++i) sum += 500 - i;
    CHECK(central.cumulative.back() == sum);
}

TEST_CASE("ledger conservation: deleting everything matches the projection") {
    for (MethodTag m : {MethodTag::sift_masks, MethodTag::ft_merge, MethodTag::ties, MethodTag::central}) {
        SystemState sys = build(small_tasks(4), small_config(m, 3));
        for (TaskId id : {1, 3, 0, 2}) unlearn(sys, id);
        CHECK(sys.ledger.task_finetunes(Phase::unlearn) == project_total_cost(4, m).total_finetunes);
    }
}

TEST_CASE("exactness after deletions for every merge method") {
    for (MethodTag m : {MethodTag::sift_masks, MethodTag::ft_merge, MethodTag::tall_masks, MethodTag::emr,
                        MethodTag::ties}) {
        CAPTURE(to_string(m));
        SystemState sys = build(small_tasks(6), small_config(m));
        const ExactnessReport clean = verify_exactness(sys);
        CHECK(clean.replay_matches);
        CHECK(clean.state_matches_oracle);
        for (TaskId id : {4, 1, 5}) {
            const ExactnessReport r = unlearn(sys, id);
            CHECK(r.exact());
        }
        CHECK(verify_exactness(sys).exact());
        CHECK(sys.groups[0].merged == fresh(sys).groups[0].merged);
    }
}

TEST_CASE("deletion order does not change the final state or the ledger total") {
    const auto tasks = small_tasks(8, 3);
    const EngineConfig cfg = small_config(MethodTag::sift_masks);
    SystemState a = build(tasks, cfg);
    SystemState b = build(tasks, cfg);
    for (TaskId id : {0, 5, 2}) unlearn(a, id);
    for (TaskId id : {2, 0, 5}) unlearn(b, id);
    CHECK(a.groups == b.groups);
    CHECK(a.ledger.task_finetunes() == b.ledger.task_finetunes());
    CHECK(a.ledger.finetune_steps() == b.ledger.finetune_steps());
}

TEST_CASE("corrupting the accumulator is detected") {
    SystemState sys = build(small_tasks(4), small_config(MethodTag::sift_masks));
    std::vector<std::int64_t> raw(sys.groups[0].merged.accumulator.view().begin(),
                                  sys.groups[0].merged.accumulator.view().end());
    raw[7] += 1;
    sys.groups[0].merged.accumulator = FxpVector(raw, sys.config.scale_bits);
    const ExactnessReport r = verify_exactness(sys);
    CHECK_FALSE(r.state_matches_oracle);
    CHECK_FALSE(r.exact());
}

TEST_CASE("replay mismatch is a hard error") {
    SystemState sys = build(small_tasks(4), small_config(MethodTag::sift_masks));
    sys.groups[0].merged.digests[1] ^= 1;
    CHECK_THROWS_AS(unlearn(sys, 1), ExactnessError);
    CHECK_FALSE(verify_exactness(sys).replay_matches);
}

TEST_CASE("unlearn rejects unknown and repeated ids") {
    SystemState sys = build(small_tasks(3), small_config(MethodTag::sift_masks));
    CHECK_THROWS_AS(unlearn(sys, 42), DataError);
    unlearn(sys, 1);
    CHECK_THROWS_AS(unlearn(sys, 1), DataError);
}

TEST_CASE("task-vector variant of verify_exactness") {
    const auto tasks = small_tasks(3);
    const EngineConfig cfg = small_config(MethodTag::ft_merge);
    const SystemState sys = build(tasks, cfg);
    std::vector<TaskVector> taus;
    for (const auto& t : tasks) taus.push_back(ft_finetune(t, sys.base, cfg.model, cfg.train));
    CHECK(verify_exactness(sys, taus).state_matches_oracle);
    taus.pop_back();
    CHECK_FALSE(verify_exactness(sys, taus).state_matches_oracle);
}

TEST_CASE("clustering") {
    const auto tasks = small_tasks(10);
    const auto assign = cluster_random(tasks, 3, 9);
    std::vector<std::size_t> sizes(3, 0);
    for (const auto& [id, c] : assign) sizes[c]++;
    CHECK(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()) <= 1);
    CHECK(cluster_random(tasks, 3, 9) == assign);
    CHECK_THROWS_AS(cluster_random(tasks, 0, 9), ConfigError);
    CHECK_THROWS_AS(cluster_random(tasks, 11, 9), ConfigError);

    // One cluster is the unclustered system.
    const EngineConfig cfg = small_config(MethodTag::sift_masks);
    const SystemState one = build_clustered(tasks, cfg, 1, 9);
    const SystemState plain = build(tasks, cfg);
    CHECK(one.groups == plain.groups);

    // Singleton clusters: central on one task is that task's local finetune.
    EngineConfig central = small_config(MethodTag::central);
    const auto few = small_tasks(3);
    const SystemState singles = build_clustered(few, central, 3, 2);
    for (const auto& t : few) {
        const TaskVector tau = ft_finetune(t, singles.base, central.model, central.train);
        ParamVector local(singles.base.size());
        for (std::size_t i = 0; i < local.size(); ++i) local[i] = singles.base[i] + tau.delta[i];
        CHECK(served_model(singles, t.id).bit_equal(local));
    }
}

TEST_CASE("clustered central: T=100, S=4 first deletion costs 24") {
    std::vector<TaskSpec> tasks = small_tasks(100, 4, 10);
    SystemState sys = build_clustered(tasks, small_config(MethodTag::central, 1), 4, 3);
    const ExactnessReport r = unlearn(sys, 17);
    CHECK(r.task_finetunes == 24);
    // Other clusters are untouched.
    const std::size_t g = sys.assignment.at(17);
    SystemState again = build_clustered(tasks, small_config(MethodTag::central, 1), 4, 3);
    for (std::size_t i = 0; i < sys.groups.size(); ++i) {
        if (i != g) CHECK(sys.groups[i] == again.groups[i]);
    }
}

TEST_CASE("evaluation modes") {
    SystemState sys = build(small_tasks(4), small_config(MethodTag::sift_masks));
    const EvalReport in0 = evaluate(sys, EvalMode::held_in);
    const EvalReport out0 = evaluate(sys, EvalMode::held_out);
    CHECK(in0.aggregate == out0.aggregate);
    CHECK(in0.per_task.size() == 4);

    unlearn(sys, 0);
    CHECK(evaluate(sys, EvalMode::held_in).per_task.size() == 3);
    CHECK(evaluate(sys, EvalMode::held_out).per_task.size() == 4);

    for (TaskId id : {1, 2, 3}) unlearn(sys, id);
    CHECK(sys.groups[0].merged.accumulator.is_zero());
    CHECK(evaluate(sys, EvalMode::held_out).aggregate == zeroshot_accuracy(sys));
    CHECK(evaluate(sys, EvalMode::held_in).per_task.empty());
}

TEST_CASE("central serves one model everywhere and falls back to M0") {
    SystemState sys = build(small_tasks(3), small_config(MethodTag::central));
    CHECK(served_model(sys, 0) == served_model(sys, 2));
    for (TaskId id : {0, 1, 2}) unlearn(sys, id);
    CHECK(evaluate(sys, EvalMode::held_out).aggregate == zeroshot_accuracy(sys));
}

TEST_CASE("task-vector cache gives the same state and the same ledger") {
    const auto tasks = small_tasks(5);
    EngineConfig cached = small_config(MethodTag::tall_masks);
    cached.method.cache_task_vectors = true;
    SystemState a = build(tasks, cached);
    SystemState b = build(tasks, small_config(MethodTag::tall_masks));
    unlearn(a, 3);
    unlearn(b, 3);
    CHECK(a.groups == b.groups);
    CHECK(a.ledger == b.ledger);
}

TEST_CASE("threads do not change the result") {
    const auto tasks = small_tasks(6);
    EngineConfig cfg = small_config(MethodTag::sift_masks);
    const SystemState one = build(tasks, cfg);
    cfg.threads = 4;
    const SystemState four = build(tasks, cfg);
    CHECK(one.groups == four.groups);
}

TEST_CASE("parallel_for reports the lowest failing index") {
    std::vector<int> hit(20, 0);
    parallel_for(20, 4, [&](std::size_t i) { hit[i] = 1; });
    CHECK(std::count(hit.begin(), hit.end(), 1) == 20);
    try {
        parallel_for(20, 4, [](std::size_t i) {
            if (i == 5 || i == 13) throw DataError("fail " + std::to_string(i));
        });
        FAIL("expected an error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()) == "fail 5");
    }
}
