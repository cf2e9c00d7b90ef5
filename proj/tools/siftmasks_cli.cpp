// siftmasks command-line driver.
//
// Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 exactness violation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "siftmasks/checkpoint.hpp"
#include "siftmasks/config.hpp"
#include "siftmasks/engine.hpp"
#include "siftmasks/errors.hpp"
#include "siftmasks/reports.hpp"

namespace fs = std::filesystem;
using namespace siftmasks;

namespace {

// Flags that mirror RunConfig fields; only the ones given override the config.
struct RunFlags {
    std::string config_path;
    std::optional<std::string> source, data_path, regime, model, method, out;
    std::optional<double> conflict_rate, margin, ties_density, learning_rate;
    std::optional<std::size_t> regions, tasks, examples_per_task, input_dim, num_classes, hidden_dim, batch_size,
        clusters, threads;
    std::optional<int> steps, central_steps;
    std::optional<std::uint64_t> seed;
    std::optional<std::vector<double>> density_grid, alpha_grid;
    std::optional<bool> overlap_normalize, cache_task_vectors;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
    cmd->add_option("--config", f.config_path, "RunConfig JSON file")->check(CLI::ExistingFile);
    cmd->add_option("--out", f.out, "Output directory");
    cmd->add_option("--threads", f.threads, "Parallel task finetunes")->check(CLI::PositiveNumber);
    cmd->add_option("--source", f.source, "Dataset source: synthetic or file");
    cmd->add_option("--data-path", f.data_path, "JSON-lines dataset (source=file)");
    cmd->add_option("--regime", f.regime, "conflicting, distinct or similar");
    cmd->add_option("--conflict-rate", f.conflict_rate, "Pairwise label disagreement on shared inputs");
    cmd->add_option("--regions", f.regions, "Feature regions of the conflicting generator");
    cmd->add_option("--margin", f.margin, "Rejection margin of the generators");
    cmd->add_option("--tasks", f.tasks, "Number of tasks T");
    cmd->add_option("--examples-per-task", f.examples_per_task, "Examples per task");
    cmd->add_option("--input-dim", f.input_dim, "Feature dimension d");
    cmd->add_option("--num-classes", f.num_classes, "Number of classes C");
    cmd->add_option("--model", f.model, "logistic or mlp");
    cmd->add_option("--hidden-dim", f.hidden_dim, "MLP hidden width");
    cmd->add_option("--method", f.method, "sift_masks, ft_merge, tall_masks, emr, ties or central");
    cmd->add_option("--density-grid", f.density_grid, "TALL density grid")->delimiter(',');
    cmd->add_option("--alpha-grid", f.alpha_grid, "TALL rescale grid")->delimiter(',');
    cmd->add_option("--ties-density", f.ties_density, "TIES trim density");
    cmd->add_option("--overlap-normalize", f.overlap_normalize, "SIFT divisor: per-entry mask coverage");
    cmd->add_option("--cache-task-vectors", f.cache_task_vectors, "Reuse task vectors in TALL/EMR/TIES rebuilds");
    cmd->add_option("--steps", f.steps, "Finetuning steps per task");
    cmd->add_option("--batch-size", f.batch_size, "Minibatch size");
    cmd->add_option("--learning-rate", f.learning_rate, "Adam learning rate");
    cmd->add_option("--central-steps", f.central_steps, "Central step budget (0: steps x tasks)");
    cmd->add_option("--seed", f.seed, "Top-level seed");
    cmd->add_option("--clusters", f.clusters, "Random clusters (1: unclustered)");
}

template <class T>
void apply(const std::optional<T>& flag, T& field) {
    if (flag) {
        field = *flag;
    }
}

RunConfig resolve(const RunFlags& f) {
    RunConfig cfg = f.config_path.empty() ? RunConfig{} : load_config(f.config_path);
    apply(f.source, cfg.dataset.source);
    apply(f.data_path, cfg.dataset.path);
    if (f.regime) {
        cfg.dataset.regime.kind = regime_kind_from_string(*f.regime);
    }
    apply(f.conflict_rate, cfg.dataset.regime.conflict_rate);
    apply(f.regions, cfg.dataset.regime.regions);
    apply(f.margin, cfg.dataset.regime.margin);
    apply(f.tasks, cfg.dataset.tasks);
    apply(f.examples_per_task, cfg.dataset.examples_per_task);
    apply(f.input_dim, cfg.dataset.input_dim);
    apply(f.num_classes, cfg.dataset.num_classes);
    if (f.model) {
        cfg.model_kind = model_kind_from_string(*f.model);
    }
    apply(f.hidden_dim, cfg.hidden_dim);
    if (f.method) {
        cfg.method.tag = method_tag_from_string(*f.method);
    }
    apply(f.density_grid, cfg.method.density_grid);
    apply(f.alpha_grid, cfg.method.alpha_grid);
    apply(f.ties_density, cfg.method.ties_density);
    apply(f.overlap_normalize, cfg.method.overlap_normalize);
    apply(f.cache_task_vectors, cfg.method.cache_task_vectors);
    apply(f.steps, cfg.steps);
    apply(f.batch_size, cfg.batch_size);
    apply(f.learning_rate, cfg.learning_rate);
    apply(f.central_steps, cfg.central_steps);
    apply(f.seed, cfg.seed);
    apply(f.clusters, cfg.clusters);
    apply(f.threads, cfg.threads);
    apply(f.out, cfg.out);
    cfg.validate();
    return cfg;
}

fs::path ensure_dir(const std::string& dir) {
    fs::path p = dir.empty() ? fs::path(".") : fs::path(dir);
    fs::create_directories(p);
    return p;
}

template <class Fn>
void write_file(const fs::path& path, Fn&& fn) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    fn(out);
}

struct Loaded {
    Checkpoint ckpt;
    SystemState system;
};

Loaded open_checkpoint(const fs::path& path, std::size_t threads) {
    Checkpoint ckpt = load_checkpoint(path);
    SystemState system = restore_system(ckpt, load_dataset(ckpt.config), threads);
    return {std::move(ckpt), std::move(system)};
}

std::vector<TaskId> read_ids_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open ids file " + path.string());
    }
    std::vector<TaskId> ids;
    std::string token;
    std::size_t line = 0;
    while (std::getline(in, token)) {
        ++line;
        const auto first = token.find_first_not_of(" \t\r");
        if (first == std::string::npos || token[first] == '#') {
            continue;
        }
        try {
            std::size_t used = 0;
            ids.push_back(std::stoll(token.substr(first), &used));
        } catch (const std::exception&) {
            throw DataError(path.string() + ":" + std::to_string(line) + ": not a task id: '" + token + "'");
        }
    }
    return ids;
}

int cmd_gen_data(const RunFlags& flags, const std::string& data_out) {
    const RunConfig cfg = resolve(flags);
    const fs::path dir = ensure_dir(cfg.out);
    const fs::path target = data_out.empty() ? dir / "data.jsonl" : fs::path(data_out);
    const auto tasks = load_dataset(cfg);
    save_tasks(target, tasks);
    save_config(dir / "config.json", cfg);
    std::cout << "wrote " << tasks.size() << " tasks to " << target.string() << '\n';
    return 0;
}

int cmd_train(const RunFlags& flags) {
    const RunConfig cfg = resolve(flags);
    const fs::path dir = ensure_dir(cfg.out);
    const SystemState system = build_system(load_dataset(cfg), cfg);
    save_checkpoint(dir / "checkpoint.sftm", make_checkpoint(cfg, system));
    save_config(dir / "config.json", cfg);
    write_file(dir / "ledger.csv", [&](std::ostream& o) { write_ledger_csv(o, system); });
    const nlohmann::json summary = summary_json(system, true);
    write_file(dir / "summary.json", [&](std::ostream& o) { o << summary.dump(2) << '\n'; });
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_merge(const std::string& checkpoint, const std::vector<TaskId>& ids, const std::string& output,
              std::size_t threads) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    RunConfig cfg = ckpt.config;
    cfg.threads = threads;
    std::vector<TaskSpec> tasks = load_dataset(cfg);
    std::vector<TaskSpec> chosen;
    if (ids.empty()) {
        const SystemState current = restore_system(ckpt, tasks, threads);
        const auto keep = current.retained();
        for (auto& t : tasks) {
            if (std::binary_search(keep.begin(), keep.end(), t.id)) {
                chosen.push_back(std::move(t));
            }
        }
    } else {
        std::set<TaskId> want(ids.begin(), ids.end());
        for (auto& t : tasks) {
            if (want.erase(t.id) > 0) {
                chosen.push_back(std::move(t));
            }
        }
        if (!want.empty()) {
            throw DataError("unknown task id " + std::to_string(*want.begin()));
        }
    }
    if (chosen.empty()) {
        throw DataError("nothing to merge: no task selected");
    }
    cfg.clusters = std::min(cfg.clusters, chosen.size());
    const SystemState system = build_system(std::move(chosen), cfg);
    const fs::path target = output.empty() ? fs::path(checkpoint).parent_path() / "merged.sftm" : fs::path(output);
    save_checkpoint(target, make_checkpoint(cfg, system));
    std::cout << "merged " << system.retained().size() << " tasks into " << target.string() << '\n';
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& out, std::size_t threads) {
    const Loaded l = open_checkpoint(checkpoint, threads);
    const fs::path dir = ensure_dir(out.empty() ? fs::path(checkpoint).parent_path().string() : out);
    write_file(dir / "eval.csv", [&](std::ostream& o) { write_eval_csv(o, l.system); });
    std::cout << "held_in " << format_value(evaluate(l.system, EvalMode::held_in).aggregate) << '\n'
              << "held_out " << format_value(evaluate(l.system, EvalMode::held_out).aggregate) << '\n'
              << "zeroshot " << format_value(zeroshot_accuracy(l.system)) << '\n';
    return 0;
}

int cmd_unlearn(const std::string& checkpoint, std::vector<TaskId> ids, const std::string& ids_file,
                const std::string& out, std::size_t threads, bool audit) {
    if (!ids_file.empty()) {
        const auto more = read_ids_file(ids_file);
        ids.insert(ids.end(), more.begin(), more.end());
    }
    if (ids.empty()) {
        throw ConfigError("unlearn needs --id or --ids-file");
    }
    Loaded l = open_checkpoint(checkpoint, threads);
    l.system.config.audit_unlearn = audit;
    const fs::path dir = ensure_dir(out.empty() ? fs::path(checkpoint).parent_path().string() : out);
    std::ofstream log(dir / "exactness.jsonl", std::ios::app);
    bool exact = true;
    for (TaskId id : ids) {
        const ExactnessReport report = unlearn(l.system, id);
        log << to_json(report).dump() << '\n';
        std::cout << to_json(report).dump() << '\n';
        exact = exact && report.exact();
    }
    save_checkpoint(checkpoint, make_checkpoint(l.ckpt.config, l.system));
    if (!exact) {
        std::cerr << "error: post-unlearn state differs from a fresh merge of the retained tasks\n";
        return 3;
    }
    return 0;
}

int cmd_verify(const std::string& checkpoint, std::size_t threads) {
    const Loaded l = open_checkpoint(checkpoint, threads);
    const ExactnessReport report = verify_exactness(l.system);
    std::cout << to_json(report).dump(2) << '\n';
    if (!report.exact()) {
        std::cerr << "error: exactness verification failed\n";
        return 3;
    }
    return 0;
}

int cmd_report(const std::string& checkpoint, std::size_t simulate, int steps, const std::string& out,
               std::size_t threads) {
    if (simulate > 0) {
        const nlohmann::json j = projection_json(simulate, steps);
        const auto& m = j.at("methods");
        std::cout << "unlearn-all projection, T=" << simulate << ", " << steps << " steps per finetune\n";
        for (const auto& [name, v] : m.items()) {
            std::cout << "  " << name << " total " << v.at("total_task_finetunes").get<std::int64_t>()
                      << " task-finetunes, first deletion " << v.at("first_deletion_finetune_steps").get<std::int64_t>()
                      << " steps\n";
        }
        std::cout << "central total " << m.at("central").at("total_task_finetunes").get<std::int64_t>()
                  << " vs merge total " << m.at("sift_masks").at("total_task_finetunes").get<std::int64_t>()
                  << " (ratio " << format_value(j.at("central_over_merge_ratio").get<double>()) << ")\n";
        if (!out.empty()) {
            const fs::path dir = ensure_dir(out);
            write_file(dir / "projection.csv", [&](std::ostream& o) { write_projection_csv(o, simulate, steps); });
            write_file(dir / "projection.json", [&](std::ostream& o) { o << j.dump(2) << '\n'; });
        }
        return 0;
    }
    if (checkpoint.empty()) {
        throw ConfigError("report needs --checkpoint or --simulate");
    }
    const Loaded l = open_checkpoint(checkpoint, threads);
    const fs::path dir = ensure_dir(out.empty() ? fs::path(checkpoint).parent_path().string() : out);
    const nlohmann::json summary = summary_json(l.system, true);
    write_file(dir / "summary.json", [&](std::ostream& o) { o << summary.dump(2) << '\n'; });
    write_file(dir / "ledger.csv", [&](std::ostream& o) { write_ledger_csv(o, l.system); });
    std::cout << summary.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"siftmasks: exact unlearning through model merging with sign-fixed masks"};
    app.require_subcommand(1);

    RunFlags gen_flags;
    std::string data_out;
    auto* gen = app.add_subcommand("gen-data", "Write the configured dataset as JSON lines");
    add_run_flags(gen, gen_flags);
    gen->add_option("--data-out", data_out, "Dataset path (default <out>/data.jsonl)");

    RunFlags train_flags;
    auto* train = app.add_subcommand("train", "Finetune every task, merge, write the checkpoint");
    add_run_flags(train, train_flags);

    std::string checkpoint, output, out, ids_file;
    std::vector<TaskId> ids;
    std::size_t threads = 1;
    std::size_t simulate = 0;
    int sim_steps = 20;
    bool no_audit = false;

    auto add_common = [&](CLI::App* cmd, bool need_checkpoint) {
        auto* opt = cmd->add_option("--checkpoint", checkpoint, "Checkpoint file");
        if (need_checkpoint) {
            opt->required()->check(CLI::ExistingFile);
        }
        cmd->add_option("--threads", threads, "Parallel task finetunes")->check(CLI::PositiveNumber);
    };

    auto* merge_cmd = app.add_subcommand("merge", "Fresh merge of chosen (default: retained) tasks by replay");
    add_common(merge_cmd, true);
    merge_cmd->add_option("--ids", ids, "Task ids to merge")->delimiter(',');
    merge_cmd->add_option("--output", output, "Output checkpoint (default merged.sftm next to the input)");

    auto* eval_cmd = app.add_subcommand("eval", "Held-in / held-out accuracy to eval.csv");
    add_common(eval_cmd, true);
    eval_cmd->add_option("--out", out, "Output directory (default: checkpoint directory)");

    auto* unlearn_cmd = app.add_subcommand("unlearn", "Delete tasks and rewrite the checkpoint");
    add_common(unlearn_cmd, true);
    unlearn_cmd->add_option("--id", ids, "Task id to delete (repeatable)");
    unlearn_cmd->add_option("--ids-file", ids_file, "File with one task id per line")->check(CLI::ExistingFile);
    unlearn_cmd->add_option("--out", out, "Directory for exactness.jsonl (default: checkpoint directory)");
    unlearn_cmd->add_flag("--no-audit", no_audit, "Skip the fresh-rebuild comparison after each deletion");

    auto* verify_cmd = app.add_subcommand("verify", "Replay every retained task and compare bit-exactly");
    add_common(verify_cmd, true);

    auto* report_cmd = app.add_subcommand("report", "Ledger, storage and accuracy summaries");
    add_common(report_cmd, false);
    report_cmd->add_option("--simulate", simulate, "Project unlearn-all costs for T tasks without training");
    report_cmd->add_option("--steps", sim_steps, "Steps per finetune in the projection");
    report_cmd->add_option("--out", out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            return cmd_gen_data(gen_flags, data_out);
        }
        if (*train) {
            return cmd_train(train_flags);
        }
        if (*merge_cmd) {
            return cmd_merge(checkpoint, ids, output, threads);
        }
        if (*eval_cmd) {
            return cmd_eval(checkpoint, out, threads);
        }
        if (*unlearn_cmd) {
            return cmd_unlearn(checkpoint, ids, ids_file, out, threads, !no_audit);
        }
        if (*verify_cmd) {
            return cmd_verify(checkpoint, threads);
        }
        if (*report_cmd) {
            return cmd_report(checkpoint, simulate, sim_steps, out, threads);
        }
    } catch (const ExactnessError& e) {
        std::cerr << "exactness error: " << e.what() << '\n';
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
