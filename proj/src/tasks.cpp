#include "siftmasks/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "siftmasks/errors.hpp"
#include "siftmasks/prng.hpp"

namespace siftmasks {

namespace {

constexpr int kMaxRejections = 100000;

// Dense C x n Gaussian matrix, row-major.
std::vector<double> gaussian_matrix(PrngStream& rng, std::size_t rows, std::size_t cols) {
    std::vector<double> w(rows * cols);
    for (double& x : w) {
        x = rng.normal();
    }
    return w;
}

// argmax and top-two gap of W z.
std::pair<int, double> classify(std::span<const double> w, std::size_t classes,
                                std::span<const double> z) {
    const std::size_t n = z.size();
    int best = 0;
    double top = -1e300;
    double second = -1e300;
    for (std::size_t c = 0; c < classes; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            s += w[c * n + j] * z[j];
        }
        if (s > top) {
            second = top;
            top = s;
            best = static_cast<int>(c);
        } else if (s > second) {
            second = s;
        }
    }
    return {best, classes == 1 ? 1e300 : top - second};
}

// Draws z ~ N(0, I) until the top-two gap of W z clears the margin.
std::pair<std::vector<double>, int> draw_labeled(PrngStream& rng, std::span<const double> w,
                                                 std::size_t classes, std::size_t dim,
                                                 double margin) {
    std::vector<double> z(dim);
    for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
        for (double& v : z) {
            v = rng.normal();
        }
        const auto [label, gap] = classify(w, classes, z);
        if (gap >= margin) {
            return {z, label};
        }
    }
    throw ConfigError("margin too large: no input accepted after rejection sampling");
}

template <class T>
void shuffle(PrngStream& rng, std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = rng.below(i);
        std::swap(v[i - 1], v[j]);
    }
}

void split_eval(TaskSpec& task) {
    const std::size_t n = task.examples.size();
    const std::size_t k = eval_count(n);
    task.eval_split.resize(k);
    std::iota(task.eval_split.begin(), task.eval_split.end(), n - k);
}

std::vector<TaskSpec> generate_conflicting(const HeterogeneityRegime& regime, std::size_t num_tasks,
                                           std::size_t n, std::size_t d, std::size_t classes,
                                           std::uint64_t seed) {
    const std::size_t regions = regime.regions;
    if (regions > d) {
        throw ConfigError("conflicting regime needs regions <= input_dim");
    }
    double contest_prob = regime.conflict_rate;
    if (num_tasks >= 2) {
        const double attainable = contested_disagreement(num_tasks, classes);
        if (regime.conflict_rate > attainable + 1e-12) {
            throw ConfigError("conflict_rate " + std::to_string(regime.conflict_rate) +
                              " exceeds the attainable pairwise disagreement " +
                              std::to_string(attainable) + " for this task/class count");
        }
        contest_prob = attainable > 0.0 ? std::min(1.0, regime.conflict_rate / attainable) : 0.0;
    }

    // Contested regions carry the disagreement; an input lands in one with
    // probability contest_prob, so the realized rate concentrates per input.
    std::size_t contested = 0;
    if (contest_prob >= 1.0) {
        contested = regions;
    } else if (contest_prob > 0.0) {
        if (regions < 2) {
            throw ConfigError("conflicting regime needs regions >= 2 for a partial conflict rate");
        }
        const auto want = static_cast<std::size_t>(std::llround(contest_prob * static_cast<double>(regions)));
        contested = std::clamp<std::size_t>(want, 1, regions - 1);
    }

    PrngStream rules_rng(derive_seed(seed, "rules"));
    std::vector<std::size_t> block_begin(regions + 1);
    for (std::size_t k = 0; k <= regions; ++k) {
        block_begin[k] = k * d / regions;
    }
    std::vector<std::vector<double>> rules(regions);
    for (std::size_t k = 0; k < regions; ++k) {
        rules[k] = gaussian_matrix(rules_rng, classes, block_begin[k + 1] - block_begin[k]);
    }

    // shifts[k][t]: class shift task t applies inside region k.
    PrngStream contest_rng(derive_seed(seed, "contest"));
    std::vector<std::size_t> region_order(regions);
    std::iota(region_order.begin(), region_order.end(), std::size_t{0});
    shuffle(contest_rng, region_order);
    const std::vector<std::size_t> contested_set(region_order.begin(),
                                                 region_order.begin() + static_cast<std::ptrdiff_t>(contested));
    const std::vector<std::size_t> calm_set(region_order.begin() + static_cast<std::ptrdiff_t>(contested),
                                            region_order.end());
    std::vector<std::vector<int>> shifts(regions, std::vector<int>(num_tasks, 0));
    for (std::size_t k : contested_set) {
        std::vector<std::size_t> order(num_tasks);
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle(contest_rng, order);
        for (std::size_t p = 0; p < num_tasks; ++p) {
            shifts[k][order[p]] = static_cast<int>(p % classes);
        }
    }

    struct PoolItem {
        std::vector<float> features;
        int base_label;
        int region;
    };
    PrngStream pool_rng(derive_seed(seed, "pool"));
    std::vector<PoolItem> pool;
    pool.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool hot = calm_set.empty() || (!contested_set.empty() && pool_rng.uniform() < contest_prob);
        const auto& from = hot ? contested_set : calm_set;
        const std::size_t k = from[pool_rng.below(from.size())];
        const std::size_t width = block_begin[k + 1] - block_begin[k];
        auto [z, label] = draw_labeled(pool_rng, rules[k], classes, width, regime.margin);
        std::vector<float> x(d, 0.0f);
        for (std::size_t j = 0; j < width; ++j) {
            x[block_begin[k] + j] = static_cast<float>(z[j]);
        }
        pool.push_back({std::move(x), label, static_cast<int>(k)});
    }

    std::vector<TaskSpec> tasks(num_tasks);
    for (std::size_t t = 0; t < num_tasks; ++t) {
        TaskSpec& task = tasks[t];
        task.id = static_cast<TaskId>(t);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        PrngStream order_rng(derive_seed(derive_seed(seed, "order"), t));
        shuffle(order_rng, order);
        task.examples.reserve(n);
        for (std::size_t i : order) {
            const PoolItem& item = pool[i];
            const int label = (item.base_label + shifts[static_cast<std::size_t>(item.region)][t]) %
                              static_cast<int>(classes);
            task.examples.push_back({item.features, label, item.region});
        }
        split_eval(task);
    }
    return tasks;
}

std::vector<TaskSpec> generate_distinct(const HeterogeneityRegime& regime, std::size_t num_tasks,
                                        std::size_t n, std::size_t d, std::size_t classes,
                                        std::uint64_t seed) {
    if (d < 63 && num_tasks > (std::uint64_t{1} << d)) {
        throw ConfigError("distinct regime needs 2^input_dim >= number of tasks");
    }
    PrngStream code_rng(derive_seed(seed, "codes"));
    std::set<std::vector<int>> used;
    std::vector<TaskSpec> tasks(num_tasks);
    for (std::size_t t = 0; t < num_tasks; ++t) {
        std::vector<int> code(d);
        do {
            for (int& c : code) {
                c = code_rng.coin() ? 1 : -1;
            }
        } while (!used.insert(code).second);

        PrngStream rng(derive_seed(derive_seed(seed, "distinct-task"), t));
        const std::vector<double> rule = gaussian_matrix(rng, classes, d);
        TaskSpec& task = tasks[t];
        task.id = static_cast<TaskId>(t);
        task.examples.reserve(n);
        std::vector<double> centered(d);
        while (task.examples.size() < n) {
            int accepted = -1;
            for (int attempt = 0; attempt < kMaxRejections && accepted < 0; ++attempt) {
                for (double& c : centered) {
                    c = 0.8 * (2.0 * rng.uniform() - 1.0);
                }
                const auto [label, gap] = classify(rule, classes, centered);
                if (gap >= regime.margin) {
                    accepted = label;
                }
            }
            if (accepted < 0) {
                throw ConfigError("margin too large: no input accepted after rejection sampling");
            }
            std::vector<float> x(d);
            for (std::size_t j = 0; j < d; ++j) {
                // Coordinate j keeps the sign of code[j]: |x_j| lies in (0.2, 1.8).
                x[j] = static_cast<float>(code[j] * (1.0 + code[j] * centered[j]));
            }
            task.examples.push_back({std::move(x), accepted, static_cast<int>(t)});
        }
        split_eval(task);
    }
    return tasks;
}

std::vector<TaskSpec> generate_similar(const HeterogeneityRegime& regime, std::size_t num_tasks,
                                       std::size_t n, std::size_t d, std::size_t classes,
                                       std::uint64_t seed) {
    PrngStream rule_rng(derive_seed(seed, "rules"));
    const std::vector<double> rule = gaussian_matrix(rule_rng, classes, d);
    std::vector<TaskSpec> tasks(num_tasks);
    for (std::size_t t = 0; t < num_tasks; ++t) {
        PrngStream rng(derive_seed(derive_seed(seed, "similar-task"), t));
        TaskSpec& task = tasks[t];
        task.id = static_cast<TaskId>(t);
        task.examples.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto [z, label] = draw_labeled(rng, rule, classes, d, regime.margin);
            std::vector<float> x(z.begin(), z.end());
            task.examples.push_back({std::move(x), label, 0});
        }
        split_eval(task);
    }
    return tasks;
}

}  // namespace

std::vector<std::size_t> TaskSpec::train_indices() const {
    std::vector<bool> held(examples.size(), false);
    for (std::size_t i : eval_split) {
        if (i < held.size()) {
            held[i] = true;
        }
    }
    std::vector<std::size_t> out;
    out.reserve(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (!held[i]) {
            out.push_back(i);
        }
    }
    return out;
}

std::vector<const Example*> TaskSpec::train_examples() const {
    std::vector<const Example*> out;
    for (std::size_t i : train_indices()) {
        out.push_back(&examples[i]);
    }
    return out;
}

std::vector<const Example*> TaskSpec::eval_examples() const {
    std::vector<const Example*> out;
    out.reserve(eval_split.size());
    for (std::size_t i : eval_split) {
        out.push_back(&examples[i]);
    }
    return out;
}

void TaskSpec::validate(std::size_t num_classes) const {
    const std::string where = "task " + std::to_string(id) + ": ";
    if (examples.empty()) {
        throw DataError(where + "no examples");
    }
    const std::size_t dim = input_dim();
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const Example& ex = examples[i];
        if (ex.features.size() != dim) {
            throw DataError(where + "example " + std::to_string(i) + " has " +
                            std::to_string(ex.features.size()) + " features, expected " +
                            std::to_string(dim));
        }
        if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_classes) {
            throw DataError(where + "example " + std::to_string(i) + " label " +
                            std::to_string(ex.label) + " outside [0, " + std::to_string(num_classes) +
                            ")");
        }
    }
    std::set<std::size_t> held;
    for (std::size_t i : eval_split) {
        if (i >= examples.size() || !held.insert(i).second) {
            throw DataError(where + "invalid or duplicate eval index " + std::to_string(i));
        }
    }
    if (held.size() >= examples.size()) {
        throw DataError(where + "no training examples");
    }
}

std::size_t eval_count(std::size_t n) noexcept {
    if (n <= 1) {
        return 0;
    }
    const std::size_t k = (n + 4) / 5;
    return std::min(k, n - 1);
}

std::string_view to_string(RegimeKind kind) noexcept {
    switch (kind) {
        case RegimeKind::conflicting: return "conflicting";
        case RegimeKind::distinct: return "distinct";
        case RegimeKind::similar: return "similar";
    }
    return "conflicting";
}

RegimeKind regime_kind_from_string(std::string_view name) {
    if (name == "conflicting") {
        return RegimeKind::conflicting;
    }
    if (name == "distinct") {
        return RegimeKind::distinct;
    }
    if (name == "similar") {
        return RegimeKind::similar;
    }
    throw ConfigError("unknown regime '" + std::string(name) + "' (valid: conflicting, distinct, similar)");
}

void HeterogeneityRegime::validate() const {
    if (!(conflict_rate >= 0.0 && conflict_rate <= 1.0)) {
        throw ConfigError("conflict_rate must lie in [0, 1]");
    }
    if (!(margin >= 0.0 && margin <= 1.0)) {
        throw ConfigError("margin must lie in [0, 1]");
    }
    if (regions == 0) {
        throw ConfigError("regions must be positive");
    }
}

double contested_disagreement(std::size_t num_tasks, std::size_t num_classes) noexcept {
    if (num_tasks < 2 || num_classes == 0) {
        return 0.0;
    }
    double same_pairs = 0.0;
    for (std::size_t j = 0; j < num_classes; ++j) {
        const std::size_t count = num_tasks / num_classes + (j < num_tasks % num_classes ? 1 : 0);
        same_pairs += static_cast<double>(count) * static_cast<double>(count == 0 ? 0 : count - 1);
    }
    const double pairs = static_cast<double>(num_tasks) * static_cast<double>(num_tasks - 1);
    return 1.0 - same_pairs / pairs;
}

std::vector<TaskSpec> synth_generate(const HeterogeneityRegime& regime, std::size_t num_tasks,
                                     std::size_t examples_per_task, std::size_t input_dim,
                                     std::size_t num_classes, std::uint64_t seed) {
    regime.validate();
    if (num_tasks == 0 || examples_per_task == 0 || input_dim == 0 || num_classes == 0) {
        throw ConfigError("tasks, examples_per_task, input_dim and num_classes must all be >= 1");
    }
    switch (regime.kind) {
        case RegimeKind::conflicting:
            return generate_conflicting(regime, num_tasks, examples_per_task, input_dim, num_classes, seed);
        case RegimeKind::distinct:
            return generate_distinct(regime, num_tasks, examples_per_task, input_dim, num_classes, seed);
        case RegimeKind::similar:
            return generate_similar(regime, num_tasks, examples_per_task, input_dim, num_classes, seed);
    }
    throw ConfigError("unknown regime");
}

std::vector<TaskSpec> load_tasks(const std::filesystem::path& path, std::size_t num_classes) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open dataset " + path.string());
    }
    std::vector<TaskSpec> tasks;
    std::map<TaskId, std::size_t> slot;
    std::size_t dim = 0;
    std::string line;
    std::size_t line_no = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where + "malformed JSON (" + e.what() + ")");
        }
        if (!rec.is_object() || !rec.contains("task_id") || !rec.contains("features") ||
            !rec.contains("label")) {
            throw DataError(where + "record needs task_id, features and label");
        }
        if (!rec["task_id"].is_number_integer() || !rec["label"].is_number_integer() ||
            !rec["features"].is_array()) {
            throw DataError(where + "task_id and label must be integers, features an array");
        }
        Example ex;
        ex.label = rec["label"].get<int>();
        for (const auto& v : rec["features"]) {
            if (!v.is_number()) {
                throw DataError(where + "non-numeric feature");
            }
            ex.features.push_back(static_cast<float>(v.get<double>()));
        }
        if (ex.features.empty()) {
            throw DataError(where + "empty feature vector");
        }
        if (dim == 0) {
            dim = ex.features.size();
        } else if (ex.features.size() != dim) {
            throw DataError(where + "feature dimension " + std::to_string(ex.features.size()) +
                            " differs from " + std::to_string(dim));
        }
        if (ex.label < 0 || (num_classes > 0 && static_cast<std::size_t>(ex.label) >= num_classes)) {
            throw DataError(where + "label " + std::to_string(ex.label) + " out of range [0, " +
                            std::to_string(num_classes) + ")");
        }
        max_label = std::max(max_label, ex.label);
        const TaskId id = rec["task_id"].get<TaskId>();
        auto [it, inserted] = slot.try_emplace(id, tasks.size());
        if (inserted) {
            tasks.push_back(TaskSpec{id, {}, {}});
        }
        tasks[it->second].examples.push_back(std::move(ex));
    }
    if (tasks.empty()) {
        throw DataError("dataset " + path.string() + " is empty");
    }
    const std::size_t classes = num_classes > 0 ? num_classes : static_cast<std::size_t>(max_label + 1);
    for (TaskSpec& task : tasks) {
        split_eval(task);
        task.validate(classes);
    }
    return tasks;
}

void save_tasks(const std::filesystem::path& path, std::span<const TaskSpec> tasks) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write dataset " + path.string());
    }
    for (const TaskSpec& task : tasks) {
        for (const Example& ex : task.examples) {
            nlohmann::json rec;
            rec["task_id"] = task.id;
            std::vector<double> features(ex.features.begin(), ex.features.end());
            rec["features"] = features;
            rec["label"] = ex.label;
            out << rec.dump() << '\n';
        }
    }
}

void to_json(nlohmann::json& j, const HeterogeneityRegime& regime) {
    j = nlohmann::json{{"kind", std::string(to_string(regime.kind))},
                       {"conflict_rate", regime.conflict_rate},
                       {"regions", regime.regions},
                       {"margin", regime.margin}};
}

void from_json(const nlohmann::json& j, HeterogeneityRegime& regime) {
    regime.kind = regime_kind_from_string(j.at("kind").get<std::string>());
    regime.conflict_rate = j.at("conflict_rate").get<double>();
    regime.regions = j.at("regions").get<std::size_t>();
    regime.margin = j.at("margin").get<double>();
    regime.validate();
}

}  // namespace siftmasks
