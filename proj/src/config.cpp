#include "siftmasks/config.hpp"

#include <fstream>
#include <initializer_list>
#include <string_view>

#include "siftmasks/errors.hpp"
#include "siftmasks/prng.hpp"

namespace siftmasks {

namespace {

using nlohmann::json;

void only_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) {
        throw ConfigError(std::string(where) + " must be a JSON object");
    }
    for (const auto& item : j.items()) {
        bool known = false;
        for (auto key : allowed) {
            known = known || item.key() == key;
        }
        if (!known) {
            throw ConfigError("unknown config key '" + std::string(where) + "." + item.key() + "'");
        }
    }
}

template <class T>
void read(const json& j, const char* key, T& field) {
    if (!j.contains(key)) {
        return;
    }
    try {
        field = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

}  // namespace

void RunConfig::validate() const {
    if (dataset.source != "synthetic" && dataset.source != "file") {
        throw ConfigError("dataset.source must be 'synthetic' or 'file', got '" + dataset.source + "'");
    }
    if (dataset.source == "file" && dataset.path.empty()) {
        throw ConfigError("dataset.path is required when dataset.source is 'file'");
    }
    dataset.regime.validate();
    if (dataset.tasks < 1 || dataset.examples_per_task < 1 || dataset.input_dim < 1 || dataset.num_classes < 1) {
        throw ConfigError("dataset tasks, examples_per_task, input_dim and num_classes must be >= 1");
    }
    if (clusters < 1) {
        throw ConfigError("clusters must be >= 1");
    }
    if (dataset.source == "synthetic" && clusters > dataset.tasks) {
        throw ConfigError("clusters (" + std::to_string(clusters) + ") exceeds the number of tasks (" +
                          std::to_string(dataset.tasks) + ")");
    }
    engine_config().validate();
}

ModelSpec RunConfig::model() const {
    return ModelSpec{model_kind, dataset.input_dim, model_kind == ModelKind::mlp ? hidden_dim : 0,
                     dataset.num_classes};
}

EngineConfig RunConfig::engine_config() const {
    EngineConfig cfg;
    cfg.method = method;
    cfg.model = model();
    cfg.train.steps = steps;
    cfg.train.batch_size = batch_size;
    cfg.train.learning_rate = learning_rate;
    cfg.train.seed = batch_seed();
    cfg.base_seed = init_seed();
    cfg.sign_seed = sign_seed();
    cfg.central_steps = central_steps;
    cfg.threads = threads;
    return cfg;
}

std::uint64_t RunConfig::data_seed() const noexcept { return derive_seed(seed, "data"); }
std::uint64_t RunConfig::init_seed() const noexcept { return derive_seed(seed, "init"); }
std::uint64_t RunConfig::sign_seed() const noexcept { return derive_seed(seed, "signs"); }
std::uint64_t RunConfig::batch_seed() const noexcept { return derive_seed(seed, "batches"); }
std::uint64_t RunConfig::cluster_seed() const noexcept { return derive_seed(seed, "clustering"); }

void to_json(json& j, const RunConfig& cfg) {
    j = json{
        {"dataset",
         {{"source", cfg.dataset.source},
          {"path", cfg.dataset.path},
          {"regime", cfg.dataset.regime},
          {"tasks", cfg.dataset.tasks},
          {"examples_per_task", cfg.dataset.examples_per_task},
          {"input_dim", cfg.dataset.input_dim},
          {"num_classes", cfg.dataset.num_classes}}},
        {"model", {{"kind", std::string(to_string(cfg.model_kind))}, {"hidden_dim", cfg.hidden_dim}}},
        {"method",
         {{"name", std::string(to_string(cfg.method.tag))},
          {"density_grid", cfg.method.density_grid},
          {"alpha_grid", cfg.method.alpha_grid},
          {"ties_density", cfg.method.ties_density},
          {"overlap_normalize", cfg.method.overlap_normalize},
          {"cache_task_vectors", cfg.method.cache_task_vectors}}},
        {"train",
         {{"steps", cfg.steps},
          {"batch_size", cfg.batch_size},
          {"learning_rate", cfg.learning_rate},
          {"central_steps", cfg.central_steps}}},
        {"seed", cfg.seed},
        {"clusters", cfg.clusters},
        {"threads", cfg.threads},
        {"out", cfg.out},
    };
}

void from_json(const json& j, RunConfig& cfg) {
    only_keys(j, "config", {"dataset", "model", "method", "train", "seed", "clusters", "threads", "out"});
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        only_keys(d, "dataset",
                  {"source", "path", "regime", "tasks", "examples_per_task", "input_dim", "num_classes"});
        read(d, "source", cfg.dataset.source);
        read(d, "path", cfg.dataset.path);
        read(d, "tasks", cfg.dataset.tasks);
        read(d, "examples_per_task", cfg.dataset.examples_per_task);
        read(d, "input_dim", cfg.dataset.input_dim);
        read(d, "num_classes", cfg.dataset.num_classes);
        if (d.contains("regime")) {
            const json& r = d.at("regime");
            only_keys(r, "dataset.regime", {"kind", "conflict_rate", "regions", "margin"});
            if (r.contains("kind")) {
                cfg.dataset.regime.kind = regime_kind_from_string(r.at("kind").get<std::string>());
            }
            read(r, "conflict_rate", cfg.dataset.regime.conflict_rate);
            read(r, "regions", cfg.dataset.regime.regions);
            read(r, "margin", cfg.dataset.regime.margin);
        }
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        only_keys(m, "model", {"kind", "hidden_dim"});
        if (m.contains("kind")) {
            cfg.model_kind = model_kind_from_string(m.at("kind").get<std::string>());
        }
        read(m, "hidden_dim", cfg.hidden_dim);
    }
    if (j.contains("method")) {
        const json& m = j.at("method");
        only_keys(m, "method",
                  {"name", "density_grid", "alpha_grid", "ties_density", "overlap_normalize", "cache_task_vectors"});
        if (m.contains("name")) {
            cfg.method.tag = method_tag_from_string(m.at("name").get<std::string>());
        }
        read(m, "density_grid", cfg.method.density_grid);
        read(m, "alpha_grid", cfg.method.alpha_grid);
        read(m, "ties_density", cfg.method.ties_density);
        read(m, "overlap_normalize", cfg.method.overlap_normalize);
        read(m, "cache_task_vectors", cfg.method.cache_task_vectors);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        only_keys(t, "train", {"steps", "batch_size", "learning_rate", "central_steps"});
        read(t, "steps", cfg.steps);
        read(t, "batch_size", cfg.batch_size);
        read(t, "learning_rate", cfg.learning_rate);
        read(t, "central_steps", cfg.central_steps);
    }
    read(j, "seed", cfg.seed);
    read(j, "clusters", cfg.clusters);
    read(j, "threads", cfg.threads);
    read(j, "out", cfg.out);
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    RunConfig cfg;
    from_json(j, cfg);
    cfg.validate();
    return cfg;
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << json(cfg).dump(2) << '\n';
}

std::vector<TaskSpec> load_dataset(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.dataset.source == "file") {
        std::vector<TaskSpec> tasks = load_tasks(cfg.dataset.path, cfg.dataset.num_classes);
        for (const auto& t : tasks) {
            if (t.input_dim() != cfg.dataset.input_dim) {
                throw DataError("dataset " + cfg.dataset.path + " has feature dimension " +
                                std::to_string(t.input_dim()) + " but the config says " +
                                std::to_string(cfg.dataset.input_dim));
            }
        }
        return tasks;
    }
    return synth_generate(cfg.dataset.regime, cfg.dataset.tasks, cfg.dataset.examples_per_task,
                          cfg.dataset.input_dim, cfg.dataset.num_classes, cfg.data_seed());
}

SystemState build_system(std::vector<TaskSpec> tasks, const RunConfig& cfg) {
    const EngineConfig engine = cfg.engine_config();
    if (cfg.clusters > 1) {
        return build_clustered(std::move(tasks), engine, cfg.clusters, cfg.cluster_seed());
    }
    return build(std::move(tasks), engine);
}

}  // namespace siftmasks
