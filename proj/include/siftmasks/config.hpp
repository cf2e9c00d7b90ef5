#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "siftmasks/engine.hpp"
#include "siftmasks/merging.hpp"
#include "siftmasks/tasks.hpp"
#include "siftmasks/trainer.hpp"

namespace siftmasks {

struct DatasetConfig {
    std::string source = "synthetic";  // synthetic | file
    std::string path;                  // JSON-lines file when source == file
    HeterogeneityRegime regime;
    std::size_t tasks = 8;
    std::size_t examples_per_task = 200;
    std::size_t input_dim = 20;
    std::size_t num_classes = 2;

    friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

/// Everything one experiment depends on. Every random stream is derived from
/// `seed` through a labelled child seed.
struct RunConfig {
    DatasetConfig dataset;
    ModelKind model_kind = ModelKind::mlp;
    std::size_t hidden_dim = 32;
    LocalizationMethod method;
    int steps = 20;
    std::size_t batch_size = 64;
    double learning_rate = 0.05;
    int central_steps = 0;
    std::uint64_t seed = 0;
    std::size_t clusters = 1;
    std::size_t threads = 1;
    std::string out = "out";

    void validate() const;

    ModelSpec model() const;
    EngineConfig engine_config() const;

    std::uint64_t data_seed() const noexcept;
    std::uint64_t init_seed() const noexcept;
    std::uint64_t sign_seed() const noexcept;
    std::uint64_t batch_seed() const noexcept;
    std::uint64_t cluster_seed() const noexcept;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Serialized with every field explicit.
void to_json(nlohmann::json& j, const RunConfig& cfg);
/// Missing fields keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, RunConfig& cfg);

RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);

/// Synthetic generation or file ingestion, as the config says.
std::vector<TaskSpec> load_dataset(const RunConfig& cfg);

/// Builds the system (clustered when cfg.clusters > 1).
SystemState build_system(std::vector<TaskSpec> tasks, const RunConfig& cfg);

}  // namespace siftmasks
