#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "siftmasks/config.hpp"
#include "siftmasks/engine.hpp"

namespace siftmasks {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Persisted system state. Task vectors are never stored: unlearning
/// replays them from the seeds.
///
/// Binary layout, all integers little-endian:
///   "SFTM" u32 version
///   u32 model kind, u64 input_dim, u64 hidden_dim, u64 num_classes
///   u64 base_seed, u64 sign_seed, i32 scale_bits, u32 method
///   str config JSON
///   ids registry, ids unlearned (deletion order)
///   u64 group count, then per group:
///     ids members, ids retained, i64[] accumulator, masks, digests,
///     lambdas, scales, f32[] unified, f32[] ties_delta,
///     ids central_retained, f32[] central
///   u64 ledger events, each: u32 phase, i64 task, i64 finetunes, i64 steps
/// where ids/arrays are a u64 count followed by the items, str is u64 length
/// plus bytes, masks are (i64 id, u64 size, u32 words...) and the keyed
/// maps are (i64 id, u64 value) with doubles stored by bit pattern.
struct Checkpoint {
    RunConfig config;  // threads and out are not persisted
    ModelSpec model;
    std::uint64_t base_seed = 0;
    std::uint64_t sign_seed = 0;
    int scale_bits = kDefaultScaleBits;
    MethodTag method = MethodTag::sift_masks;
    std::vector<TaskId> task_ids;
    std::vector<TaskId> unlearned;
    std::vector<Group> groups;
    CostLedger ledger;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

Checkpoint make_checkpoint(const RunConfig& cfg, const SystemState& system);

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws DataError on a bad magic, an unknown version or truncation.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Reattaches the dataset and rebuilds M0 and the sign vector from the
/// seeds. Throws DataError when the tasks do not match the registry.
SystemState restore_system(const Checkpoint& ckpt, std::vector<TaskSpec> tasks, std::size_t threads = 1);

}  // namespace siftmasks
