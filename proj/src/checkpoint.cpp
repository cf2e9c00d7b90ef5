#include "siftmasks/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <set>

#include "siftmasks/errors.hpp"

namespace siftmasks {

namespace {

constexpr char kMagic[4] = {'S', 'F', 'T', 'M'};

class Writer {
public:
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(std::string_view s) { out_.append(s); }
    void str(std::string_view s) {
        u64(s.size());
        raw(s);
    }
    void ids(const std::vector<TaskId>& v) {
        u64(v.size());
        for (TaskId id : v) {
            i64(id);
        }
    }
    void floats(const ParamVector& v) {
        u64(v.size());
        for (float x : v.view()) {
            f32(x);
        }
    }
    void doubles(const std::map<TaskId, double>& m) {
        u64(m.size());
        for (const auto& [id, x] : m) {
            i64(id);
            f64(x);
        }
    }
    std::string take() { return std::move(out_); }

private:
    void put(std::uint64_t v, int bytes) {
        for (int i = 0; i < bytes; ++i) {
            out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        }
    }
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view bytes) : in_(bytes) {}

    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string_view raw(std::size_t n) {
        need(n);
        std::string_view s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str() { return std::string(raw(count(1))); }
    // Element count, checked against the bytes left so corrupt files cannot
    // trigger huge allocations.
    std::size_t count(std::size_t min_item_bytes) {
        const std::uint64_t n = u64();
        if (n > (in_.size() - pos_) / std::max<std::size_t>(1, min_item_bytes)) {
            throw DataError("corrupt checkpoint: count " + std::to_string(n) + " exceeds the remaining bytes");
        }
        return static_cast<std::size_t>(n);
    }
    std::vector<TaskId> ids() {
        std::vector<TaskId> v(count(8));
        for (auto& id : v) {
            id = i64();
        }
        return v;
    }
    ParamVector floats() {
        std::vector<float> v(count(4));
        for (auto& x : v) {
            x = f32();
        }
        return ParamVector(std::move(v));
    }
    std::map<TaskId, double> doubles() {
        std::map<TaskId, double> m;
        const std::size_t n = count(16);
        for (std::size_t i = 0; i < n; ++i) {
            const TaskId id = i64();
            m[id] = f64();
        }
        return m;
    }
    bool done() const noexcept { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) {
            throw DataError("truncated checkpoint");
        }
    }
    std::uint64_t get(int bytes) {
        need(static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(bytes);
        return v;
    }
    std::string_view in_;
    std::size_t pos_ = 0;
};

RunConfig persisted(RunConfig cfg) {
    cfg.threads = 1;
    cfg.out.clear();
    return cfg;
}

}  // namespace

Checkpoint make_checkpoint(const RunConfig& cfg, const SystemState& system) {
    Checkpoint c;
    c.config = persisted(cfg);
    c.model = system.config.model;
    c.base_seed = system.config.base_seed;
    c.sign_seed = system.config.sign_seed;
    c.scale_bits = system.config.scale_bits;
    c.method = system.method();
    for (const auto& t : system.tasks) {
        c.task_ids.push_back(t.id);
    }
    c.unlearned = system.unlearned;
    c.groups = system.groups;
    c.ledger = system.ledger;
    return c;
}

std::string encode_checkpoint(const Checkpoint& c) {
    Writer w;
    w.raw(std::string_view(kMagic, 4));
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(c.model.kind));
    w.u64(c.model.input_dim);
    w.u64(c.model.hidden_dim);
    w.u64(c.model.num_classes);
    w.u64(c.base_seed);
    w.u64(c.sign_seed);
    w.i32(c.scale_bits);
    w.u32(static_cast<std::uint32_t>(c.method));
    w.str(nlohmann::json(c.config).dump());
    w.ids(c.task_ids);
    w.ids(c.unlearned);
    w.u64(c.groups.size());
    for (const Group& g : c.groups) {
        const MergedState& m = g.merged;
        w.ids(g.members);
        w.ids(m.retained);
        w.u64(m.accumulator.size());
        for (std::int64_t v : m.accumulator.view()) {
            w.i64(v);
        }
        w.u64(m.masks.size());
        for (const auto& [id, mask] : m.masks) {
            w.i64(id);
            w.u64(mask.size());
            for (std::uint32_t word : mask.words()) {
                w.u32(word);
            }
        }
        w.u64(m.digests.size());
        for (const auto& [id, d] : m.digests) {
            w.i64(id);
            w.u64(d);
        }
        w.doubles(m.lambdas);
        w.doubles(m.scales);
        w.floats(m.unified);
        w.floats(m.ties_delta);
        w.ids(g.central_retained);
        w.floats(g.central);
    }
    w.u64(c.ledger.events.size());
    for (const auto& e : c.ledger.events) {
        w.u32(static_cast<std::uint32_t>(e.phase));
        w.i64(e.task);
        w.i64(e.task_finetunes);
        w.i64(e.finetune_steps);
    }
    return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    Reader r(bytes);
    if (r.raw(4) != std::string_view(kMagic, 4)) {
        throw DataError("not a checkpoint (bad magic)");
    }
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c;
    const std::uint32_t kind = r.u32();
    if (kind > static_cast<std::uint32_t>(ModelKind::mlp)) {
        throw DataError("corrupt checkpoint: model kind " + std::to_string(kind));
    }
    c.model.kind = static_cast<ModelKind>(kind);
    c.model.input_dim = r.u64();
    c.model.hidden_dim = r.u64();
    c.model.num_classes = r.u64();
    c.base_seed = r.u64();
    c.sign_seed = r.u64();
    c.scale_bits = r.i32();
    const std::uint32_t method = r.u32();
    if (method > static_cast<std::uint32_t>(MethodTag::central)) {
        throw DataError("corrupt checkpoint: method " + std::to_string(method));
    }
    c.method = static_cast<MethodTag>(method);
    try {
        nlohmann::json::parse(r.str()).get_to(c.config);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("corrupt checkpoint config: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("corrupt checkpoint config: ") + e.what());
    }
    c.task_ids = r.ids();
    c.unlearned = r.ids();
    const std::size_t groups = r.count(1);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        Group g;
        MergedState& m = g.merged;
        m.method = c.method;
        m.base_seed = c.base_seed;
        m.sign_seed = c.sign_seed;
        g.members = r.ids();
        m.retained = r.ids();
        std::vector<std::int64_t> acc(r.count(8));
        for (auto& v : acc) {
            v = r.i64();
        }
        m.accumulator = FxpVector(std::move(acc), c.scale_bits);
        const std::size_t masks = r.count(16);
        for (std::size_t i = 0; i < masks; ++i) {
            const TaskId id = r.i64();
            const std::uint64_t size = r.u64();
            std::vector<std::uint32_t> words(BitMask::words_for(size));
            if (words.size() > bytes.size()) {
                throw DataError("corrupt checkpoint: mask too large");
            }
            for (auto& word : words) {
                word = r.u32();
            }
            m.masks.emplace(id, BitMask(size, std::move(words)));
        }
        const std::size_t digests = r.count(16);
        for (std::size_t i = 0; i < digests; ++i) {
            const TaskId id = r.i64();
            m.digests[id] = r.u64();
        }
        m.lambdas = r.doubles();
        m.scales = r.doubles();
        m.unified = r.floats();
        m.ties_delta = r.floats();
        g.central_retained = r.ids();
        g.central = r.floats();
        c.groups.push_back(std::move(g));
    }
    const std::size_t events = r.count(28);
    for (std::size_t i = 0; i < events; ++i) {
        LedgerEvent e;
        const std::uint32_t phase = r.u32();
        if (phase > static_cast<std::uint32_t>(Phase::unlearn)) {
            throw DataError("corrupt checkpoint: ledger phase " + std::to_string(phase));
        }
        e.phase = static_cast<Phase>(phase);
        e.task = r.i64();
        e.task_finetunes = r.i64();
        e.finetune_steps = r.i64();
        c.ledger.events.push_back(e);
    }
    if (!r.done()) {
        throw DataError("corrupt checkpoint: trailing bytes");
    }
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write checkpoint " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("failed writing checkpoint " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint " + path.string());
    }
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

SystemState restore_system(const Checkpoint& ckpt, std::vector<TaskSpec> tasks, std::size_t threads) {
    RunConfig cfg = ckpt.config;
    cfg.threads = threads;
    EngineConfig engine = cfg.engine_config();
    engine.validate();
    if (engine.model != ckpt.model || engine.base_seed != ckpt.base_seed || engine.sign_seed != ckpt.sign_seed ||
        engine.method.tag != ckpt.method || engine.scale_bits != ckpt.scale_bits) {
        throw DataError("checkpoint header disagrees with its embedded config");
    }
    std::sort(tasks.begin(), tasks.end(), [](const TaskSpec& a, const TaskSpec& b) { return a.id < b.id; });
    std::vector<TaskId> ids;
    for (const auto& t : tasks) {
        ids.push_back(t.id);
    }
    if (ids != ckpt.task_ids) {
        throw DataError("dataset does not match the checkpoint's task registry");
    }

    SystemState system;
    system.config = engine;
    system.tasks = std::move(tasks);
    system.unlearned = ckpt.unlearned;
    system.groups = ckpt.groups;
    system.ledger = ckpt.ledger;
    for (std::size_t gi = 0; gi < system.groups.size(); ++gi) {
        for (TaskId id : system.groups[gi].members) {
            if (!system.assignment.emplace(id, gi).second) {
                throw DataError("corrupt checkpoint: task " + std::to_string(id) + " in two groups");
            }
        }
        if (system.groups[gi].merged.size() != engine.model.param_count()) {
            throw DataError("corrupt checkpoint: accumulator length does not match the model");
        }
    }
    if (system.assignment.size() != system.tasks.size()) {
        throw DataError("corrupt checkpoint: group membership does not cover the registry");
    }
    system.base = init_params(engine.model, engine.base_seed);
    if (uses_sift(engine.method.tag)) {
        system.signs = gen_sign_vector(engine.sign_seed, engine.model.param_count());
    }
    return system;
}

}  // namespace siftmasks
