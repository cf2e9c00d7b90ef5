#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "siftmasks/bits.hpp"
#include "siftmasks/param_vector.hpp"
#include "siftmasks/tasks.hpp"

namespace siftmasks {

enum class ModelKind { logistic, mlp };

std::string_view to_string(ModelKind kind) noexcept;
ModelKind model_kind_from_string(std::string_view name);

/// Small dense classifier. Parameter layout (row-major):
///   logistic: W[C x d], b[C]
///   mlp:      W1[h x d], b1[h], W2[C x h], b2[C]   (tanh hidden layer)
struct ModelSpec {
    ModelKind kind = ModelKind::logistic;
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;
    std::size_t num_classes = 0;

    std::size_t param_count() const noexcept;
    void validate() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct TrainConfig {
    int steps = 20;
    std::size_t batch_size = 64;
    double learning_rate = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Adam moments. Kept in double; t counts completed steps.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;

    AdamState() = default;
    explicit AdamState(std::size_t size) : m(size, 0.0), v(size, 0.0) {}
};

/// tau_t = M_t - M_0 for one task.
struct TaskVector {
    ParamVector delta;
    TaskId source_task = 0;
    int steps_used = 0;
};

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

/// Deterministic Gaussian init, weights scaled by 1/sqrt(fan_in), biases zero.
ParamVector init_params(const ModelSpec& spec, std::uint64_t seed);

/// Mean softmax cross-entropy over the batch and its analytic gradient.
/// Accumulation runs sequentially over the batch, then over entries.
LossGrad loss_and_grad(std::span<const float> params, const ModelSpec& spec,
                       std::span<const Example* const> batch);

/// Loss only, evaluated at double-precision parameters.
double loss_at(std::span<const double> params, const ModelSpec& spec,
               std::span<const Example* const> batch);

/// Class logits for one input.
std::vector<double> forward(std::span<const float> params, const ModelSpec& spec,
                            std::span<const float> features);

int predict(std::span<const float> params, const ModelSpec& spec, std::span<const float> features);

/// Fraction of examples classified correctly; 0 for an empty set.
double accuracy(std::span<const float> params, const ModelSpec& spec,
                std::span<const Example* const> examples);

/// One Adam update with bias correction, in place.
/// Throws DataError on a non-finite gradient entry.
void adam_step(ParamVector& params, std::span<const double> grad, AdamState& state,
               const TrainConfig& cfg);

/// Entry i zeroed where tau[i] * v[i] < 0.
ParamVector project_sign(const ParamVector& tau, const SignVector& signs);
void project_sign_inplace(ParamVector& tau, const SignVector& signs);

/// 1{tau * v > 0}.
BitMask sign_mask(const ParamVector& tau, const SignVector& signs);

/// Seed of the batch-sampling stream for a task: mix(cfg.seed, task id).
std::uint64_t task_stream_seed(const TrainConfig& cfg, TaskId id) noexcept;

/// Adam on tau (starting from zero) for cfg.steps steps over `train`,
/// batches drawn from PrngStream(stream_seed). When `signs` is non-null the
/// sign projection is applied after every step. Returns tau.
ParamVector finetune_delta(std::span<const Example* const> train, const ParamVector& base,
                           const ModelSpec& spec, const TrainConfig& cfg, std::uint64_t stream_seed,
                           const SignVector* signs = nullptr);

/// Plain finetuning (FT). Pure function of its arguments.
TaskVector ft_finetune(const TaskSpec& task, const ParamVector& base, const ModelSpec& spec,
                       const TrainConfig& cfg);

struct SiftResult {
    TaskVector tau;
    BitMask mask;
};

/// Sign-fixed finetuning. Every returned entry satisfies tau[i] * v[i] >= 0
/// and the mask's set bits are exactly tau's nonzero support.
SiftResult sift_finetune(const TaskSpec& task, const ParamVector& base, const ModelSpec& spec,
                         const SignVector& signs, const TrainConfig& cfg);

}  // namespace siftmasks
