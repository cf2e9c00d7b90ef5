#include "siftmasks/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "siftmasks/errors.hpp"
#include "siftmasks/prng.hpp"

namespace siftmasks {

namespace {

void check_batch(const ModelSpec& spec, std::span<const Example* const> batch) {
    if (batch.empty()) {
        throw DataError("empty batch");
    }
    for (const Example* ex : batch) {
        if (ex->features.size() != spec.input_dim) {
            throw DataError("feature dimension " + std::to_string(ex->features.size()) +
                            " does not match model input_dim " + std::to_string(spec.input_dim));
        }
        if (ex->label < 0 || static_cast<std::size_t>(ex->label) >= spec.num_classes) {
            throw DataError("label " + std::to_string(ex->label) + " out of range [0, " +
                            std::to_string(spec.num_classes) + ")");
        }
    }
}

// Writes logits into `logits`; for the mlp also leaves activations in `hidden`.
template <class P>
void forward_into(const P* p, const ModelSpec& spec, std::span<const float> x,
                  std::vector<double>& hidden, std::vector<double>& logits) {
    const std::size_t d = spec.input_dim;
    const std::size_t c = spec.num_classes;
    logits.assign(c, 0.0);
    if (spec.kind == ModelKind::logistic) {
        const P* w = p;
        const P* b = p + c * d;
        for (std::size_t k = 0; k < c; ++k) {
            double s = static_cast<double>(b[k]);
            for (std::size_t j = 0; j < d; ++j) {
                s += static_cast<double>(w[k * d + j]) * static_cast<double>(x[j]);
            }
            logits[k] = s;
        }
        return;
    }
    const std::size_t h = spec.hidden_dim;
    const P* w1 = p;
    const P* b1 = w1 + h * d;
    const P* w2 = b1 + h;
    const P* b2 = w2 + c * h;
    hidden.assign(h, 0.0);
    for (std::size_t u = 0; u < h; ++u) {
        double s = static_cast<double>(b1[u]);
        for (std::size_t j = 0; j < d; ++j) {
            s += static_cast<double>(w1[u * d + j]) * static_cast<double>(x[j]);
        }
        hidden[u] = std::tanh(s);
    }
    for (std::size_t k = 0; k < c; ++k) {
        double s = static_cast<double>(b2[k]);
        for (std::size_t u = 0; u < h; ++u) {
            s += static_cast<double>(w2[k * h + u]) * hidden[u];
        }
        logits[k] = s;
    }
}

// In place: logits -> softmax probabilities. Returns -log p[label].
double softmax_nll(std::vector<double>& z, int label) {
    const double top = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double& v : z) {
        v = std::exp(v - top);
        total += v;
    }
    const double log_norm = std::log(total);
    const double picked = std::log(z[static_cast<std::size_t>(label)]) - log_norm;
    for (double& v : z) {
        v /= total;
    }
    return -picked;
}

std::vector<const Example*> sample_batch(std::span<const Example* const> train, std::size_t batch_size,
                                         PrngStream& rng) {
    if (train.size() < batch_size) {
        return {train.begin(), train.end()};
    }
    std::vector<const Example*> batch(batch_size);
    for (auto& slot : batch) {
        slot = train[rng.below(train.size())];
    }
    return batch;
}

}  // namespace

std::string_view to_string(ModelKind kind) noexcept {
    return kind == ModelKind::mlp ? "mlp" : "logistic";
}

ModelKind model_kind_from_string(std::string_view name) {
    if (name == "logistic") {
        return ModelKind::logistic;
    }
    if (name == "mlp") {
        return ModelKind::mlp;
    }
    throw ConfigError("unknown model kind '" + std::string(name) + "' (valid: logistic, mlp)");
}

std::size_t ModelSpec::param_count() const noexcept {
    const std::size_t d = input_dim;
    const std::size_t c = num_classes;
    if (kind == ModelKind::logistic) {
        return d * c + c;
    }
    const std::size_t h = hidden_dim;
    return d * h + h + h * c + c;
}

void ModelSpec::validate() const {
    if (input_dim == 0 || num_classes == 0) {
        throw ConfigError("model needs input_dim >= 1 and num_classes >= 1");
    }
    if (kind == ModelKind::mlp && hidden_dim == 0) {
        throw ConfigError("mlp needs hidden_dim >= 1");
    }
}

void TrainConfig::validate() const {
    if (steps < 0) {
        throw ConfigError("steps must be >= 0");
    }
    if (batch_size < 1) {
        throw ConfigError("batch_size must be >= 1");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be positive");
    }
}

ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    PrngStream rng(seed);
    ParamVector p(spec.param_count());
    auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < count; ++i) {
            p[offset + i] = static_cast<float>(rng.normal() * scale);
        }
    };
    const std::size_t d = spec.input_dim;
    const std::size_t c = spec.num_classes;
    if (spec.kind == ModelKind::logistic) {
        fill(0, c * d, d);
    } else {
        const std::size_t h = spec.hidden_dim;
        fill(0, h * d, d);
        fill(h * d + h, c * h, h);
    }
    return p;
}

LossGrad loss_and_grad(std::span<const float> params, const ModelSpec& spec,
                       std::span<const Example* const> batch) {
    if (params.size() != spec.param_count()) {
        throw DataError("parameter count " + std::to_string(params.size()) + " does not match model (" +
                        std::to_string(spec.param_count()) + ")");
    }
    check_batch(spec, batch);
    const std::size_t d = spec.input_dim;
    const std::size_t c = spec.num_classes;
    const std::size_t h = spec.hidden_dim;
    LossGrad out;
    out.grad.assign(params.size(), 0.0);
    std::vector<double> hidden;
    std::vector<double> probs;
    std::vector<double> dhidden;
    double total = 0.0;
    for (const Example* ex : batch) {
        forward_into(params.data(), spec, ex->features, hidden, probs);
        total += softmax_nll(probs, ex->label);
        probs[static_cast<std::size_t>(ex->label)] -= 1.0;  // dL/dlogits
        const auto& x = ex->features;
        if (spec.kind == ModelKind::logistic) {
            double* gw = out.grad.data();
            double* gb = gw + c * d;
            for (std::size_t k = 0; k < c; ++k) {
                for (std::size_t j = 0; j < d; ++j) {
                    gw[k * d + j] += probs[k] * static_cast<double>(x[j]);
                }
                gb[k] += probs[k];
            }
            continue;
        }
        double* gw1 = out.grad.data();
        double* gb1 = gw1 + h * d;
        double* gw2 = gb1 + h;
        double* gb2 = gw2 + c * h;
        const float* w2 = params.data() + h * d + h;
        dhidden.assign(h, 0.0);
        for (std::size_t k = 0; k < c; ++k) {
            for (std::size_t u = 0; u < h; ++u) {
                gw2[k * h + u] += probs[k] * hidden[u];
                dhidden[u] += probs[k] * static_cast<double>(w2[k * h + u]);
            }
            gb2[k] += probs[k];
        }
        for (std::size_t u = 0; u < h; ++u) {
            const double da = dhidden[u] * (1.0 - hidden[u] * hidden[u]);
            for (std::size_t j = 0; j < d; ++j) {
                gw1[u * d + j] += da * static_cast<double>(x[j]);
            }
            gb1[u] += da;
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.loss = total * inv;
    for (double& g : out.grad) {
        g *= inv;
    }
    return out;
}

double loss_at(std::span<const double> params, const ModelSpec& spec,
               std::span<const Example* const> batch) {
    if (params.size() != spec.param_count()) {
        throw DataError("parameter count does not match model");
    }
    check_batch(spec, batch);
    std::vector<double> hidden;
    std::vector<double> logits;
    double total = 0.0;
    for (const Example* ex : batch) {
        forward_into(params.data(), spec, ex->features, hidden, logits);
        total += softmax_nll(logits, ex->label);
    }
    return total / static_cast<double>(batch.size());
}

std::vector<double> forward(std::span<const float> params, const ModelSpec& spec,
                            std::span<const float> features) {
    if (params.size() != spec.param_count() || features.size() != spec.input_dim) {
        throw DataError("forward: shape mismatch");
    }
    std::vector<double> hidden;
    std::vector<double> logits;
    forward_into(params.data(), spec, features, hidden, logits);
    return logits;
}

int predict(std::span<const float> params, const ModelSpec& spec, std::span<const float> features) {
    const std::vector<double> logits = forward(params, spec, features);
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double accuracy(std::span<const float> params, const ModelSpec& spec,
                std::span<const Example* const> examples) {
    if (examples.empty()) {
        return 0.0;
    }
    std::size_t correct = 0;
    for (const Example* ex : examples) {
        correct += predict(params, spec, ex->features) == ex->label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

void adam_step(ParamVector& params, std::span<const double> grad, AdamState& state,
               const TrainConfig& cfg) {
    const std::size_t n = params.size();
    if (grad.size() != n || state.m.size() != n || state.v.size() != n) {
        throw DataError("adam_step: length mismatch");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(grad[i])) {
            throw DataError("non-finite gradient at entry " + std::to_string(i));
        }
    }
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double bias1 = 1.0 - std::pow(cfg.beta1, t);
    const double bias2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m[i] / bias1;
        const double v_hat = state.v[i] / bias2;
        const double updated = static_cast<double>(params[i]) -
                               cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
        params[i] = static_cast<float>(updated);
    }
}

void project_sign_inplace(ParamVector& tau, const SignVector& signs) {
    if (tau.size() != signs.size()) {
        throw DataError("sign projection: length mismatch " + std::to_string(tau.size()) + " vs " +
                        std::to_string(signs.size()));
    }
    for (std::size_t i = 0; i < tau.size(); ++i) {
        if (static_cast<double>(tau[i]) * signs[i] < 0.0) {
            tau[i] = 0.0f;
        }
    }
}

ParamVector project_sign(const ParamVector& tau, const SignVector& signs) {
    ParamVector out = tau;
    project_sign_inplace(out, signs);
    return out;
}

BitMask sign_mask(const ParamVector& tau, const SignVector& signs) {
    if (tau.size() != signs.size()) {
        throw DataError("sign mask: length mismatch");
    }
    BitMask mask(tau.size());
    for (std::size_t i = 0; i < tau.size(); ++i) {
        if (static_cast<double>(tau[i]) * signs[i] > 0.0) {
            mask.set(i, true);
        }
    }
    return mask;
}

std::uint64_t task_stream_seed(const TrainConfig& cfg, TaskId id) noexcept {
    return derive_seed(cfg.seed, static_cast<std::uint64_t>(id));
}

ParamVector finetune_delta(std::span<const Example* const> train, const ParamVector& base,
                           const ModelSpec& spec, const TrainConfig& cfg, std::uint64_t stream_seed,
                           const SignVector* signs) {
    cfg.validate();
    if (train.empty()) {
        throw DataError("cannot finetune on an empty dataset");
    }
    const std::size_t n = spec.param_count();
    if (base.size() != n) {
        throw DataError("base model has " + std::to_string(base.size()) + " parameters, model expects " +
                        std::to_string(n));
    }
    if (signs != nullptr && signs->size() != n) {
        throw DataError("sign vector length does not match the model");
    }
    ParamVector tau(n);
    AdamState state(n);
    PrngStream rng(stream_seed);
    std::vector<float> current(n);
    for (int step = 0; step < cfg.steps; ++step) {
        const std::vector<const Example*> batch = sample_batch(train, cfg.batch_size, rng);
        for (std::size_t i = 0; i < n; ++i) {
            current[i] = base[i] + tau[i];
        }
        const LossGrad lg = loss_and_grad(current, spec, batch);
        adam_step(tau, lg.grad, state, cfg);
        if (signs != nullptr) {
            project_sign_inplace(tau, *signs);
        }
    }
    if (signs != nullptr) {
        project_sign_inplace(tau, *signs);
    }
    tau.check_finite();
    return tau;
}

TaskVector ft_finetune(const TaskSpec& task, const ParamVector& base, const ModelSpec& spec,
                       const TrainConfig& cfg) {
    const std::vector<const Example*> train = task.train_examples();
    if (train.empty()) {
        throw DataError("task " + std::to_string(task.id) + " has no training examples");
    }
    return TaskVector{finetune_delta(train, base, spec, cfg, task_stream_seed(cfg, task.id)), task.id,
                      cfg.steps};
}

SiftResult sift_finetune(const TaskSpec& task, const ParamVector& base, const ModelSpec& spec,
                         const SignVector& signs, const TrainConfig& cfg) {
    if (signs.size() != spec.param_count()) {
        throw DataError("sign vector length " + std::to_string(signs.size()) + " does not match model (" +
                        std::to_string(spec.param_count()) + ")");
    }
    const std::vector<const Example*> train = task.train_examples();
    if (train.empty()) {
        throw DataError("task " + std::to_string(task.id) + " has no training examples");
    }
    ParamVector tau = finetune_delta(train, base, spec, cfg, task_stream_seed(cfg, task.id), &signs);
    BitMask mask = sign_mask(tau, signs);
    return SiftResult{TaskVector{std::move(tau), task.id, cfg.steps}, std::move(mask)};
}

}  // namespace siftmasks
