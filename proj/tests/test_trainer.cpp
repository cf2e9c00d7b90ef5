#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "siftmasks/engine.hpp"
#include "siftmasks/errors.hpp"
#include "siftmasks/prng.hpp"
#include "siftmasks/tasks.hpp"
#include "siftmasks/trainer.hpp"

using namespace siftmasks;

namespace {

// Written from the model definition, independent of the library's forward.
double oracle_loss(const std::vector<double>& p, const ModelSpec& s, const std::vector<Example>& batch) {
    const std::size_t d = s.input_dim, c = s.num_classes, h = s.hidden_dim;
    double total = 0.0;
    for (const auto& ex : batch) {
        std::vector<double> z(c);
        if (s.kind == ModelKind::logistic) {
            for (std::size_t k = 0; k < c; ++k) {
                z[k] = p[c * d + k];
                for (std::size_t j = 0; j < d; ++j) {
                    z[k] += p[k * d + j] * ex.features[j];
                }
            }
        } else {
            std::vector<double> a(h);
            for (std::size_t u = 0; u < h; ++u) {
                double v = p[h * d + u];
                for (std::size_t j = 0; j < d; ++j) {
                    v += p[u * d + j] * ex.features[j];
                }
                a[u] = std::tanh(v);
            }
            const std::size_t w2 = h * d + h;
            for (std::size_t k = 0; k < c; ++k) {
                z[k] = p[w2 + c * h + k];
                for (std::size_t u = 0; u < h; ++u) {
                    z[k] += p[w2 + k * h + u] * a[u];
                }
            }
        }
        double m = z[0];
        for (double v : z) m = std::max(m, v);
        double se = 0.0;
        for (double v : z) se += std::exp(v - m);
        total += m + std::log(se) - z[static_cast<std::size_t>(ex.label)];
    }
    return total / static_cast<double>(batch.size());
}

std::vector<Example> random_batch(PrngStream& rng, const ModelSpec& s, std::size_t n) {
    std::vector<Example> out(n);
    for (auto& ex : out) {
        ex.features.resize(s.input_dim);
        for (auto& f : ex.features) f = static_cast<float>(rng.normal());
        ex.label = static_cast<int>(rng.below(s.num_classes));
    }
    return out;
}

std::vector<const Example*> ptrs(const std::vector<Example>& v) {
    std::vector<const Example*> out;
    for (const auto& e : v) out.push_back(&e);
    return out;
}

double max_gradcheck_error(const ModelSpec& spec, std::uint64_t seed) {
    PrngStream rng(seed);
    const ParamVector params = init_params(spec, seed);
    const auto batch = random_batch(rng, spec, 16);
    const LossGrad lg = loss_and_grad(params.view(), spec, ptrs(batch));
    std::vector<double> p(params.values().begin(), params.values().end());
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t i = rng.below(p.size());
        const double keep = p[i];
        p[i] = keep + 1e-4;
        const double up = oracle_loss(p, spec, batch);
        p[i] = keep - 1e-4;
        const double down = oracle_loss(p, spec, batch);
        p[i] = keep;
        const double numeric = (up - down) / 2e-4;
        const double denom = std::max({std::fabs(numeric), std::fabs(lg.grad[i]), 1e-3});
        worst = std::max(worst, std::fabs(numeric - lg.grad[i]) / denom);
    }
    return worst;
}

TaskSpec conflicting_task(std::size_t task, std::size_t n = 200) {
    HeterogeneityRegime r;
    return synth_generate(r, 5, n, 20, 2, 1234)[task];
}

ParamVector add(const ParamVector& a, const ParamVector& b) {
    ParamVector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

const ModelSpec kMlp{ModelKind::mlp, 20, 32, 2};

}  // namespace

TEST_CASE("param counts") {
    CHECK(ModelSpec{ModelKind::logistic, 10, 0, 3}.param_count() == 33);
    CHECK(ModelSpec{ModelKind::mlp, 10, 4, 3}.param_count() == 10 * 4 + 4 + 4 * 3 + 3);
    const ModelSpec no_hidden{ModelKind::mlp, 10, 0, 3};
    CHECK_THROWS_AS(no_hidden.validate(), ConfigError);
}

TEST_CASE("init_params is deterministic and seed-sensitive") {
    for (const ModelSpec& s : {ModelSpec{ModelKind::logistic, 10, 0, 3}, kMlp}) {
        const ParamVector a = init_params(s, 7);
        CHECK(a.size() == s.param_count());
        CHECK(a.bit_equal(init_params(s, 7)));
        CHECK_FALSE(a == init_params(s, 8));
    }
}

TEST_CASE("zero parameters give loss ln C") {
    PrngStream rng(1);
    for (std::size_t c : {2u, 3u, 7u}) {
        const ModelSpec s{ModelKind::logistic, 5, 0, c};
        const auto batch = random_batch(rng, s, 9);
        const ParamVector zero(s.param_count());
        CHECK(loss_and_grad(zero.view(), s, ptrs(batch)).loss == doctest::Approx(std::log(double(c))).epsilon(1e-12));
    }
}

TEST_CASE("analytic gradient matches central differences") {
    CHECK(max_gradcheck_error(ModelSpec{ModelKind::logistic, 10, 0, 3}, 21) <= 1e-4);
    CHECK(max_gradcheck_error(ModelSpec{ModelKind::mlp, 10, 8, 3}, 22) <= 1e-4);
}

TEST_CASE("single-example logistic gradient is (softmax - onehot) x") {
    const ModelSpec s{ModelKind::logistic, 4, 0, 3};
    PrngStream rng(3);
    const ParamVector p = init_params(s, 3);
    const auto batch = random_batch(rng, s, 1);
    const LossGrad lg = loss_and_grad(p.view(), s, ptrs(batch));
    std::vector<double> z(3);
    for (std::size_t k = 0; k < 3; ++k) {
        z[k] = p[12 + k];
        for (std::size_t j = 0; j < 4; ++j) z[k] += double(p[k * 4 + j]) * batch[0].features[j];
    }
    const double norm = std::exp(z[0]) + std::exp(z[1]) + std::exp(z[2]);
    for (std::size_t k = 0; k < 3; ++k) {
        const double coeff = std::exp(z[k]) / norm - (int(k) == batch[0].label ? 1.0 : 0.0);
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(lg.grad[k * 4 + j] == doctest::Approx(coeff * batch[0].features[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("loss_and_grad validates its batch") {
    const ModelSpec s{ModelKind::logistic, 3, 0, 2};
    const ParamVector p(s.param_count());
    Example bad_label{{1, 2, 3}, 2, -1};
    Example bad_dim{{1, 2}, 0, -1};
    const Example* a[] = {&bad_label};
    const Example* b[] = {&bad_dim};
    CHECK_THROWS_AS(loss_and_grad(p.view(), s, a), DataError);
    CHECK_THROWS_AS(loss_and_grad(p.view(), s, b), DataError);
    CHECK_THROWS_AS(loss_and_grad(p.view(), s, std::span<const Example* const>{}), DataError);
}

TEST_CASE("adam first step closed form") {
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    ParamVector p(1);
    AdamState st(1);
    const double g[] = {1.0};
    adam_step(p, g, st, cfg);
    CHECK(p[0] == static_cast<float>(-0.1 * (1.0 / (1.0 + 1e-8))));
    CHECK(st.t == 1);
    CHECK(st.v[0] >= 0.0);
}

TEST_CASE("adam zero gradient and non-finite gradient") {
    TrainConfig cfg;
    ParamVector p(std::vector<float>{0.5f, -2.0f});
    AdamState st(2);
    const double zero[] = {0.0, 0.0};
    adam_step(p, zero, st, cfg);
    CHECK(p == ParamVector(std::vector<float>{0.5f, -2.0f}));
    const double bad[] = {0.0, NAN};
    CHECK_THROWS_AS(adam_step(p, bad, st, cfg), DataError);
}

TEST_CASE("project_sign examples") {
    const SignVector v = gen_sign_vector(5, 3);
    ParamVector tau(3);
    // Build the documented example against whatever signs v drew.
    const float mags[] = {0.5f, 0.3f, 0.2f};
    const int want_keep[] = {1, 0, 0};
    for (std::size_t i = 0; i < 3; ++i) tau[i] = want_keep[i] ? mags[i] * v[i] : -mags[i] * v[i];
    const ParamVector out = project_sign(tau, v);
    CHECK(out[0] == tau[0]);
    CHECK(out[1] == 0.0f);
    CHECK(out[2] == 0.0f);
    CHECK(project_sign(out, v) == out);
    CHECK_THROWS_AS(project_sign(ParamVector(4), v), DataError);

    // All-positive signs clamp negatives.
    SignVector plus;
    for (std::uint64_t seed = 0;; ++seed) {
        plus = gen_sign_vector(seed, 2);
        if (plus[0] == 1 && plus[1] == 1) break;
    }
    CHECK(project_sign(ParamVector(std::vector<float>{-1, 2}), plus) == ParamVector(std::vector<float>{0, 2}));
}

TEST_CASE("zero steps give a zero task vector and an empty mask") {
    const TaskSpec task = conflicting_task(0);
    const ParamVector base = init_params(kMlp, 1);
    TrainConfig cfg;
    cfg.steps = 0;
    const TaskVector tv = ft_finetune(task, base, kMlp, cfg);
    CHECK(tv.delta.bit_equal(ParamVector(kMlp.param_count())));
    const SignVector v = gen_sign_vector(2, kMlp.param_count());
    const SiftResult r = sift_finetune(task, base, kMlp, v, cfg);
    CHECK(r.tau.delta.bit_equal(ParamVector(kMlp.param_count())));
    CHECK(r.mask.popcount() == 0);
}

TEST_CASE("finetuning replays bit-identically, also under concurrency") {
    HeterogeneityRegime r;
    const auto tasks = synth_generate(r, 6, 100, 20, 2, 9);
    const ParamVector base = init_params(kMlp, 1);
    const SignVector v = gen_sign_vector(2, kMlp.param_count());
    TrainConfig cfg;
    cfg.seed = 77;
    std::vector<ParamVector> serial, parallel(tasks.size());
    for (const auto& t : tasks) serial.push_back(sift_finetune(t, base, kMlp, v, cfg).tau.delta);
    parallel_for(tasks.size(), 4, [&](std::size_t i) { parallel[i] = sift_finetune(tasks[i], base, kMlp, v, cfg).tau.delta; });
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        CHECK(serial[i].bit_equal(parallel[i]));
        CHECK(ft_finetune(tasks[i], base, kMlp, cfg).delta.bit_equal(ft_finetune(tasks[i], base, kMlp, cfg).delta));
    }
}

TEST_CASE("finetuning reduces the training loss on a separable task") {
    HeterogeneityRegime r;
    r.kind = RegimeKind::similar;
    const TaskSpec task = synth_generate(r, 1, 200, 20, 2, 4)[0];
    const ModelSpec s{ModelKind::logistic, 20, 0, 2};
    const ParamVector base = init_params(s, 1);
    TrainConfig cfg;
    const TaskVector tv = ft_finetune(task, base, s, cfg);
    const auto train = task.train_examples();
    const double before = loss_and_grad(base.view(), s, train).loss;
    const double after = loss_and_grad(add(base, tv.delta).view(), s, train).loss;
    CHECK(after < before);
}

TEST_CASE("sift output is sign-feasible and its mask is its support") {
    const ParamVector base = init_params(kMlp, 1);
    const SignVector v = gen_sign_vector(2, kMlp.param_count());
    TrainConfig cfg;
    for (std::size_t t = 0; t < 5; ++t) {
        const SiftResult r = sift_finetune(conflicting_task(t), base, kMlp, v, cfg);
        bool ok = true;
        for (std::size_t i = 0; i < r.tau.delta.size(); ++i) {
            ok = ok && double(r.tau.delta[i]) * v[i] >= 0.0;
            ok = ok && r.mask.test(i) == (r.tau.delta[i] != 0.0f);
        }
        CHECK(ok);
        CHECK(r.mask.popcount() > 0);
    }
}

TEST_CASE("sift training accuracy stays within 5 points of plain finetuning") {
    const ParamVector base = init_params(kMlp, 1);
    const SignVector v = gen_sign_vector(2, kMlp.param_count());
    TrainConfig cfg;
    cfg.seed = 3;
    double ft = 0.0, sift = 0.0;
    for (std::size_t t = 0; t < 5; ++t) {
        const TaskSpec task = conflicting_task(t);
        const auto train = task.train_examples();
        ft += accuracy(add(base, ft_finetune(task, base, kMlp, cfg).delta).view(), kMlp, train);
        sift += accuracy(add(base, sift_finetune(task, base, kMlp, v, cfg).tau.delta).view(), kMlp, train);
    }
    CHECK(sift / 5 >= ft / 5 - 0.05);
}

TEST_CASE("empty datasets are rejected") {
    TaskSpec empty;
    empty.id = 3;
    const ModelSpec s{ModelKind::logistic, 2, 0, 2};
    CHECK_THROWS_AS(ft_finetune(empty, ParamVector(s.param_count()), s, TrainConfig{}), DataError);
    TrainConfig bad;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
