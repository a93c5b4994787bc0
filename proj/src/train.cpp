#include "headlens/train.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "headlens/checkpoint.hpp"

namespace headlens::nn {

namespace {

struct AdamState {
    std::vector<std::vector<float>> m1, m2;

    explicit AdamState(ModelF &model) {
        for (auto *p : model.parameters()) {
            m1.emplace_back(p->value.data.size(), 0.0f);
            m2.emplace_back(p->value.data.size(), 0.0f);
        }
    }
};

float lr_at(const TrainConfig &tc, int step) {
    if (tc.warmup_steps > 0 && step < tc.warmup_steps) {
        return tc.lr * static_cast<float>(step + 1) / static_cast<float>(tc.warmup_steps);
    }
    const float t = tc.steps <= tc.warmup_steps
                        ? 1.0f
                        : static_cast<float>(step - tc.warmup_steps) / static_cast<float>(tc.steps - tc.warmup_steps);
    const float cosine = 0.5f * (1.0f + std::cos(3.14159265358979323846f * t));
    return tc.lr * (tc.final_lr_frac + (1.0f - tc.final_lr_frac) * cosine);
}

}  // namespace

ModelF train_model(const ModelConfig &cfg, const std::vector<std::vector<int>> &sequences,
                   const TrainConfig &tc, TrainResult *result) {
    check_contract(!sequences.empty(), "train_model: empty corpus");
    ModelF model = init_model(cfg);
    if (tc.steps == 0) {
        if (result != nullptr) result->loss_curve.clear();
        return model;
    }

    AdamState adam(model);
    auto params = model.parameters();
    DetRng rng(derive_seed(tc.seed, "train"));

    std::vector<size_t> order(sequences.size());
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order);
    size_t cursor = 0;
    auto next_batch = [&] {
        std::vector<const std::vector<int> *> batch;
        batch.reserve(static_cast<size_t>(tc.batch_size));
        for (int b = 0; b < tc.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(&sequences[order[cursor++]]);
        }
        return batch;
    };

    const float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    for (int step = 0; step < tc.steps; ++step) {
        const auto batch = next_batch();
        model.zero_grads();
        float batch_loss = 0.0f;
        for (const auto *seq : batch) {
            const auto targets = lm_targets<float>(*seq);
            auto g = build_sequence_graph<float>(model, nullptr, nullptr, *seq, &targets, {.with_grads = true});
            batch_loss += g.tape.value(g.loss).scalar();
            g.tape.backward(g.loss, 1.0f / static_cast<float>(batch.size()));
            pass_counters().sequence_forwards.fetch_add(1);
            pass_counters().sequence_backwards.fetch_add(1);
        }
        batch_loss /= static_cast<float>(batch.size());
        if (!std::isfinite(batch_loss)) {
            throw NumericError("train_model: loss diverged (non-finite) at step " + std::to_string(step));
        }
        if (result != nullptr && (step % tc.log_every == 0 || step == tc.steps - 1)) {
            result->loss_curve.emplace_back(step, batch_loss);
        }
        if (tc.verbose && step % tc.log_every == 0) {
            std::fprintf(stderr, "step %5d  loss %.4f  lr %.2e\n", step, batch_loss, lr_at(tc, step));
        }

        // global grad-norm clip
        double norm_sq = 0.0;
        for (auto *p : params) {
            for (float gv : p->grad.data) norm_sq += static_cast<double>(gv) * gv;
        }
        const float norm = static_cast<float>(std::sqrt(norm_sq));
        const float clip_scale = (tc.clip_norm > 0.0f && norm > tc.clip_norm) ? tc.clip_norm / norm : 1.0f;

        const float lr = lr_at(tc, step);
        const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(step + 1));
        const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(step + 1));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            auto &p = *params[pi];
            if (!p.trainable) continue;
            auto &m1 = adam.m1[pi];
            auto &m2 = adam.m2[pi];
            for (size_t i = 0; i < p.value.data.size(); ++i) {
                const float gv = p.grad.data[i] * clip_scale;
                m1[i] = beta1 * m1[i] + (1.0f - beta1) * gv;
                m2[i] = beta2 * m2[i] + (1.0f - beta2) * gv * gv;
                const float mhat = m1[i] / bc1;
                const float vhat = m2[i] / bc2;
                p.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }

        if (tc.checkpoint_every > 0 && !tc.checkpoint_dir.empty() && (step + 1) % tc.checkpoint_every == 0) {
            save_checkpoint(model, tc.checkpoint_dir + "/ckpt_step" + std::to_string(step + 1) + ".bin");
        }
    }
    return model;
}

}  // namespace headlens::nn
