#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "headlens/model.hpp"

namespace headlens::nn {

struct TrainConfig {
    int steps = 2000;
    int batch_size = 8;
    float lr = 3e-4f;
    float final_lr_frac = 0.1f;  // cosine decay floor
    int warmup_steps = 50;
    float clip_norm = 1.0f;
    uint64_t seed = 1;
    int log_every = 100;
    int checkpoint_every = 0;  // 0 = none; final checkpoint is the caller's job
    std::string checkpoint_dir;
    bool verbose = false;
};

struct TrainResult {
    // (step, mean batch loss); entry 0 is the pre-update loss at step 0.
    std::vector<std::pair<int, float>> loss_curve;
};

// Adam with cosine decay and global-norm clipping. Deterministic for a fixed
// seed: single-threaded, fixed batch order, fixed reduction order.
ModelF train_model(const ModelConfig &cfg, const std::vector<std::vector<int>> &sequences,
                   const TrainConfig &tc, TrainResult *result = nullptr);

}  // namespace headlens::nn
