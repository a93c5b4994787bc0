#pragma once

#include <string>
#include <vector>

#include "headlens/headsets.hpp"
#include "headlens/model.hpp"

namespace headlens::adapt {

// Trainable n_layers x n_heads head mask. Only the entries on the selected
// head set are trainable; every other entry stays exactly 1 throughout.
struct LanguageHeadMask {
    std::string label;
    int n_layers = 0;
    int n_heads = 0;
    std::vector<double> values;       // init 1
    std::vector<uint8_t> trainable;   // flags
    std::vector<std::string> headset_provenance;
    int epochs = 0;
    double lr = 0.0;
    uint64_t seed = 0;

    double at(int l, int h) const { return values[static_cast<size_t>(l) * n_heads + h]; }
    int trainable_count() const;
    nn::GateMatrix as_gates() const;
};

// Single-language in-context recall task with disjoint train/test key pools.
struct AdaptTask {
    int language_id = -1;
    std::vector<synth::RecallProbe> train;
    std::vector<synth::RecallProbe> test;
};

AdaptTask make_adapt_task(const synth::Registry &reg, int language_id, int n_train, int n_test, uint64_t seed);

LanguageHeadMask init_mask(const nn::ModelConfig &cfg, const heads::HeadSet &headset);

// Per-sample gradient descent on answer-token cross-entropy. Model weights
// are frozen; mask values are clamped at 0 after each update.
LanguageHeadMask train_mask(nn::ModelF &frozen_model, const LanguageHeadMask &mask, const AdaptTask &task,
                            int epochs, double lr, uint64_t seed);

// Share of test probes whose answer-position argmax equals the answer token.
double eval_accuracy(nn::ModelF &m, const LanguageHeadMask &mask, const std::vector<synth::RecallProbe> &test);

void save_mask_json(const LanguageHeadMask &mask, const std::string &path);
LanguageHeadMask load_mask_json(const std::string &path);

}  // namespace headlens::adapt
