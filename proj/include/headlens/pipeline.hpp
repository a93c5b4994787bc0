#pragma once

#include <string>
#include <vector>

#include "headlens/adapt.hpp"
#include "headlens/intervene.hpp"
#include "headlens/train.hpp"

namespace headlens::pipeline {

// Full experiment manifest. Flag overrides win over the config file; every
// artifact embeds this config's fingerprint.
struct RunConfig {
    uint64_t seed = 7;

    // languages / registry
    int n_languages = 5;
    int vocab_size = 512;
    int answer_range_size = 64;
    double dominant_mix_weight = 0.6;
    int dominant_language = 0;

    // corpora
    int train_sequences_total = 32000;  // split by mix weight
    int eval_sequences = 64;
    int seq_len = 64;
    int prompt_count = 40;
    int prompt_len = 8;

    nn::ModelConfig model;
    nn::TrainConfig train;

    // selection fractions
    double specific_fraction = 0.02;
    std::vector<double> general_sweep = {0.05, 0.10, 0.20};
    std::vector<double> suppress_fractions = {0.01, 0.05};

    // interventions
    std::vector<double> gate_sweep = {0.0, 2.0, 3.0, 5.0};
    std::vector<std::pair<int, int>> conflict_pairs = {{1, 2}, {2, 3}, {3, 4}};
    int conflict_probes = 450;
    int offtarget_gen_tokens = 32;

    // adaptation
    int adapt_train_samples = 200;
    int adapt_test_samples = 200;
    int adapt_epochs = 2;
    double adapt_lr = 0.05;
    int adapt_random_masks = 5;

    int random_sets = 20;  // random-baseline pool size for PPL comparisons

    void validate() const;
    std::string fingerprint() const;
    std::string to_json_string() const;
    static RunConfig from_json_string(const std::string &text);
    static RunConfig from_json_file(const std::string &path);
};

// Stage entry points (each reads its inputs from and writes its artifacts to
// `dir`). `pipeline` runs them all in order.
void stage_corpus(const RunConfig &cfg, const std::string &dir);
void stage_train(const RunConfig &cfg, const std::string &dir);
void stage_score(const RunConfig &cfg, const std::string &dir);
void stage_heads(const RunConfig &cfg, const std::string &dir);
void stage_eval(const RunConfig &cfg, const std::string &dir);
void stage_adapt(const RunConfig &cfg, const std::string &dir);
void stage_export(const RunConfig &cfg, const std::string &dir);
void stage_summary(const RunConfig &cfg, const std::string &dir);

void run_pipeline(const RunConfig &cfg, const std::string &dir);

// artifact path helpers
std::string registry_path(const std::string &dir);
std::string train_corpus_path(const std::string &dir, int lang);
std::string eval_corpus_path(const std::string &dir, int lang);
std::string prompts_path(const std::string &dir, int lang);
std::string checkpoint_path(const std::string &dir);
std::string matrix_path(const std::string &dir, const std::string &kind, int lang);
std::string headset_path(const std::string &dir, const std::string &name);

}  // namespace headlens::pipeline
