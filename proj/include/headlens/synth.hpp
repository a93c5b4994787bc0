#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headlens/common.hpp"

namespace headlens::synth {

// A synthetic language: a disjoint content-token range plus a bigram grammar
// over content + shared function tokens. The first content token doubles as
// the language's fact marker and never occurs as a chain successor.
struct LanguageSpec {
    int id = 0;
    int content_begin = 0;
    int content_end = 0;  // half-open
    std::vector<int> shared_tokens;
    double mix_weight = 0.0;
    // Row-stochastic transitions over the alphabet content_range followed by
    // shared_tokens (row/col order = alphabet order).
    std::vector<std::vector<double>> bigram;

    int content_size() const { return content_end - content_begin; }
    int fact_marker() const { return content_begin; }
    int alphabet_size() const { return content_size() + static_cast<int>(shared_tokens.size()); }

    int alphabet_token(int idx) const {
        return idx < content_size() ? content_begin + idx
                                    : shared_tokens[static_cast<size_t>(idx - content_size())];
    }
    // -1 when the token is not in this language's alphabet.
    int alphabet_index(int token) const;
};

struct Registry {
    uint64_t seed = 0;
    int vocab_size = 0;
    int answer_begin = 0, answer_end = 0;
    int key_begin = 0, key_end = 0;  // neutral key tokens (queries only)
    int query_marker = 0;
    std::vector<LanguageSpec> languages;

    int n_languages() const { return static_cast<int>(languages.size()); }
    int key_count() const { return key_end - key_begin; }
    bool is_content_token(int t) const;
    // Language owning a content token, or -1.
    int content_language(int t) const;
    // The language-c surface token for a neutral key: facts state keys in the
    // language's own tokens; only queries use the neutral key range.
    int key_surface(int language_id, int key) const {
        return languages[static_cast<size_t>(language_id)].content_begin + 1 + (key - key_begin);
    }
};

struct Corpus {
    int language_id = 0;
    uint64_t seed = 0;
    int seq_len = 0;
    std::vector<std::vector<int>> sequences;
};

// Conflicting-fact probe: the same key is asserted with two different values,
// first in language A, then (closer to the query) in language B.
struct ProbeInstance {
    int lang_a = 0, lang_b = 0;
    int key = 0;
    int v1 = 0, v2 = 0;
    std::vector<int> context1_tokens;
    std::vector<int> filler_tokens;
    std::vector<int> context2_tokens;
    std::vector<int> query_tokens;

    std::vector<int> full_tokens() const;
};

// Single-language recall probe with one distractor fact; used for the mask
// adaptation task and generation-free accuracy measurements.
struct RecallProbe {
    int language_id = 0;
    int key = 0;
    int answer = 0;
    std::vector<int> tokens;  // query key is the final token
};

struct Classification {
    int language_id = 0;
    double confidence = 0.0;
};

Registry make_registry(int n_languages, int vocab_size, int answer_range_size, uint64_t seed,
                       double dominant_mix_weight = 0.6);

Corpus sample_corpus(const Registry &reg, int language_id, int n_sequences, int seq_len, uint64_t seed);

std::vector<ProbeInstance> make_probe_set(const Registry &reg, int lang_a, int lang_b, int n, uint64_t seed);

// key_parity selects a disjoint key pool (0 or 1) so train/test splits cannot
// share probes.
std::vector<RecallProbe> make_recall_probes(const Registry &reg, int language_id, int n, uint64_t seed,
                                            int key_parity);

// Plain grammar-chain prefixes without recall episodes.
std::vector<std::vector<int>> make_prompts(const Registry &reg, int language_id, int n, int len, uint64_t seed);

// Token-range majority vote over content tokens; empty evidence yields
// nullopt ("indeterminate").
std::optional<Classification> classify_sequence_language(std::span<const int> tokens, const Registry &reg);

// Mean log-likelihood per transition of `tokens` under the language's true
// bigram grammar; out-of-grammar transitions score log(floor).
double grammar_mean_log_likelihood(const Registry &reg, int language_id, std::span<const int> tokens);

// ---- file formats ----------------------------------------------------------

void save_corpus(const Corpus &c, const std::string &path, const std::string &registry_fingerprint);
Corpus load_corpus(const std::string &path);

void save_registry(const Registry &reg, const std::string &path);
Registry load_registry(const std::string &path);

std::string registry_fingerprint(const Registry &reg);
std::string corpus_fingerprint(const Corpus &c);

}  // namespace headlens::synth
