#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "headlens/headid.hpp"
#include "headlens/model.hpp"

namespace headlens::lahis {

enum class ScoreKind { Exact, Taylor, Lahis, Wneg };

inline const char *score_kind_name(ScoreKind k) {
    switch (k) {
        case ScoreKind::Exact: return "exact";
        case ScoreKind::Taylor: return "taylor";
        case ScoreKind::Lahis: return "lahis";
        case ScoreKind::Wneg: return "wneg";
    }
    return "?";
}

struct ImportanceMatrix {
    int language_id = -1;
    ScoreKind kind = ScoreKind::Exact;
    int n_layers = 0;
    int n_heads = 0;
    std::vector<double> scores;
    int n_samples = 0;
    std::string corpus_fingerprint;

    ImportanceMatrix() = default;
    ImportanceMatrix(int lang, ScoreKind k, int nl, int nh)
        : language_id(lang), kind(k), n_layers(nl), n_heads(nh),
          scores(static_cast<size_t>(nl) * nh, 0.0) {}

    double at(int l, int h) const { return scores[static_cast<size_t>(l) * n_heads + h]; }
    double &at(int l, int h) { return scores[static_cast<size_t>(l) * n_heads + h]; }
};

struct NegFractionMatrix {
    int language_id = -1;
    int n_layers = 0;
    int n_heads = 0;
    std::vector<double> values;  // in [0,1]
    int n_samples = 0;
    std::string corpus_fingerprint;

    double at(int l, int h) const { return values[static_cast<size_t>(l) * n_heads + h]; }
};

// All-ones trainable matrix whose gradient, not value, carries the signal.
// Never touched by an optimizer; scoring reads the per-entry gradients only.
template <typename S>
struct SoftHeadMask {
    ad::ParameterT<S> values;

    explicit SoftHeadMask(const nn::ModelConfig &cfg)
        : values("soft_head_mask", ad::TensorT<S>({cfg.n_layers, cfg.n_heads}, S(1))) {}
};

struct LahisScores {
    ImportanceMatrix lahis;
    ImportanceMatrix taylor;
    NegFractionMatrix wneg;
};

// Brute-force oracle: entry (l,i) is the mean loss increase over the corpus
// when head (l,i) alone is deactivated (gate 0). (H+1)*S forward passes,
// zero backward passes; the baseline is computed once and reused.
template <typename S>
ImportanceMatrix exact_ablation_scores(nn::TransformerModel<S> &m, const synth::Corpus &corpus,
                                       const std::vector<heads::HeadId> *head_subset = nullptr) {
    check_contract(!corpus.sequences.empty(), "exact_ablation_scores: empty corpus");
    const nn::ModelConfig &cfg = m.config;

    const auto baseline = nn::forward_loss<S>(m, nullptr, corpus.sequences);

    std::vector<heads::HeadId> all;
    if (head_subset == nullptr) {
        for (int l = 0; l < cfg.n_layers; ++l) {
            for (int h = 0; h < cfg.n_heads; ++h) all.push_back({l, h});
        }
    } else {
        all = *head_subset;
    }

    ImportanceMatrix out(corpus.language_id, ScoreKind::Exact, cfg.n_layers, cfg.n_heads);
    out.n_samples = static_cast<int>(corpus.sequences.size());
    out.corpus_fingerprint = synth::corpus_fingerprint(corpus);
    for (const auto id : all) {
        check_contract(id.layer >= 0 && id.layer < cfg.n_layers && id.head >= 0 && id.head < cfg.n_heads,
                       "exact_ablation_scores: head id out of bounds");
        nn::GateMatrix gates = nn::GateMatrix::all_ones(cfg);
        gates.at(id.layer, id.head) = 0.0;
        const auto ablated = nn::forward_loss<S>(m, &gates, corpus.sequences);
        double delta = 0.0;
        for (size_t s = 0; s < corpus.sequences.size(); ++s) {
            delta += static_cast<double>(ablated.per_sequence[s]) - static_cast<double>(baseline.per_sequence[s]);
        }
        out.at(id.layer, id.head) = delta / static_cast<double>(corpus.sequences.size());
    }
    return out;
}

// Single-pass estimator: one forward and one backward per sequence yields the
// mask gradient for every head simultaneously. Per sequence x and head i,
//   taylor += |m_i * g_i(x)|
//   lahis  += |m_i * g_i(x)| * 1(g_i(x) < 0)
//   wneg   += 1(g_i(x) < 0)
// divided by the sequence count at the end.
template <typename S>
LahisScores lahis_scores(nn::TransformerModel<S> &m, const synth::Corpus &corpus) {
    check_contract(!corpus.sequences.empty(), "lahis_scores: empty corpus");
    const nn::ModelConfig &cfg = m.config;
    const int n_entries = cfg.n_layers * cfg.n_heads;
    const int S_count = static_cast<int>(corpus.sequences.size());

    std::vector<std::vector<double>> per_seq_grad(static_cast<size_t>(S_count));
    parallel_for_indexed(S_count, [&](int64_t s) {
        SoftHeadMask<S> mask(cfg);
        const auto &seq = corpus.sequences[static_cast<size_t>(s)];
        const auto targets = nn::lm_targets<S>(seq);
        auto g = nn::build_sequence_graph<S>(m, nullptr, &mask.values, seq, &targets);
        nn::pass_counters().sequence_forwards.fetch_add(1);
        g.tape.backward(g.loss);
        nn::pass_counters().sequence_backwards.fetch_add(1);
        std::vector<double> grads(static_cast<size_t>(n_entries));
        for (int e = 0; e < n_entries; ++e) {
            const double gv = static_cast<double>(mask.values.grad.data[static_cast<size_t>(e)]);
            if (!std::isfinite(gv)) throw NumericError("lahis_scores: non-finite mask gradient");
            // m_i is exactly 1 at initialization; keep the product anyway.
            grads[static_cast<size_t>(e)] = static_cast<double>(mask.values.value.data[static_cast<size_t>(e)]) * gv;
        }
        per_seq_grad[static_cast<size_t>(s)] = std::move(grads);
    });

    LahisScores out{ImportanceMatrix(corpus.language_id, ScoreKind::Lahis, cfg.n_layers, cfg.n_heads),
                    ImportanceMatrix(corpus.language_id, ScoreKind::Taylor, cfg.n_layers, cfg.n_heads),
                    NegFractionMatrix{}};
    out.wneg.language_id = corpus.language_id;
    out.wneg.n_layers = cfg.n_layers;
    out.wneg.n_heads = cfg.n_heads;
    out.wneg.values.assign(static_cast<size_t>(n_entries), 0.0);

    const std::string fp = synth::corpus_fingerprint(corpus);
    out.lahis.n_samples = out.taylor.n_samples = out.wneg.n_samples = S_count;
    out.lahis.corpus_fingerprint = out.taylor.corpus_fingerprint = out.wneg.corpus_fingerprint = fp;

    for (int s = 0; s < S_count; ++s) {  // ascending reduction
        const auto &grads = per_seq_grad[static_cast<size_t>(s)];
        for (int e = 0; e < n_entries; ++e) {
            const double mg = grads[static_cast<size_t>(e)];
            out.taylor.scores[static_cast<size_t>(e)] += std::abs(mg);
            if (mg < 0.0) {
                out.lahis.scores[static_cast<size_t>(e)] += std::abs(mg);
                out.wneg.values[static_cast<size_t>(e)] += 1.0;
            }
        }
    }
    for (int e = 0; e < n_entries; ++e) {
        out.taylor.scores[static_cast<size_t>(e)] /= S_count;
        out.lahis.scores[static_cast<size_t>(e)] /= S_count;
        out.wneg.values[static_cast<size_t>(e)] /= S_count;
    }
    return out;
}

// The product reading of the estimator: taylor .* wneg. Not equal to the
// fused per-sample form in general; exposed for comparison only.
inline ImportanceMatrix lahis_product_variant(const ImportanceMatrix &taylor, const NegFractionMatrix &wneg) {
    check_contract(taylor.n_layers == wneg.n_layers && taylor.n_heads == wneg.n_heads,
                   "lahis_product_variant: shape mismatch");
    ImportanceMatrix out(taylor.language_id, ScoreKind::Lahis, taylor.n_layers, taylor.n_heads);
    out.n_samples = taylor.n_samples;
    out.corpus_fingerprint = taylor.corpus_fingerprint;
    for (size_t e = 0; e < out.scores.size(); ++e) out.scores[e] = taylor.scores[e] * wneg.values[e];
    return out;
}

std::string matrix_fingerprint(const ImportanceMatrix &m);

}  // namespace headlens::lahis
