#pragma once

#include <atomic>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "headlens/rng.hpp"
#include "headlens/synth.hpp"
#include "headlens/tape.hpp"

namespace headlens::nn {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 8;
    int n_kv_groups = 4;
    int d_model = 128;
    int d_head = 16;
    int vocab_size = 512;
    int max_seq_len = 64;
    int mlp_hidden = 512;
    uint32_t seed = 1;

    int kv_dim() const { return n_kv_groups * d_head; }
    int head_count() const { return n_layers * n_heads; }

    void validate() const {
        check_config(n_layers > 0 && n_heads > 0 && d_head > 0, "ModelConfig: sizes must be positive");
        check_config(n_heads * d_head == d_model, "ModelConfig: n_heads * d_head must equal d_model");
        check_config(n_kv_groups >= 1 && n_kv_groups <= n_heads && n_heads % n_kv_groups == 0,
                     "ModelConfig: n_kv_groups must divide n_heads");
        check_config(d_head % 2 == 0, "ModelConfig: d_head must be even for rotary embedding");
        check_config(vocab_size > 1 && max_seq_len >= 2 && mlp_hidden > 0, "ModelConfig: invalid sizes");
    }

    bool operator==(const ModelConfig &) const = default;
};

// Per-head nonnegative multipliers applied to head outputs before W_O.
// All-ones leaves the forward pass bit-identical to the ungated path.
struct GateMatrix {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<double> values;

    GateMatrix() = default;
    GateMatrix(int nl, int nh, double fill = 1.0)
        : n_layers(nl), n_heads(nh), values(static_cast<size_t>(nl) * nh, fill) {}

    static GateMatrix all_ones(const ModelConfig &cfg) { return GateMatrix(cfg.n_layers, cfg.n_heads, 1.0); }

    double at(int l, int h) const { return values[static_cast<size_t>(l) * n_heads + h]; }
    double &at(int l, int h) { return values[static_cast<size_t>(l) * n_heads + h]; }

    void validate() const {
        for (double v : values) check_contract(v >= 0.0, "GateMatrix: gate values must be nonnegative");
    }

    bool is_all_ones() const {
        for (double v : values) {
            if (v != 1.0) return false;
        }
        return true;
    }
};

template <typename S>
struct TransformerModel {
    ModelConfig config;

    struct Layer {
        ad::ParameterT<S> attn_gain;  // [d_model]
        ad::ParameterT<S> wq;         // [d_model, n_heads*d_head]
        ad::ParameterT<S> wk;         // [d_model, kv_dim]
        ad::ParameterT<S> wv;         // [d_model, kv_dim]
        ad::ParameterT<S> wo;         // [n_heads*d_head, d_model]
        ad::ParameterT<S> mlp_gain;   // [d_model]
        ad::ParameterT<S> w1;         // [d_model, mlp_hidden]
        ad::ParameterT<S> w2;         // [mlp_hidden, d_model]
    };

    ad::ParameterT<S> tok_embed;  // [vocab, d_model]
    std::vector<Layer> layers;
    ad::ParameterT<S> final_gain;  // [d_model]
    ad::ParameterT<S> unembed;     // [d_model, vocab]

    std::vector<ad::ParameterT<S> *> parameters() {
        std::vector<ad::ParameterT<S> *> out;
        out.push_back(&tok_embed);
        for (auto &l : layers) {
            for (ad::ParameterT<S> *p : {&l.attn_gain, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_gain, &l.w1, &l.w2}) {
                out.push_back(p);
            }
        }
        out.push_back(&final_gain);
        out.push_back(&unembed);
        return out;
    }

    std::vector<const ad::ParameterT<S> *> parameters() const {
        auto *self = const_cast<TransformerModel *>(this);
        std::vector<const ad::ParameterT<S> *> out;
        for (auto *p : self->parameters()) out.push_back(p);
        return out;
    }

    void zero_grads() {
        for (auto *p : parameters()) p->zero_grad();
    }

    template <typename T2>
    TransformerModel<T2> cast() const {
        TransformerModel<T2> out;
        out.config = config;
        auto conv = [](const ad::ParameterT<S> &p) {
            ad::ParameterT<T2> q(p.name, p.value.template cast<T2>(), p.trainable);
            return q;
        };
        out.tok_embed = conv(tok_embed);
        for (const auto &l : layers) {
            typename TransformerModel<T2>::Layer l2{conv(l.attn_gain), conv(l.wq), conv(l.wk), conv(l.wv),
                                                    conv(l.wo),        conv(l.mlp_gain), conv(l.w1), conv(l.w2)};
            out.layers.push_back(std::move(l2));
        }
        out.final_gain = conv(final_gain);
        out.unembed = conv(unembed);
        return out;
    }
};

using ModelF = TransformerModel<float>;
using ModelD = TransformerModel<double>;

// Sequence-level pass instrumentation; scoring speed claims are verified
// against these counters rather than wall clock.
struct PassCounters {
    std::atomic<uint64_t> sequence_forwards{0};
    std::atomic<uint64_t> sequence_backwards{0};
};

inline PassCounters &pass_counters() {
    static PassCounters c;
    return c;
}

inline void reset_pass_counters() {
    pass_counters().sequence_forwards.store(0);
    pass_counters().sequence_backwards.store(0);
}

inline ModelF init_model(const ModelConfig &cfg) {
    cfg.validate();
    DetRng rng(derive_seed(cfg.seed, "model-init"));
    auto normal = [&rng](std::vector<int> shape, float scale) {
        ad::TensorF t(std::move(shape));
        for (auto &v : t.data) v = static_cast<float>(rng.next_normal()) * scale;
        return t;
    };
    auto ones = [](int n) {
        ad::TensorF t({n});
        std::fill(t.data.begin(), t.data.end(), 1.0f);
        return t;
    };
    const float ws = 0.02f;
    ModelF m;
    m.config = cfg;
    m.tok_embed = ad::ParameterF("tok_embed", normal({cfg.vocab_size, cfg.d_model}, ws));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        typename ModelF::Layer layer{
            ad::ParameterF(p + "attn_gain", ones(cfg.d_model)),
            ad::ParameterF(p + "wq", normal({cfg.d_model, cfg.n_heads * cfg.d_head}, ws)),
            ad::ParameterF(p + "wk", normal({cfg.d_model, cfg.kv_dim()}, ws)),
            ad::ParameterF(p + "wv", normal({cfg.d_model, cfg.kv_dim()}, ws)),
            ad::ParameterF(p + "wo", normal({cfg.n_heads * cfg.d_head, cfg.d_model}, ws)),
            ad::ParameterF(p + "mlp_gain", ones(cfg.d_model)),
            ad::ParameterF(p + "w1", normal({cfg.d_model, cfg.mlp_hidden}, ws)),
            ad::ParameterF(p + "w2", normal({cfg.mlp_hidden, cfg.d_model}, ws)),
        };
        m.layers.push_back(std::move(layer));
    }
    m.final_gain = ad::ParameterF("final_gain", ones(cfg.d_model));
    m.unembed = ad::ParameterF("unembed", normal({cfg.d_model, cfg.vocab_size}, ws));
    return m;
}

// One sequence's computation graph plus handles into it.
template <typename S>
struct SequenceGraph {
    ad::Tape<S> tape;
    int logits = -1;
    int loss = -1;
    int scales = -1;                  // head-scale leaf, -1 on the ungated path
    std::vector<int> residuals;       // post-layer residual nodes (trace mode)
    std::vector<int> attn_probs;      // per-layer softmax nodes (trace mode)
};

struct ForwardOptions {
    bool trace = false;
    bool strict_finite = false;
    bool with_grads = false;  // make weight leaves differentiable
};

template <typename S>
void check_tokens(const ModelConfig &cfg, std::span<const int> tokens) {
    check_contract(!tokens.empty(), "forward: empty token sequence");
    check_contract(static_cast<int>(tokens.size()) <= cfg.max_seq_len,
                   "forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                       std::to_string(cfg.max_seq_len));
    for (int t : tokens) {
        check_contract(t >= 0 && t < cfg.vocab_size, "forward: token id " + std::to_string(t) + " out of vocab");
    }
}

// Builds the forward graph for one sequence. Exactly one of `gates` /
// `scales_param` may be non-null; both null selects the ungated path
// (bit-identical to all-ones gates). `targets` of -1 are unpredicted.
template <typename S>
SequenceGraph<S> build_sequence_graph(TransformerModel<S> &m, const GateMatrix *gates,
                                      ad::ParameterT<S> *scales_param, std::span<const int> tokens,
                                      const std::vector<int> *targets, const ForwardOptions &opt = {}) {
    const ModelConfig &cfg = m.config;
    check_tokens<S>(cfg, tokens);
    if (gates != nullptr) {
        check_contract(scales_param == nullptr, "forward: gates and scales_param are mutually exclusive");
        check_contract(gates->n_layers == cfg.n_layers && gates->n_heads == cfg.n_heads,
                       "forward: gate matrix shape mismatch");
        gates->validate();
    }

    SequenceGraph<S> g;
    g.tape.set_strict_finite(opt.strict_finite);
    auto &t = g.tape;

    auto weight = [&](ad::ParameterT<S> &p) { return opt.with_grads ? t.param(p) : t.leaf(p.value, false); };

    if (scales_param != nullptr) {
        g.scales = t.param(*scales_param);
    } else if (gates != nullptr) {
        ad::TensorT<S> sv({cfg.n_layers, cfg.n_heads});
        for (size_t i = 0; i < gates->values.size(); ++i) sv.data[i] = static_cast<S>(gates->values[i]);
        g.scales = t.leaf(std::move(sv), false);
    }

    std::vector<int> ids(tokens.begin(), tokens.end());
    int x = t.embedding(weight(m.tok_embed), ids);
    const S scale = S(1) / std::sqrt(static_cast<S>(cfg.d_head));

    for (int l = 0; l < cfg.n_layers; ++l) {
        auto &layer = m.layers[static_cast<size_t>(l)];
        const int a_in = t.rms_norm(x, weight(layer.attn_gain), S(1e-5));
        const int q = t.rope(t.matmul(a_in, weight(layer.wq)), cfg.n_heads, cfg.d_head);
        const int k = t.rope(t.matmul(a_in, weight(layer.wk)), cfg.n_kv_groups, cfg.d_head);
        const int v = t.matmul(a_in, weight(layer.wv));
        const int probs = t.causal_softmax(t.attn_scores(q, k, cfg.n_heads, cfg.n_kv_groups, scale));
        int heads = t.attn_mix(probs, v, cfg.n_heads, cfg.n_kv_groups);
        if (g.scales >= 0) heads = t.head_scale(heads, g.scales, l, cfg.n_heads);
        x = t.add(x, t.matmul(heads, weight(layer.wo)));
        const int m_in = t.rms_norm(x, weight(layer.mlp_gain), S(1e-5));
        x = t.add(x, t.matmul(t.silu(t.matmul(m_in, weight(layer.w1))), weight(layer.w2)));
        if (opt.trace) {
            g.residuals.push_back(x);
            g.attn_probs.push_back(probs);
        }
    }

    const int final_norm = t.rms_norm(x, weight(m.final_gain), S(1e-5));
    g.logits = t.matmul(final_norm, weight(m.unembed));
    if (targets != nullptr) g.loss = t.cross_entropy(g.logits, *targets);
    return g;
}

template <typename S>
std::vector<int> lm_targets(std::span<const int> tokens) {
    std::vector<int> targets(tokens.size(), -1);
    for (size_t i = 0; i + 1 < tokens.size(); ++i) targets[i] = tokens[i + 1];
    return targets;
}

template <typename S>
struct BatchLoss {
    std::vector<S> per_sequence;
    S mean = S(0);
};

// Mean next-token NLL per sequence under the given gates (null = vanilla).
template <typename S>
BatchLoss<S> forward_loss(TransformerModel<S> &m, const GateMatrix *gates,
                          const std::vector<std::vector<int>> &batch) {
    check_contract(!batch.empty(), "forward_loss: empty batch");
    BatchLoss<S> out;
    out.per_sequence.resize(batch.size());
    parallel_for_indexed(static_cast<int64_t>(batch.size()), [&](int64_t i) {
        const auto &tokens = batch[static_cast<size_t>(i)];
        check_contract(tokens.size() >= 2, "forward_loss: sequence needs at least two tokens");
        const auto targets = lm_targets<S>(tokens);
        auto g = build_sequence_graph<S>(m, gates, nullptr, tokens, &targets);
        out.per_sequence[static_cast<size_t>(i)] = g.tape.value(g.loss).scalar();
        pass_counters().sequence_forwards.fetch_add(1);
    });
    S total = 0;
    for (S v : out.per_sequence) total += v;
    out.mean = total / static_cast<S>(out.per_sequence.size());
    return out;
}

// Greedy (temperature <= 0) or temperature sampling continuation.
template <typename S>
std::vector<int> generate(TransformerModel<S> &m, const GateMatrix *gates, std::span<const int> prompt,
                          int n_tokens, double temperature, uint64_t seed) {
    check_contract(!prompt.empty(), "generate: empty prompt");
    check_contract(static_cast<int>(prompt.size()) + n_tokens <= m.config.max_seq_len,
                   "generate: prompt plus continuation exceeds max_seq_len");
    std::vector<int> ctx(prompt.begin(), prompt.end());
    std::vector<int> out;
    DetRng rng(derive_seed(seed, "generate"));
    for (int step = 0; step < n_tokens; ++step) {
        auto g = build_sequence_graph<S>(m, gates, nullptr, ctx, nullptr);
        pass_counters().sequence_forwards.fetch_add(1);
        const auto &logits = g.tape.value(g.logits);
        const int V = logits.dim(1);
        const S *row = logits.data.data() + static_cast<size_t>(logits.dim(0) - 1) * V;
        int next = 0;
        if (temperature <= 0.0) {
            for (int j = 1; j < V; ++j) {
                if (row[j] > row[next]) next = j;
            }
        } else {
            S mx = row[0];
            for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            std::vector<double> p(static_cast<size_t>(V));
            double z = 0.0;
            for (int j = 0; j < V; ++j) {
                p[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j] - mx) / temperature);
                z += p[static_cast<size_t>(j)];
            }
            double u = rng.next_double() * z;
            double acc = 0.0;
            next = V - 1;
            for (int j = 0; j < V; ++j) {
                acc += p[static_cast<size_t>(j)];
                if (u < acc) {
                    next = j;
                    break;
                }
            }
        }
        ctx.push_back(next);
        out.push_back(next);
    }
    return out;
}

// Per-layer language-mass readout: project each post-layer residual through
// the final norm and unembedding, softmax at the last position, and sum the
// probability mass over each language's content range plus the answer range
// (last column). Remaining mass sits on shared/key/marker tokens.
template <typename S>
std::vector<std::vector<double>> logit_lens(TransformerModel<S> &m, const GateMatrix *gates,
                                            std::span<const int> tokens, const synth::Registry &reg) {
    auto g = build_sequence_graph<S>(m, gates, nullptr, tokens, nullptr, {.trace = true});
    pass_counters().sequence_forwards.fetch_add(1);
    const ModelConfig &cfg = m.config;
    const int T = static_cast<int>(tokens.size());
    std::vector<std::vector<double>> out;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto &resid = g.tape.value(g.residuals[static_cast<size_t>(l)]);
        // final RMS norm on the last row
        const S *row = resid.data.data() + static_cast<size_t>(T - 1) * cfg.d_model;
        S ms = 0;
        for (int c = 0; c < cfg.d_model; ++c) ms += row[c] * row[c];
        ms /= static_cast<S>(cfg.d_model);
        const S r = S(1) / std::sqrt(ms + S(1e-5));
        std::vector<S> h(static_cast<size_t>(cfg.d_model));
        for (int c = 0; c < cfg.d_model; ++c) h[static_cast<size_t>(c)] = row[c] * r * m.final_gain.value.data[static_cast<size_t>(c)];
        std::vector<S> logits(static_cast<size_t>(cfg.vocab_size), S(0));
        for (int c = 0; c < cfg.d_model; ++c) {
            const S hv = h[static_cast<size_t>(c)];
            const S *urow = m.unembed.value.data.data() + static_cast<size_t>(c) * cfg.vocab_size;
            for (int jv = 0; jv < cfg.vocab_size; ++jv) logits[static_cast<size_t>(jv)] += hv * urow[jv];
        }
        S mx = logits[0];
        for (S v : logits) mx = std::max(mx, v);
        double z = 0.0;
        std::vector<double> p(logits.size());
        for (size_t i = 0; i < logits.size(); ++i) {
            p[i] = std::exp(static_cast<double>(logits[i] - mx));
            z += p[i];
        }
        std::vector<double> masses(static_cast<size_t>(reg.n_languages()) + 1, 0.0);
        for (int tok = 0; tok < cfg.vocab_size; ++tok) {
            const double prob = p[static_cast<size_t>(tok)] / z;
            const int lang = reg.content_language(tok);
            if (lang >= 0) {
                masses[static_cast<size_t>(lang)] += prob;
            } else if (tok >= reg.answer_begin && tok < reg.answer_end) {
                masses.back() += prob;
            }
        }
        out.push_back(std::move(masses));
    }
    return out;
}

}  // namespace headlens::nn
