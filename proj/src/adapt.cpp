#include "headlens/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "headlens/io.hpp"
#include "headlens/rng.hpp"

namespace headlens::adapt {

int LanguageHeadMask::trainable_count() const {
    int n = 0;
    for (uint8_t f : trainable) n += f ? 1 : 0;
    return n;
}

nn::GateMatrix LanguageHeadMask::as_gates() const {
    nn::GateMatrix g(n_layers, n_heads);
    g.values = values;
    return g;
}

AdaptTask make_adapt_task(const synth::Registry &reg, int language_id, int n_train, int n_test, uint64_t seed) {
    AdaptTask task;
    task.language_id = language_id;
    task.train = synth::make_recall_probes(reg, language_id, n_train, seed, /*key_parity=*/0);
    task.test = synth::make_recall_probes(reg, language_id, n_test, seed, /*key_parity=*/1);
    return task;
}

LanguageHeadMask init_mask(const nn::ModelConfig &cfg, const heads::HeadSet &headset) {
    check_contract(!headset.members.empty(), "init_mask: empty head set");
    LanguageHeadMask mask;
    mask.label = headset.label;
    mask.n_layers = cfg.n_layers;
    mask.n_heads = cfg.n_heads;
    mask.values.assign(static_cast<size_t>(cfg.n_layers) * cfg.n_heads, 1.0);
    mask.trainable.assign(mask.values.size(), 0);
    for (const auto id : headset.members) {
        check_contract(id.layer >= 0 && id.layer < cfg.n_layers && id.head >= 0 && id.head < cfg.n_heads,
                       "init_mask: head set out of model bounds");
        mask.trainable[static_cast<size_t>(id.layer) * cfg.n_heads + id.head] = 1;
    }
    mask.headset_provenance = headset.source_fingerprints;
    return mask;
}

namespace {

std::vector<int> answer_targets(const synth::RecallProbe &probe) {
    // only the final position (query key) predicts; its target is the answer
    std::vector<int> targets(probe.tokens.size(), -1);
    targets.back() = probe.answer;
    return targets;
}

}  // namespace

LanguageHeadMask train_mask(nn::ModelF &frozen_model, const LanguageHeadMask &mask, const AdaptTask &task,
                            int epochs, double lr, uint64_t seed) {
    check_contract(mask.n_layers == frozen_model.config.n_layers && mask.n_heads == frozen_model.config.n_heads,
                   "train_mask: mask shape mismatch");
    check_contract(!task.train.empty() || epochs == 0, "train_mask: empty training split");

    LanguageHeadMask out = mask;
    out.epochs = epochs;
    out.lr = lr;
    out.seed = seed;
    if (epochs == 0) return out;

    DetRng rng(derive_seed(seed, "mask-train"));
    std::vector<size_t> order(task.train.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t oi : order) {
            const auto &probe = task.train[oi];
            ad::ParameterF scales("head_mask", ad::TensorF({out.n_layers, out.n_heads}));
            for (size_t e = 0; e < out.values.size(); ++e) scales.value.data[e] = static_cast<float>(out.values[e]);
            const auto targets = answer_targets(probe);
            auto g = nn::build_sequence_graph<float>(frozen_model, nullptr, &scales, probe.tokens, &targets);
            nn::pass_counters().sequence_forwards.fetch_add(1);
            const float loss = g.tape.value(g.loss).scalar();
            if (!std::isfinite(loss)) {
                throw NumericError("train_mask: loss diverged (non-finite)");
            }
            g.tape.backward(g.loss);
            nn::pass_counters().sequence_backwards.fetch_add(1);
            for (size_t e = 0; e < out.values.size(); ++e) {
                if (!out.trainable[e]) continue;
                double v = out.values[e] - lr * static_cast<double>(scales.grad.data[e]);
                out.values[e] = std::max(0.0, v);  // gate domain is nonnegative
            }
        }
    }
    return out;
}

double eval_accuracy(nn::ModelF &m, const LanguageHeadMask &mask, const std::vector<synth::RecallProbe> &test) {
    check_contract(!test.empty(), "eval_accuracy: empty test split");
    check_contract(mask.n_layers == m.config.n_layers && mask.n_heads == m.config.n_heads,
                   "eval_accuracy: mask shape mismatch");
    const nn::GateMatrix gates = mask.as_gates();
    std::vector<int> hits(test.size(), 0);
    parallel_for_indexed(static_cast<int64_t>(test.size()), [&](int64_t i) {
        const auto &probe = test[static_cast<size_t>(i)];
        auto g = nn::build_sequence_graph<float>(m, &gates, nullptr, probe.tokens, nullptr);
        nn::pass_counters().sequence_forwards.fetch_add(1);
        const auto &logits = g.tape.value(g.logits);
        const float *row = logits.data.data() + static_cast<size_t>(logits.dim(0) - 1) * m.config.vocab_size;
        int best = 0;
        for (int v = 1; v < m.config.vocab_size; ++v) {
            if (row[v] > row[best]) best = v;
        }
        hits[static_cast<size_t>(i)] = (best == probe.answer) ? 1 : 0;
    });
    int total = 0;
    for (int h : hits) total += h;
    return static_cast<double>(total) / static_cast<double>(test.size());
}

void save_mask_json(const LanguageHeadMask &mask, const std::string &path) {
    nlohmann::json j;
    j["label"] = mask.label;
    j["n_layers"] = mask.n_layers;
    j["n_heads"] = mask.n_heads;
    j["values"] = mask.values;
    std::vector<int> flags(mask.trainable.begin(), mask.trainable.end());
    j["trainable"] = flags;
    j["headset_provenance"] = mask.headset_provenance;
    j["epochs"] = mask.epochs;
    j["lr"] = mask.lr;
    j["seed"] = mask.seed;
    io::write_file(path, j.dump(1) + "\n");
}

LanguageHeadMask load_mask_json(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_mask_json: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw IoError("load_mask_json: " + path + ": " + e.what());
    }
    LanguageHeadMask mask;
    mask.label = j.at("label").get<std::string>();
    mask.n_layers = j.at("n_layers").get<int>();
    mask.n_heads = j.at("n_heads").get<int>();
    mask.values = j.at("values").get<std::vector<double>>();
    const auto flags = j.at("trainable").get<std::vector<int>>();
    mask.trainable.assign(flags.begin(), flags.end());
    mask.headset_provenance = j.at("headset_provenance").get<std::vector<std::string>>();
    mask.epochs = j.at("epochs").get<int>();
    mask.lr = j.at("lr").get<double>();
    mask.seed = j.at("seed").get<uint64_t>();
    return mask;
}

}  // namespace headlens::adapt
