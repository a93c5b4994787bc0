#include "headlens/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "headlens/checkpoint.hpp"
#include "headlens/heatmap.hpp"
#include "headlens/io.hpp"
#include "headlens/lahis.hpp"
#include "headlens/stats.hpp"

namespace fs = std::filesystem;

namespace headlens::pipeline {

void RunConfig::validate() const {
    model.validate();
    check_config(n_languages >= 2, "RunConfig: need at least two languages");
    check_config(specific_fraction > 0.0 && specific_fraction <= 1.0, "RunConfig: specific fraction out of range");
    for (double f : general_sweep) check_config(f > 0.0 && f <= 1.0, "RunConfig: general sweep fraction out of range");
    for (double f : suppress_fractions) {
        check_config(f > 0.0 && f <= 1.0, "RunConfig: suppression fraction out of range");
    }
    check_config(dominant_language >= 0 && dominant_language < n_languages, "RunConfig: bad dominant language");
    for (const auto &[a, b] : conflict_pairs) {
        check_config(a != b && a >= 0 && b >= 0 && a < n_languages && b < n_languages,
                     "RunConfig: bad conflict pair");
    }
    check_config(seq_len <= model.max_seq_len, "RunConfig: seq_len exceeds model max_seq_len");
    check_config(prompt_len + offtarget_gen_tokens <= model.max_seq_len,
                 "RunConfig: prompt plus generation exceeds max_seq_len");
}

std::string RunConfig::to_json_string() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["languages"] = {{"n", n_languages},
                      {"vocab_size", vocab_size},
                      {"answer_range_size", answer_range_size},
                      {"dominant_mix_weight", dominant_mix_weight},
                      {"dominant_language", dominant_language}};
    j["corpus"] = {{"train_sequences_total", train_sequences_total},
                   {"eval_sequences", eval_sequences},
                   {"seq_len", seq_len},
                   {"prompt_count", prompt_count},
                   {"prompt_len", prompt_len}};
    j["model"] = {{"n_layers", model.n_layers},   {"n_heads", model.n_heads},
                  {"n_kv_groups", model.n_kv_groups}, {"d_model", model.d_model},
                  {"d_head", model.d_head},       {"vocab_size", model.vocab_size},
                  {"max_seq_len", model.max_seq_len}, {"mlp_hidden", model.mlp_hidden},
                  {"seed", model.seed}};
    j["train"] = {{"steps", train.steps},       {"batch_size", train.batch_size},
                  {"lr", train.lr},             {"final_lr_frac", train.final_lr_frac},
                  {"warmup_steps", train.warmup_steps}, {"clip_norm", train.clip_norm},
                  {"seed", train.seed},         {"log_every", train.log_every}};
    j["fractions"] = {{"specific", specific_fraction},
                      {"general_sweep", general_sweep},
                      {"suppress", suppress_fractions}};
    j["gate_sweep"] = gate_sweep;
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto &[a, b] : conflict_pairs) pairs.push_back({a, b});
    j["conflict"] = {{"pairs", pairs}, {"probes", conflict_probes}};
    j["offtarget"] = {{"gen_tokens", offtarget_gen_tokens}};
    j["adapt"] = {{"train_samples", adapt_train_samples},
                  {"test_samples", adapt_test_samples},
                  {"epochs", adapt_epochs},
                  {"lr", adapt_lr},
                  {"random_masks", adapt_random_masks}};
    j["random_sets"] = random_sets;
    return j.dump(1) + "\n";
}

RunConfig RunConfig::from_json_string(const std::string &text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception &e) {
        throw IoError(std::string("RunConfig: malformed JSON: ") + e.what());
    }
    RunConfig c;
    auto get = [](const nlohmann::json &obj, const char *key, auto fallback) {
        using T = decltype(fallback);
        if (obj.contains(key)) return obj.at(key).get<T>();
        return fallback;
    };
    c.seed = get(j, "seed", c.seed);
    if (j.contains("languages")) {
        const auto &l = j["languages"];
        c.n_languages = get(l, "n", c.n_languages);
        c.vocab_size = get(l, "vocab_size", c.vocab_size);
        c.answer_range_size = get(l, "answer_range_size", c.answer_range_size);
        c.dominant_mix_weight = get(l, "dominant_mix_weight", c.dominant_mix_weight);
        c.dominant_language = get(l, "dominant_language", c.dominant_language);
    }
    if (j.contains("corpus")) {
        const auto &k = j["corpus"];
        c.train_sequences_total = get(k, "train_sequences_total", c.train_sequences_total);
        c.eval_sequences = get(k, "eval_sequences", c.eval_sequences);
        c.seq_len = get(k, "seq_len", c.seq_len);
        c.prompt_count = get(k, "prompt_count", c.prompt_count);
        c.prompt_len = get(k, "prompt_len", c.prompt_len);
    }
    if (j.contains("model")) {
        const auto &mj = j["model"];
        c.model.n_layers = get(mj, "n_layers", c.model.n_layers);
        c.model.n_heads = get(mj, "n_heads", c.model.n_heads);
        c.model.n_kv_groups = get(mj, "n_kv_groups", c.model.n_kv_groups);
        c.model.d_model = get(mj, "d_model", c.model.d_model);
        c.model.d_head = get(mj, "d_head", c.model.d_head);
        c.model.vocab_size = get(mj, "vocab_size", c.model.vocab_size);
        c.model.max_seq_len = get(mj, "max_seq_len", c.model.max_seq_len);
        c.model.mlp_hidden = get(mj, "mlp_hidden", c.model.mlp_hidden);
        c.model.seed = get(mj, "seed", c.model.seed);
    }
    if (j.contains("train")) {
        const auto &t = j["train"];
        c.train.steps = get(t, "steps", c.train.steps);
        c.train.batch_size = get(t, "batch_size", c.train.batch_size);
        c.train.lr = get(t, "lr", c.train.lr);
        c.train.final_lr_frac = get(t, "final_lr_frac", c.train.final_lr_frac);
        c.train.warmup_steps = get(t, "warmup_steps", c.train.warmup_steps);
        c.train.clip_norm = get(t, "clip_norm", c.train.clip_norm);
        c.train.seed = get(t, "seed", c.train.seed);
        c.train.log_every = get(t, "log_every", c.train.log_every);
    }
    if (j.contains("fractions")) {
        const auto &f = j["fractions"];
        c.specific_fraction = get(f, "specific", c.specific_fraction);
        c.general_sweep = get(f, "general_sweep", c.general_sweep);
        c.suppress_fractions = get(f, "suppress", c.suppress_fractions);
    }
    c.gate_sweep = get(j, "gate_sweep", c.gate_sweep);
    if (j.contains("conflict")) {
        const auto &cf = j["conflict"];
        if (cf.contains("pairs")) {
            c.conflict_pairs.clear();
            for (const auto &p : cf["pairs"]) c.conflict_pairs.emplace_back(p[0].get<int>(), p[1].get<int>());
        }
        c.conflict_probes = get(cf, "probes", c.conflict_probes);
    }
    if (j.contains("offtarget")) c.offtarget_gen_tokens = get(j["offtarget"], "gen_tokens", c.offtarget_gen_tokens);
    if (j.contains("adapt")) {
        const auto &a = j["adapt"];
        c.adapt_train_samples = get(a, "train_samples", c.adapt_train_samples);
        c.adapt_test_samples = get(a, "test_samples", c.adapt_test_samples);
        c.adapt_epochs = get(a, "epochs", c.adapt_epochs);
        c.adapt_lr = get(a, "lr", c.adapt_lr);
        c.adapt_random_masks = get(a, "random_masks", c.adapt_random_masks);
    }
    c.random_sets = get(j, "random_sets", c.random_sets);
    return c;
}

RunConfig RunConfig::from_json_file(const std::string &path) {
    return from_json_string(io::slurp_file(path));
}

std::string RunConfig::fingerprint() const { return to_hex(fnv1a(to_json_string())); }

// ---- artifact paths --------------------------------------------------------

std::string registry_path(const std::string &dir) { return dir + "/registry.json"; }
std::string train_corpus_path(const std::string &dir, int lang) {
    return dir + "/corpus_train_lang" + std::to_string(lang) + ".txt";
}
std::string eval_corpus_path(const std::string &dir, int lang) {
    return dir + "/corpus_eval_lang" + std::to_string(lang) + ".txt";
}
std::string prompts_path(const std::string &dir, int lang) {
    return dir + "/prompts_lang" + std::to_string(lang) + ".txt";
}
std::string checkpoint_path(const std::string &dir) { return dir + "/model.bin"; }
std::string matrix_path(const std::string &dir, const std::string &kind, int lang) {
    return dir + "/importance_" + kind + "_lang" + std::to_string(lang) + ".csv";
}
std::string headset_path(const std::string &dir, const std::string &name) {
    return dir + "/heads_" + name + ".json";
}

namespace {

std::map<std::string, std::string> base_fingerprints(const RunConfig &cfg, const std::string &dir,
                                                     bool with_model = true) {
    std::map<std::string, std::string> fp;
    fp["config"] = cfg.fingerprint();
    fp["seed"] = std::to_string(cfg.seed);
    if (with_model && fs::exists(checkpoint_path(dir))) fp["checkpoint"] = nn::file_fingerprint(checkpoint_path(dir));
    return fp;
}

synth::Registry load_reg(const std::string &dir) { return synth::load_registry(registry_path(dir)); }

std::vector<synth::Corpus> load_eval_corpora(const RunConfig &cfg, const std::string &dir) {
    std::vector<synth::Corpus> out;
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        out.push_back(synth::load_corpus(eval_corpus_path(dir, lang)));
    }
    return out;
}

heads::HeadSet load_set(const std::string &dir, const std::string &name) {
    return io::load_headset_json(headset_path(dir, name));
}

}  // namespace

void stage_corpus(const RunConfig &cfg, const std::string &dir) {
    cfg.validate();
    fs::create_directories(dir);
    const auto reg = synth::make_registry(cfg.n_languages, cfg.vocab_size, cfg.answer_range_size, cfg.seed,
                                          cfg.dominant_mix_weight);
    save_registry(reg, registry_path(dir));
    const std::string reg_fp = synth::registry_fingerprint(reg);

    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        const auto &spec = reg.languages[static_cast<size_t>(lang)];
        const int n_train = static_cast<int>(std::llround(spec.mix_weight * cfg.train_sequences_total));
        const auto train = synth::sample_corpus(reg, lang, n_train, cfg.seq_len,
                                                derive_seed(cfg.seed, "train-corpus", static_cast<uint64_t>(lang)));
        save_corpus(train, train_corpus_path(dir, lang), reg_fp);

        const auto eval = synth::sample_corpus(reg, lang, cfg.eval_sequences, cfg.seq_len,
                                               derive_seed(cfg.seed, "eval-corpus", static_cast<uint64_t>(lang)));
        save_corpus(eval, eval_corpus_path(dir, lang), reg_fp);

        synth::Corpus prompts;
        prompts.language_id = lang;
        prompts.seed = derive_seed(cfg.seed, "prompt-corpus", static_cast<uint64_t>(lang));
        prompts.seq_len = cfg.prompt_len;
        prompts.sequences = synth::make_prompts(reg, lang, cfg.prompt_count, cfg.prompt_len, prompts.seed);
        save_corpus(prompts, prompts_path(dir, lang), reg_fp);
    }
}

void stage_train(const RunConfig &cfg, const std::string &dir) {
    std::vector<std::vector<int>> sequences;
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        auto corpus = synth::load_corpus(train_corpus_path(dir, lang));
        for (auto &s : corpus.sequences) sequences.push_back(std::move(s));
    }
    nn::TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, "train-run");
    nn::TrainResult result;
    nn::ModelF model = nn::train_model(cfg.model, sequences, tc, &result);
    nn::save_checkpoint(model, checkpoint_path(dir));

    nlohmann::json j;
    j["config"] = cfg.fingerprint();
    j["steps"] = tc.steps;
    nlohmann::json curve = nlohmann::json::array();
    for (const auto &[step, loss] : result.loss_curve) curve.push_back({step, loss});
    j["loss_curve"] = std::move(curve);
    if (!result.loss_curve.empty()) {
        j["first_loss"] = result.loss_curve.front().second;
        j["final_loss"] = result.loss_curve.back().second;
    }
    io::write_file(dir + "/losscurve.json", j.dump(1) + "\n");
}

void stage_score(const RunConfig &cfg, const std::string &dir) {
    nn::ModelD model = nn::load_checkpoint(checkpoint_path(dir)).cast<double>();
    const auto extra = base_fingerprints(cfg, dir);
    std::map<std::string, std::string> comments(extra.begin(), extra.end());

    nlohmann::json pass_log = nlohmann::json::array();
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        const auto corpus = synth::load_corpus(eval_corpus_path(dir, lang));

        nn::reset_pass_counters();
        const auto scores = lahis::lahis_scores<double>(model, corpus);
        const uint64_t lahis_fwd = nn::pass_counters().sequence_forwards.load();
        const uint64_t lahis_bwd = nn::pass_counters().sequence_backwards.load();

        nn::reset_pass_counters();
        const auto oracle = lahis::exact_ablation_scores<double>(model, corpus);
        const uint64_t oracle_fwd = nn::pass_counters().sequence_forwards.load();
        const uint64_t oracle_bwd = nn::pass_counters().sequence_backwards.load();

        io::save_importance_csv(scores.lahis, matrix_path(dir, "lahis", lang), comments);
        io::save_importance_csv(scores.taylor, matrix_path(dir, "taylor", lang), comments);
        io::save_wneg_csv(scores.wneg, matrix_path(dir, "wneg", lang), comments);
        io::save_importance_csv(oracle, matrix_path(dir, "exact", lang), comments);

        pass_log.push_back({{"language", lang},
                            {"sequences", static_cast<int>(corpus.sequences.size())},
                            {"lahis_forwards", lahis_fwd},
                            {"lahis_backwards", lahis_bwd},
                            {"oracle_forwards", oracle_fwd},
                            {"oracle_backwards", oracle_bwd}});
    }
    nlohmann::json j;
    j["fingerprints"] = nlohmann::json::object();
    for (const auto &[k, v] : extra) j["fingerprints"][k] = v;
    j["per_language"] = std::move(pass_log);
    io::write_file(dir + "/pass_counts.json", j.dump(1) + "\n");
}

void stage_heads(const RunConfig &cfg, const std::string &dir) {
    std::vector<lahis::ImportanceMatrix> matrices;
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        matrices.push_back(io::load_importance_csv(matrix_path(dir, "lahis", lang)));
    }

    // general heads: smallest swept fraction with a nonempty intersection
    heads::HeadSet general;
    bool found = false;
    for (double f : cfg.general_sweep) {
        general = heads::general_heads(matrices, f);
        if (!general.members.empty()) {
            found = true;
            break;
        }
    }
    if (!found) {
        std::fprintf(stderr, "warning: general-head sweep found no shared heads; the general set is empty\n");
    }
    io::save_headset_json(general, headset_path(dir, "general"));

    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        const auto spec = heads::specific_heads(matrices[static_cast<size_t>(lang)], cfg.specific_fraction, general);
        io::save_headset_json(spec, headset_path(dir, "specific_lang" + std::to_string(lang)));

        // adaptation sets keep general heads (no exclusion)
        const auto adapt_set = heads::top_fraction(matrices[static_cast<size_t>(lang)], cfg.specific_fraction);
        io::save_headset_json(adapt_set, headset_path(dir, "adapt_lang" + std::to_string(lang)));
    }

    for (double f : cfg.suppress_fractions) {
        const auto set =
            heads::specific_heads(matrices[static_cast<size_t>(cfg.dominant_language)], f, general);
        io::save_headset_json(set, headset_path(dir, "suppress_" + io::format_double(f)));
    }
}

void stage_eval(const RunConfig &cfg, const std::string &dir) {
    nn::ModelF model = nn::load_checkpoint(checkpoint_path(dir));
    const auto reg = load_reg(dir);
    const auto corpora = load_eval_corpora(cfg, dir);
    const auto fingerprints = base_fingerprints(cfg, dir);

    std::vector<heads::HeadSet> specific;
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        specific.push_back(load_set(dir, "specific_lang" + std::to_string(lang)));
    }
    const auto general = load_set(dir, "general");

    // vanilla perplexities
    eval::PplReport vanilla;
    vanilla.config_id = "vanilla";
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        const auto &corpus = corpora[static_cast<size_t>(lang)];
        vanilla.per_language.push_back(
            {lang, eval::perplexity(model, nullptr, corpus), synth::corpus_fingerprint(corpus)});
    }

    // general heads deactivated
    eval::PplReport general_off;
    general_off.config_id = "general-deactivated";
    {
        eval::GateAssignment a;
        a.id = general_off.config_id;
        a.entries.push_back({general, 0.0});
        const auto gates = eval::build_gates(cfg.model, a);
        for (int lang = 0; lang < cfg.n_languages; ++lang) {
            const auto &corpus = corpora[static_cast<size_t>(lang)];
            general_off.per_language.push_back(
                {lang, eval::perplexity(model, &gates, corpus), synth::corpus_fingerprint(corpus)});
        }
    }
    eval::save_ppl_report_json({vanilla, general_off}, dir + "/ppl_report.json", fingerprints);

    // specificity matrix (diagonal = specific-head effect per language)
    const auto spec_matrix = eval::specificity_matrix(model, specific, corpora);
    eval::save_specificity(spec_matrix, dir + "/specificity.json", dir + "/specificity.csv", fingerprints);

    // random baselines: per language, `random_sets` equal-size random sets
    {
        nlohmann::json j;
        j["fingerprints"] = nlohmann::json::object();
        for (const auto &[k, v] : fingerprints) j["fingerprints"][k] = v;
        nlohmann::json per_lang = nlohmann::json::array();
        for (int lang = 0; lang < cfg.n_languages; ++lang) {
            const auto &corpus = corpora[static_cast<size_t>(lang)];
            const double base = vanilla.per_language[static_cast<size_t>(lang)].ppl;
            const int set_size = specific[static_cast<size_t>(lang)].size();
            std::vector<double> deltas;
            for (int r = 0; r < cfg.random_sets; ++r) {
                const auto rnd = heads::random_heads(
                    set_size, cfg.model.n_layers, cfg.model.n_heads, heads::HeadSet{},
                    derive_seed(cfg.seed, "random-specific", static_cast<uint64_t>(lang * 1000 + r)));
                eval::GateAssignment a;
                a.entries.push_back({rnd, 0.0});
                const auto gates = eval::build_gates(cfg.model, a);
                deltas.push_back(eval::perplexity(model, &gates, corpus) - base);
            }
            nlohmann::json lj;
            lj["language"] = lang;
            lj["set_size"] = set_size;
            lj["deltas"] = deltas;
            lj["mean_delta"] = stats::mean(deltas);
            lj["specific_delta"] = spec_matrix.at(lang, lang);
            per_lang.push_back(std::move(lj));
        }
        j["per_language"] = std::move(per_lang);
        io::write_file(dir + "/ppl_random_specific.json", j.dump(1) + "\n");
    }

    // random baselines for the general set
    {
        nlohmann::json j;
        j["fingerprints"] = nlohmann::json::object();
        for (const auto &[k, v] : fingerprints) j["fingerprints"][k] = v;
        j["general_size"] = general.size();
        nlohmann::json per_lang = nlohmann::json::array();
        std::vector<heads::HeadSet> random_sets;
        for (int r = 0; r < cfg.random_sets; ++r) {
            random_sets.push_back(heads::random_heads(general.size(), cfg.model.n_layers, cfg.model.n_heads,
                                                      heads::HeadSet{},
                                                      derive_seed(cfg.seed, "random-general", static_cast<uint64_t>(r))));
        }
        for (int lang = 0; lang < cfg.n_languages; ++lang) {
            const auto &corpus = corpora[static_cast<size_t>(lang)];
            const double base = vanilla.per_language[static_cast<size_t>(lang)].ppl;
            const double general_delta = general_off.per_language[static_cast<size_t>(lang)].ppl - base;
            std::vector<double> deltas;
            for (const auto &rnd : random_sets) {
                eval::GateAssignment a;
                a.entries.push_back({rnd, 0.0});
                const auto gates = eval::build_gates(cfg.model, a);
                deltas.push_back(eval::perplexity(model, &gates, corpus) - base);
            }
            per_lang.push_back({{"language", lang},
                                {"deltas", deltas},
                                {"mean_delta", stats::mean(deltas)},
                                {"general_delta", general_delta}});
        }
        j["per_language"] = std::move(per_lang);
        io::write_file(dir + "/ppl_random_general.json", j.dump(1) + "\n");
    }

    // cross-lingual steering sweep per conflict pair
    for (const auto &[lang_a, lang_b] : cfg.conflict_pairs) {
        const auto probes = synth::make_probe_set(reg, lang_a, lang_b, cfg.conflict_probes,
                                                  derive_seed(cfg.seed, "conflict",
                                                              (static_cast<uint64_t>(lang_a) << 16) |
                                                                  static_cast<uint64_t>(lang_b)));
        const auto assignments = eval::steering_sweep(specific[static_cast<size_t>(lang_a)],
                                                      specific[static_cast<size_t>(lang_b)], cfg.gate_sweep);
        const auto reports = eval::conflict_eval(model, reg, probes, assignments);
        auto fps = fingerprints;
        fps["lang_a"] = std::to_string(lang_a);
        fps["lang_b"] = std::to_string(lang_b);
        eval::save_preference_reports_json(
            reports, dir + "/conflict_" + std::to_string(lang_a) + "_" + std::to_string(lang_b) + ".json", fps);
    }

    // off-target generation with dominant-head suppression
    {
        std::map<int, std::vector<std::vector<int>>> prompts;
        for (int lang = 0; lang < cfg.n_languages; ++lang) {
            prompts[lang] = synth::load_corpus(prompts_path(dir, lang)).sequences;
        }
        std::vector<std::pair<double, heads::HeadSet>> suppressions;
        for (double f : cfg.suppress_fractions) {
            suppressions.emplace_back(f, load_set(dir, "suppress_" + io::format_double(f)));
        }
        const auto reports = eval::offtarget_eval(model, suppressions, prompts, reg, cfg.offtarget_gen_tokens);
        eval::save_offtarget_reports_json(reports, dir + "/offtarget.json", fingerprints);
    }

    // layer-wise language-mass readout on one conflict probe set (vanilla vs
    // best enhancement), kept as a compact diagnostic artifact
    if (!cfg.conflict_pairs.empty()) {
        const auto [lang_a, lang_b] = cfg.conflict_pairs[0];
        const auto probes = synth::make_probe_set(reg, lang_a, lang_b, std::min(cfg.conflict_probes, 50),
                                                  derive_seed(cfg.seed, "lens-probes", 0));
        eval::GateAssignment enhance;
        enhance.id = "enhance-A-g3";
        enhance.entries.push_back({specific[static_cast<size_t>(lang_a)], 3.0});
        const auto gates = eval::build_gates(cfg.model, enhance);
        const int layers = cfg.model.n_layers;
        std::vector<double> vanilla_mass(static_cast<size_t>(layers), 0.0);
        std::vector<double> enhanced_mass(static_cast<size_t>(layers), 0.0);
        for (const auto &p : probes) {
            const auto tokens = p.full_tokens();
            const auto lens_v = nn::logit_lens<float>(model, nullptr, tokens, reg);
            const auto lens_e = nn::logit_lens<float>(model, &gates, tokens, reg);
            for (int l = 0; l < layers; ++l) {
                vanilla_mass[static_cast<size_t>(l)] += lens_v[static_cast<size_t>(l)][static_cast<size_t>(lang_a)];
                enhanced_mass[static_cast<size_t>(l)] += lens_e[static_cast<size_t>(l)][static_cast<size_t>(lang_a)];
            }
        }
        nlohmann::json j;
        j["fingerprints"] = nlohmann::json::object();
        for (const auto &[k, v] : fingerprints) j["fingerprints"][k] = v;
        j["lang_a"] = lang_a;
        j["lang_b"] = lang_b;
        j["n_probes"] = static_cast<int>(probes.size());
        for (auto &v : vanilla_mass) v /= static_cast<double>(probes.size());
        for (auto &v : enhanced_mass) v /= static_cast<double>(probes.size());
        j["vanilla_lang_a_mass"] = vanilla_mass;
        j["enhanced_lang_a_mass"] = enhanced_mass;
        io::write_file(dir + "/logit_lens.json", j.dump(1) + "\n");
    }
}

void stage_adapt(const RunConfig &cfg, const std::string &dir) {
    nn::ModelF model = nn::load_checkpoint(checkpoint_path(dir));
    const auto reg = load_reg(dir);
    const auto fingerprints = base_fingerprints(cfg, dir);

    nlohmann::json per_lang = nlohmann::json::array();
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        const auto task = adapt::make_adapt_task(reg, lang, cfg.adapt_train_samples, cfg.adapt_test_samples,
                                                 derive_seed(cfg.seed, "adapt-task", static_cast<uint64_t>(lang)));
        const auto headset = load_set(dir, "adapt_lang" + std::to_string(lang));
        auto mask = adapt::init_mask(cfg.model, headset);
        const double vanilla_acc = adapt::eval_accuracy(model, mask, task.test);

        const auto trained = adapt::train_mask(model, mask, task, cfg.adapt_epochs, cfg.adapt_lr,
                                               derive_seed(cfg.seed, "adapt-train", static_cast<uint64_t>(lang)));
        const double trained_acc = adapt::eval_accuracy(model, trained, task.test);
        adapt::save_mask_json(trained, dir + "/mask_lang" + std::to_string(lang) + ".json");

        std::vector<double> random_accs;
        for (int r = 0; r < cfg.adapt_random_masks; ++r) {
            const auto rnd_set = heads::random_heads(
                headset.size(), cfg.model.n_layers, cfg.model.n_heads, heads::HeadSet{},
                derive_seed(cfg.seed, "adapt-random", static_cast<uint64_t>(lang * 100 + r)));
            auto rnd_mask = adapt::init_mask(cfg.model, rnd_set);
            const auto rnd_trained =
                adapt::train_mask(model, rnd_mask, task, cfg.adapt_epochs, cfg.adapt_lr,
                                  derive_seed(cfg.seed, "adapt-random-train", static_cast<uint64_t>(lang * 100 + r)));
            random_accs.push_back(adapt::eval_accuracy(model, rnd_trained, task.test));
        }
        per_lang.push_back({{"language", lang},
                            {"trainable_entries", trained.trainable_count()},
                            {"vanilla_accuracy", vanilla_acc},
                            {"trained_accuracy", trained_acc},
                            {"random_accuracies", random_accs},
                            {"random_mean_accuracy", stats::mean(random_accs)}});
    }
    nlohmann::json j;
    j["fingerprints"] = nlohmann::json::object();
    for (const auto &[k, v] : fingerprints) j["fingerprints"][k] = v;
    j["epochs"] = cfg.adapt_epochs;
    j["train_samples"] = cfg.adapt_train_samples;
    j["test_samples"] = cfg.adapt_test_samples;
    j["per_language"] = std::move(per_lang);
    io::write_file(dir + "/adapt_report.json", j.dump(1) + "\n");
}

void stage_export(const RunConfig &cfg, const std::string &dir) {
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        for (const std::string kind : {"lahis", "exact"}) {
            const auto m = io::load_importance_csv(matrix_path(dir, kind, lang));
            std::vector<std::vector<double>> rows;
            for (int l = 0; l < m.n_layers; ++l) {
                std::vector<double> row;
                for (int h = 0; h < m.n_heads; ++h) row.push_back(m.at(l, h));
                rows.push_back(std::move(row));
            }
            heatmap::export_svg_heatmap(rows, dir + "/heatmap_" + kind + "_lang" + std::to_string(lang) + ".svg",
                                        kind + " importance, language " + std::to_string(lang));
        }
    }
    const auto spec = io::load_csv_matrix(dir + "/specificity.csv");
    heatmap::export_svg_heatmap(spec.rows, dir + "/heatmap_specificity.svg", "PPL increase (row deactivated)");
}

void stage_summary(const RunConfig &cfg, const std::string &dir) {
    nlohmann::json j;
    j["fingerprints"] = nlohmann::json::object();
    for (const auto &[k, v] : base_fingerprints(cfg, dir)) j["fingerprints"][k] = v;

    // estimator fidelity: spearman between lahis and the exact oracle
    nlohmann::json fidelity = nlohmann::json::array();
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        const auto est = io::load_importance_csv(matrix_path(dir, "lahis", lang));
        const auto oracle = io::load_importance_csv(matrix_path(dir, "exact", lang));
        fidelity.push_back({{"language", lang},
                            {"spearman_lahis_vs_exact", stats::spearman_rho(est.scores, oracle.scores)}});
    }
    j["estimator_fidelity"] = std::move(fidelity);
    io::write_file(dir + "/summary.json", j.dump(1) + "\n");
}

void run_pipeline(const RunConfig &cfg, const std::string &dir) {
    cfg.validate();
    fs::create_directories(dir);
    io::write_file(dir + "/run_config.json", cfg.to_json_string());
    stage_corpus(cfg, dir);
    stage_train(cfg, dir);
    stage_score(cfg, dir);
    stage_heads(cfg, dir);
    stage_eval(cfg, dir);
    stage_adapt(cfg, dir);
    stage_export(cfg, dir);
    stage_summary(cfg, dir);
}

}  // namespace headlens::pipeline
