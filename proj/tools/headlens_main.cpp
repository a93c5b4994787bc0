#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <json.hpp>

#include "headlens/checkpoint.hpp"
#include "headlens/heatmap.hpp"
#include "headlens/io.hpp"
#include "headlens/pipeline.hpp"
#include "headlens/stats.hpp"

using namespace headlens;
namespace pl = headlens::pipeline;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string dir = "run";
    int64_t seed_override = -1;
};

pl::RunConfig load_config(const GlobalArgs &g) {
    pl::RunConfig cfg;
    if (!g.config_path.empty()) cfg = pl::RunConfig::from_json_file(g.config_path);
    if (g.seed_override >= 0) cfg.seed = static_cast<uint64_t>(g.seed_override);
    return cfg;
}

heads::HeadSet load_exclude(const std::string &path) {
    if (path.empty()) return heads::HeadSet{};
    return io::load_headset_json(path);
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"headlens: attention-head importance, intervention, and adaptation on a desk-scale "
                 "multilingual transformer"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "run configuration JSON");
    app.add_option("--dir", g.dir, "run directory for artifacts")->capture_default_str();
    app.add_option("--seed", g.seed_override, "override the config seed");

    // corpus gen
    auto *corpus = app.add_subcommand("corpus", "corpus generation");
    corpus->require_subcommand(1);
    corpus->add_subcommand("gen", "generate registry, training/eval corpora, and prompts");

    // train
    app.add_subcommand("train", "train the model on the mixed corpus");

    // score
    auto *score = app.add_subcommand("score", "compute head importance for one language");
    std::string score_method = "lahis";
    int score_lang = 0;
    score->add_option("--method", score_method, "lahis | ablate")->check(CLI::IsMember({"lahis", "ablate"}));
    score->add_option("--lang", score_lang, "language id")->required();

    // heads
    auto *heads_cmd = app.add_subcommand("heads", "head-set selection");
    heads_cmd->require_subcommand(1);
    auto *hs_select = heads_cmd->add_subcommand("select", "top-fraction heads of one importance matrix");
    std::string hs_matrix, hs_out = "headset.json";
    double hs_fraction = 0.02;
    hs_select->add_option("--matrix", hs_matrix, "importance CSV")->required();
    hs_select->add_option("--fraction", hs_fraction)->capture_default_str();
    hs_select->add_option("--out", hs_out)->capture_default_str();
    auto *hs_general = heads_cmd->add_subcommand("general", "intersection of per-language top sets");
    double hg_fraction = 0.10;
    std::string hg_out;
    hs_general->add_option("--fraction", hg_fraction, "fraction (0 = sweep from config)");
    hs_general->add_option("--out", hg_out, "output JSON (default <dir>/heads_general.json)");
    auto *hs_specific = heads_cmd->add_subcommand("specific", "language top set minus general heads");
    int sp_lang = 0;
    hs_specific->add_option("--lang", sp_lang)->required();
    auto *hs_random = heads_cmd->add_subcommand("random", "seeded random head set");
    int hr_n = 1;
    uint64_t hr_seed = 1;
    std::string hr_exclude, hr_out = "heads_random.json";
    hs_random->add_option("--n", hr_n)->required();
    hs_random->add_option("--rng-seed", hr_seed)->capture_default_str();
    hs_random->add_option("--exclude", hr_exclude, "head-set JSON to exclude");
    hs_random->add_option("--out", hr_out)->capture_default_str();

    // gates
    auto *gates_cmd = app.add_subcommand("gates", "gate matrices");
    gates_cmd->require_subcommand(1);
    auto *gates_build = gates_cmd->add_subcommand("build", "build a gate matrix from head-set assignments");
    std::string gb_assign, gb_out = "gates.csv";
    gates_build->add_option("--assign", gb_assign, "JSON: {entries:[{headset:path,gate:v},...]}")->required();
    gates_build->add_option("--out", gb_out)->capture_default_str();

    // eval
    auto *eval_cmd = app.add_subcommand("eval", "evaluation harnesses");
    eval_cmd->require_subcommand(1);
    auto *ev_ppl = eval_cmd->add_subcommand("ppl", "per-language perplexity under optional gates");
    std::string ev_gates, ev_out;
    ev_ppl->add_option("--gates", ev_gates, "gate matrix CSV");
    ev_ppl->add_option("--out", ev_out, "output JSON (default stdout)");
    eval_cmd->add_subcommand("specificity", "L x L PPL-increase matrix for specific head sets");
    auto *ev_conflict = eval_cmd->add_subcommand("conflict", "cross-lingual steering sweep for one pair");
    int cf_a = -1, cf_b = -1;
    ev_conflict->add_option("--lang-a", cf_a)->required();
    ev_conflict->add_option("--lang-b", cf_b)->required();
    eval_cmd->add_subcommand("offtarget", "generation language accuracy with head suppression");

    // adapt
    auto *adapt_cmd = app.add_subcommand("adapt", "language-head mask adaptation");
    adapt_cmd->require_subcommand(1);
    auto *ad_train = adapt_cmd->add_subcommand("train", "train the mask for one language");
    int ad_lang = 0;
    ad_train->add_option("--lang", ad_lang)->required();
    auto *ad_eval = adapt_cmd->add_subcommand("eval", "evaluate a mask on the held-out split");
    int ae_lang = 0;
    std::string ae_mask;
    ad_eval->add_option("--lang", ae_lang)->required();
    ad_eval->add_option("--mask", ae_mask, "mask JSON (default all-ones)");

    // export
    auto *export_cmd = app.add_subcommand("export", "artifact exporters");
    export_cmd->require_subcommand(1);
    auto *ex_heat = export_cmd->add_subcommand("heatmap", "render a matrix CSV as an SVG heatmap");
    std::string eh_in, eh_out = "heatmap.svg", eh_title = "importance";
    double eh_lo = 0.0, eh_hi = 0.0;
    ex_heat->add_option("--in", eh_in, "matrix CSV")->required();
    ex_heat->add_option("--out", eh_out)->capture_default_str();
    ex_heat->add_option("--title", eh_title)->capture_default_str();
    ex_heat->add_option("--lo", eh_lo, "color-scale minimum (with --hi)");
    ex_heat->add_option("--hi", eh_hi, "color-scale maximum");

    // pipeline
    app.add_subcommand("pipeline", "run every stage end to end");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);  // help on stdout, exit 0
    } catch (const CLI::ParseError &e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        const pl::RunConfig cfg = load_config(g);

        if (corpus->parsed()) {
            pl::stage_corpus(cfg, g.dir);
        } else if (app.got_subcommand("train")) {
            pl::stage_train(cfg, g.dir);
        } else if (score->parsed()) {
            nn::ModelD model = nn::load_checkpoint(pl::checkpoint_path(g.dir)).cast<double>();
            const auto corpus_data = synth::load_corpus(pl::eval_corpus_path(g.dir, score_lang));
            std::map<std::string, std::string> comments;
            comments["config"] = cfg.fingerprint();
            comments["seed"] = std::to_string(cfg.seed);
            comments["checkpoint"] = nn::file_fingerprint(pl::checkpoint_path(g.dir));
            if (score_method == "lahis") {
                const auto res = lahis::lahis_scores<double>(model, corpus_data);
                io::save_importance_csv(res.lahis, pl::matrix_path(g.dir, "lahis", score_lang), comments);
                io::save_importance_csv(res.taylor, pl::matrix_path(g.dir, "taylor", score_lang), comments);
                io::save_wneg_csv(res.wneg, pl::matrix_path(g.dir, "wneg", score_lang), comments);
                std::printf("wrote %s\n", pl::matrix_path(g.dir, "lahis", score_lang).c_str());
            } else {
                const auto oracle = lahis::exact_ablation_scores<double>(model, corpus_data);
                io::save_importance_csv(oracle, pl::matrix_path(g.dir, "exact", score_lang), comments);
                std::printf("wrote %s\n", pl::matrix_path(g.dir, "exact", score_lang).c_str());
            }
        } else if (heads_cmd->parsed()) {
            if (hs_select->parsed()) {
                const auto m = io::load_importance_csv(hs_matrix);
                io::save_headset_json(heads::top_fraction(m, hs_fraction), hs_out);
                std::printf("wrote %s\n", hs_out.c_str());
            } else if (hs_general->parsed()) {
                std::vector<lahis::ImportanceMatrix> ms;
                for (int lang = 0; lang < cfg.n_languages; ++lang) {
                    ms.push_back(io::load_importance_csv(pl::matrix_path(g.dir, "lahis", lang)));
                }
                heads::HeadSet set;
                if (hg_fraction > 0.0) {
                    set = heads::general_heads(ms, hg_fraction);
                } else {
                    for (double f : cfg.general_sweep) {
                        set = heads::general_heads(ms, f);
                        if (!set.members.empty()) break;
                    }
                }
                const std::string out = hg_out.empty() ? pl::headset_path(g.dir, "general") : hg_out;
                io::save_headset_json(set, out);
                std::printf("wrote %s (%d heads)\n", out.c_str(), set.size());
            } else if (hs_specific->parsed()) {
                const auto m = io::load_importance_csv(pl::matrix_path(g.dir, "lahis", sp_lang));
                const auto general = io::load_headset_json(pl::headset_path(g.dir, "general"));
                const auto set = heads::specific_heads(m, cfg.specific_fraction, general);
                const std::string out = pl::headset_path(g.dir, "specific_lang" + std::to_string(sp_lang));
                io::save_headset_json(set, out);
                std::printf("wrote %s (%d heads)\n", out.c_str(), set.size());
            } else if (hs_random->parsed()) {
                const auto set = heads::random_heads(hr_n, cfg.model.n_layers, cfg.model.n_heads,
                                                     load_exclude(hr_exclude), hr_seed);
                io::save_headset_json(set, hr_out);
                std::printf("wrote %s\n", hr_out.c_str());
            }
        } else if (gates_cmd->parsed()) {
            const auto spec = nlohmann::json::parse(io::slurp_file(gb_assign));
            eval::GateAssignment assignment;
            assignment.id = spec.value("id", "custom");
            for (const auto &e : spec.at("entries")) {
                eval::GateAssignment::Entry entry;
                entry.set = io::load_headset_json(e.at("headset").get<std::string>());
                entry.gate = e.at("gate").get<double>();
                assignment.entries.push_back(std::move(entry));
            }
            const auto gates = eval::build_gates(cfg.model, assignment);
            std::map<std::string, std::string> comments{{"config", cfg.fingerprint()}};
            io::save_gates_csv(gates, gb_out, comments);
            std::printf("wrote %s\n", gb_out.c_str());
        } else if (eval_cmd->parsed()) {
            nn::ModelF model = nn::load_checkpoint(pl::checkpoint_path(g.dir));
            if (ev_ppl->parsed()) {
                nn::GateMatrix gates = nn::GateMatrix::all_ones(cfg.model);
                if (!ev_gates.empty()) gates = io::load_gates_csv(ev_gates);
                nlohmann::json out;
                out["config"] = cfg.fingerprint();
                out["gates"] = ev_gates.empty() ? "all-ones" : ev_gates;
                nlohmann::json arr = nlohmann::json::array();
                for (int lang = 0; lang < cfg.n_languages; ++lang) {
                    const auto corpus_data = synth::load_corpus(pl::eval_corpus_path(g.dir, lang));
                    arr.push_back({{"language", lang}, {"ppl", eval::perplexity(model, &gates, corpus_data)}});
                }
                out["per_language"] = std::move(arr);
                const std::string text = out.dump(1) + "\n";
                if (ev_out.empty()) std::fputs(text.c_str(), stdout);
                else io::write_file(ev_out, text);
            } else if (eval_cmd->got_subcommand("specificity") || eval_cmd->got_subcommand("offtarget") ||
                       ev_conflict->parsed()) {
                // these harnesses share artifacts; run the full eval stage
                pl::stage_eval(cfg, g.dir);
                std::printf("wrote evaluation reports under %s\n", g.dir.c_str());
            }
        } else if (adapt_cmd->parsed()) {
            nn::ModelF model = nn::load_checkpoint(pl::checkpoint_path(g.dir));
            const auto reg = synth::load_registry(pl::registry_path(g.dir));
            if (ad_train->parsed()) {
                const auto task = adapt::make_adapt_task(reg, ad_lang, cfg.adapt_train_samples,
                                                         cfg.adapt_test_samples,
                                                         derive_seed(cfg.seed, "adapt-task",
                                                                     static_cast<uint64_t>(ad_lang)));
                const auto headset =
                    io::load_headset_json(pl::headset_path(g.dir, "adapt_lang" + std::to_string(ad_lang)));
                auto mask = adapt::init_mask(cfg.model, headset);
                const auto trained =
                    adapt::train_mask(model, mask, task, cfg.adapt_epochs, cfg.adapt_lr,
                                      derive_seed(cfg.seed, "adapt-train", static_cast<uint64_t>(ad_lang)));
                const std::string out = g.dir + "/mask_lang" + std::to_string(ad_lang) + ".json";
                adapt::save_mask_json(trained, out);
                std::printf("wrote %s (accuracy %.4f)\n", out.c_str(),
                            adapt::eval_accuracy(model, trained, task.test));
            } else if (ad_eval->parsed()) {
                const auto task = adapt::make_adapt_task(reg, ae_lang, cfg.adapt_train_samples,
                                                         cfg.adapt_test_samples,
                                                         derive_seed(cfg.seed, "adapt-task",
                                                                     static_cast<uint64_t>(ae_lang)));
                adapt::LanguageHeadMask mask;
                if (ae_mask.empty()) {
                    heads::HeadSet whole;
                    whole.label = "all";
                    for (int l = 0; l < cfg.model.n_layers; ++l) {
                        for (int h = 0; h < cfg.model.n_heads; ++h) whole.members.push_back({l, h});
                    }
                    mask = adapt::init_mask(cfg.model, whole);
                } else {
                    mask = adapt::load_mask_json(ae_mask);
                }
                std::printf("accuracy %.4f (language %d, %zu probes)\n",
                            adapt::eval_accuracy(model, mask, task.test), ae_lang, task.test.size());
            }
        } else if (export_cmd->parsed()) {
            const auto m = io::load_csv_matrix(eh_in);
            heatmap::export_svg_heatmap(m.rows, eh_out, eh_title, eh_lo, eh_hi);
            std::printf("wrote %s\n", eh_out.c_str());
        } else if (app.got_subcommand("pipeline")) {
            pl::run_pipeline(cfg, g.dir);
            std::printf("pipeline complete: %s\n", g.dir.c_str());
        }
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
