// Acceptance suite: drives the full pipeline end to end (twice, for the
// determinism criterion) and checks every release criterion at its stated
// tolerance, printing one PASS/FAIL line per criterion.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>

#include <json.hpp>

#include "headlens/checkpoint.hpp"
#include "headlens/io.hpp"
#include "headlens/pipeline.hpp"
#include "headlens/stats.hpp"

using namespace headlens;
namespace fs = std::filesystem;
namespace pl = headlens::pipeline;

namespace {

const std::string kRunA = "acceptance_runs/A";
const std::string kRunB = "acceptance_runs/B";

struct Criterion {
    int id;
    bool pass;
    std::string detail;
};

void report(int id, bool pass, const std::string &what, const std::string &detail) {
    std::printf("[%s] criterion %2d: %s%s%s\n", pass ? "PASS" : "FAIL", id, what.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
}

int run_cli(const std::string &args) {
    const std::string cmd = std::string(HEADLENS_CLI_PATH) + " " + args;
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct Fixture {
    bool pipelines_ran = false;

    Fixture() {
        fs::remove_all("acceptance_runs");
        fs::create_directories("acceptance_runs");
        std::fprintf(stderr, "acceptance: running pipeline (run A)...\n");
        const int a = run_cli("--dir " + kRunA + " --seed 7 pipeline > acceptance_runs/pipeA.log");
        std::fprintf(stderr, "acceptance: running pipeline (run B)...\n");
        const int b = run_cli("--dir " + kRunB + " --seed 7 pipeline > acceptance_runs/pipeB.log");
        pipelines_ran = (a == 0 && b == 0);
    }
};

Fixture &fixture() {
    static Fixture f;
    return f;
}

nlohmann::json load_json(const std::string &path) { return nlohmann::json::parse(io::slurp_file(path)); }

pl::RunConfig default_config() { return pl::RunConfig{}; }

}  // namespace

TEST_CASE("criterion 1: gate/mask gradients match central finite differences (64-bit)") {
    REQUIRE(fixture().pipelines_ran);
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = default_config();
    nn::ModelD model = nn::load_checkpoint(pl::checkpoint_path(kRunA)).cast<double>();

    int checked = 0;
    double worst = 0.0;
    const double fd_step = 1e-5;

    // seven 2-sequence batches x 32 entries = 224 sampled entries; the first
    // four at the all-ones (mask) point, the rest at assorted gate values
    for (int trial = 0; trial < 7; ++trial) {
        const auto corpus = synth::load_corpus(pl::eval_corpus_path(kRunA, trial % cfg.n_languages));
        std::vector<std::vector<int>> batch = {corpus.sequences[static_cast<size_t>(2 * trial)],
                                               corpus.sequences[static_cast<size_t>(2 * trial + 1)]};
        ad::TensorD base_scales({cfg.model.n_layers, cfg.model.n_heads}, 1.0);
        if (trial >= 4) {
            DetRng rng(1000 + static_cast<uint64_t>(trial));
            for (auto &v : base_scales.data) v = 0.5 + 1.5 * rng.next_double();
        }

        auto loss_at = [&](const ad::TensorD &scales) {
            double total = 0.0;
            for (const auto &seq : batch) {
                ad::ParameterD p("scales", scales);
                const auto targets = nn::lm_targets<double>(seq);
                auto g = nn::build_sequence_graph<double>(model, nullptr, &p, seq, &targets);
                total += g.tape.value(g.loss).scalar();
            }
            return total / static_cast<double>(batch.size());
        };

        ad::ParameterD scales("scales", base_scales);
        scales.zero_grad();
        for (const auto &seq : batch) {
            const auto targets = nn::lm_targets<double>(seq);
            auto g = nn::build_sequence_graph<double>(model, nullptr, &scales, seq, &targets);
            g.tape.backward(g.loss, 1.0 / static_cast<double>(batch.size()));
        }

        for (int l = 0; l < cfg.model.n_layers; ++l) {
            for (int h = 0; h < cfg.model.n_heads; ++h) {
                ad::TensorD probe = base_scales;
                const double keep = probe.at2(l, h);
                probe.at2(l, h) = keep + fd_step;
                const double up = loss_at(probe);
                probe.at2(l, h) = keep - fd_step;
                const double dn = loss_at(probe);
                const double fd = (up - dn) / (2.0 * fd_step);
                const double ad_grad = scales.grad.at2(l, h);
                const double rel = std::abs(fd - ad_grad) / std::max({std::abs(fd), std::abs(ad_grad), 1e-8});
                worst = std::max(worst, rel);
                ++checked;
            }
        }
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = checked >= 200 && worst < 1e-3 && seconds < 120.0;
    report(1, pass, "gate/mask gradient check",
           std::to_string(checked) + " entries, worst rel err " + io::format_double(worst) + ", " +
               io::format_double(seconds) + " s");
    CHECK(checked >= 200);
    CHECK(worst < 1e-3);
    CHECK(seconds < 120.0);
}

TEST_CASE("criterion 2: all-ones gates reproduce vanilla losses, PPL, and generations bit-exactly") {
    REQUIRE(fixture().pipelines_ran);
    const auto cfg = default_config();
    nn::ModelF model = nn::load_checkpoint(pl::checkpoint_path(kRunA));
    const auto reg = synth::load_registry(pl::registry_path(kRunA));
    const nn::GateMatrix ones = nn::GateMatrix::all_ones(cfg.model);

    bool pass = true;
    for (int lang = 0; lang < cfg.n_languages && pass; ++lang) {
        const auto corpus = synth::load_corpus(pl::eval_corpus_path(kRunA, lang));
        const auto vl = nn::forward_loss<float>(model, nullptr, corpus.sequences);
        const auto gl = nn::forward_loss<float>(model, &ones, corpus.sequences);
        for (size_t i = 0; i < vl.per_sequence.size(); ++i) {
            if (vl.per_sequence[i] != gl.per_sequence[i]) pass = false;
        }
        if (eval::perplexity(model, nullptr, corpus) != eval::perplexity(model, &ones, corpus)) pass = false;

        const auto prompts = synth::load_corpus(pl::prompts_path(kRunA, lang)).sequences;
        for (size_t p = 0; p < std::min<size_t>(prompts.size(), 8); ++p) {
            const auto a = nn::generate<float>(model, nullptr, prompts[p], cfg.offtarget_gen_tokens, 0.0, 11);
            const auto b = nn::generate<float>(model, &ones, prompts[p], cfg.offtarget_gen_tokens, 0.0, 11);
            if (a != b) pass = false;
        }
    }
    report(2, pass, "gate identity (losses, PPL, generations)", "");
    CHECK(pass);
}

TEST_CASE("criterion 3: Spearman rho >= 0.6 between LAHIS and the exact oracle, per language") {
    REQUIRE(fixture().pipelines_ran);
    const auto cfg = default_config();
    bool pass = true;
    std::string detail;
    for (int lang = 0; lang < cfg.n_languages; ++lang) {
        const auto est = io::load_importance_csv(pl::matrix_path(kRunA, "lahis", lang));
        const auto oracle = io::load_importance_csv(pl::matrix_path(kRunA, "exact", lang));
        const double rho = stats::spearman_rho(est.scores, oracle.scores);
        if (!detail.empty()) detail += ", ";
        detail += "lang" + std::to_string(lang) + "=" + io::format_double(rho);
        if (!(rho >= 0.6)) pass = false;
    }
    report(3, pass, "estimator fidelity (Spearman vs oracle)", detail);
    CHECK(pass);
}

TEST_CASE("criterion 4: single-pass claim verified by pass counters") {
    REQUIRE(fixture().pipelines_ran);
    const auto cfg = default_config();
    const auto j = load_json(kRunA + "/pass_counts.json");
    const int H = cfg.model.n_layers * cfg.model.n_heads;
    bool pass = true;
    double min_ratio = 1e9;
    for (const auto &lj : j.at("per_language")) {
        const auto S = lj.at("sequences").get<uint64_t>();
        const auto lf = lj.at("lahis_forwards").get<uint64_t>();
        const auto lb = lj.at("lahis_backwards").get<uint64_t>();
        const auto of = lj.at("oracle_forwards").get<uint64_t>();
        const auto ob = lj.at("oracle_backwards").get<uint64_t>();
        if (lf != S || lb != S || of != static_cast<uint64_t>(H + 1) * S || ob != 0) pass = false;
        const double ratio = static_cast<double>(of) / static_cast<double>(lf + lb);
        min_ratio = std::min(min_ratio, ratio);
    }
    if (!(min_ratio >= 8.0)) pass = false;
    report(4, pass, "pass counts (S fwd + S bwd vs (H+1)S fwd)",
           "min reduction x" + io::format_double(min_ratio));
    CHECK(pass);
}

TEST_CASE("criterion 5: specific-head deactivation beats random sets for every language") {
    REQUIRE(fixture().pipelines_ran);
    const auto j = load_json(kRunA + "/ppl_random_specific.json");
    bool pass = true;
    std::string detail;
    for (const auto &lj : j.at("per_language")) {
        const double specific = lj.at("specific_delta").get<double>();
        const double rnd = lj.at("mean_delta").get<double>();
        if (!detail.empty()) detail += ", ";
        detail += "lang" + lj.at("language").dump() + ": " + io::format_double(specific) + " vs rnd " +
                  io::format_double(rnd);
        if (!(specific > rnd)) pass = false;
    }
    report(5, pass, "targeted vs random PPL increase (own language)", detail);
    CHECK(pass);
}

TEST_CASE("criterion 6: specificity-matrix diagonal is the row maximum for a strict majority") {
    REQUIRE(fixture().pipelines_ran);
    const auto csv = io::load_csv_matrix(kRunA + "/specificity.csv");
    const int L = static_cast<int>(csv.rows.size());
    int diag_max = 0;
    for (int i = 0; i < L; ++i) {
        bool is_max = true;
        for (int jj = 0; jj < L; ++jj) {
            if (jj != i && csv.rows[static_cast<size_t>(i)][static_cast<size_t>(jj)] >=
                               csv.rows[static_cast<size_t>(i)][static_cast<size_t>(i)]) {
                is_max = false;
            }
        }
        diag_max += is_max ? 1 : 0;
    }
    const bool pass = 2 * diag_max > L;
    report(6, pass, "specificity diagonal dominance",
           std::to_string(diag_max) + " of " + std::to_string(L) + " rows");
    CHECK(pass);
}

TEST_CASE("criterion 7: general heads hurt every language, more than random on average") {
    REQUIRE(fixture().pipelines_ran);
    const auto ppl = load_json(kRunA + "/ppl_report.json");
    std::map<int, double> vanilla, general;
    for (const auto &rep : ppl.at("reports")) {
        for (const auto &e : rep.at("per_language")) {
            const int lang = e.at("language").get<int>();
            const double v = e.at("ppl").get<double>();
            if (rep.at("config") == "vanilla") vanilla[lang] = v;
            else if (rep.at("config") == "general-deactivated") general[lang] = v;
        }
    }
    bool strictly_worse_everywhere = true;
    for (const auto &[lang, v] : vanilla) {
        if (!(general.at(lang) > v)) strictly_worse_everywhere = false;
    }
    const auto rnd = load_json(kRunA + "/ppl_random_general.json");
    std::vector<double> general_deltas, random_means;
    for (const auto &lj : rnd.at("per_language")) {
        general_deltas.push_back(lj.at("general_delta").get<double>());
        random_means.push_back(lj.at("mean_delta").get<double>());
    }
    const double avg_general = stats::mean(general_deltas);
    const double avg_random = stats::mean(random_means);
    const bool pass = strictly_worse_everywhere && avg_general > avg_random;
    report(7, pass, "language-general degradation",
           "avg dPPL " + io::format_double(avg_general) + " vs random " + io::format_double(avg_random) +
               (strictly_worse_everywhere ? ", worse on every language" : ", NOT worse everywhere"));
    CHECK(pass);
}

TEST_CASE("criterion 8: best steering configuration shifts context1 preference by >= 5 points") {
    REQUIRE(fixture().pipelines_ran);
    const auto cfg = default_config();
    REQUIRE(cfg.conflict_pairs.size() >= 3);
    REQUIRE(cfg.conflict_probes >= 200);
    std::vector<double> shifts;
    std::string detail;
    for (const auto &[a, b] : cfg.conflict_pairs) {
        const auto j = load_json(kRunA + "/conflict_" + std::to_string(a) + "_" + std::to_string(b) + ".json");
        double vanilla_c1 = -1.0, best_c1 = -1.0;
        for (const auto &rep : j.at("reports")) {
            const double c1 = rep.at("share_context1").get<double>();
            if (rep.at("config") == "vanilla") vanilla_c1 = c1;
            else best_c1 = std::max(best_c1, c1);
        }
        REQUIRE(vanilla_c1 >= 0.0);
        shifts.push_back(best_c1 - vanilla_c1);
        if (!detail.empty()) detail += ", ";
        detail += std::to_string(a) + "->" + std::to_string(b) + ": +" + io::format_double(100.0 * shifts.back()) +
                  "pt";
    }
    const double avg_shift = stats::mean(shifts);
    const bool pass = avg_shift >= 0.05;
    report(8, pass, "cross-lingual steering shift",
           detail + "; avg +" + io::format_double(100.0 * avg_shift) + "pt");
    CHECK(pass);
}

TEST_CASE("criterion 9: suppressing dominant-language heads fixes off-target generation") {
    REQUIRE(fixture().pipelines_ran);
    const auto cfg = default_config();
    const auto j = load_json(kRunA + "/offtarget.json");
    std::map<int, std::pair<double, double>> vanilla;  // lang -> (acc, ll)
    for (const auto &rep : j.at("reports")) {
        if (rep.at("config") != "vanilla") continue;
        for (const auto &e : rep.at("per_language")) {
            vanilla[e.at("language").get<int>()] = {e.at("language_accuracy").get<double>(),
                                                    e.at("grammar_log_likelihood").get<double>()};
        }
    }
    bool pass = false;
    std::string detail;
    for (const auto &rep : j.at("reports")) {
        if (rep.at("config") == "vanilla") continue;
        int improved = 0, non_dominant = 0;
        bool quality_ok = true;
        for (const auto &e : rep.at("per_language")) {
            const int lang = e.at("language").get<int>();
            if (lang == cfg.dominant_language) continue;
            ++non_dominant;
            const double acc = e.at("language_accuracy").get<double>();
            const double ll = e.at("grammar_log_likelihood").get<double>();
            if (acc > vanilla.at(lang).first) ++improved;
            // quality proxy on the NLL scale: no more than 5% worse
            const double q_van = -vanilla.at(lang).second;
            const double q_sup = -ll;
            if (q_sup > q_van * 1.05) quality_ok = false;
        }
        const bool this_pass = improved >= 4 && non_dominant == cfg.n_languages - 1 && quality_ok;
        detail += rep.at("config").get<std::string>() + ": " + std::to_string(improved) + "/" +
                  std::to_string(non_dominant) + " improved" + (quality_ok ? "" : " (quality degraded)") + "; ";
        pass = pass || this_pass;
    }
    report(9, pass, "off-target mitigation", detail);
    CHECK(pass);
}

TEST_CASE("criterion 10: trained language-head mask beats vanilla and random masks") {
    REQUIRE(fixture().pipelines_ran);
    const auto cfg = default_config();
    REQUIRE(cfg.adapt_random_masks >= 5);
    const auto j = load_json(kRunA + "/adapt_report.json");
    std::vector<double> trained, vanilla, random_mean;
    int max_trainable = 0;
    for (const auto &lj : j.at("per_language")) {
        trained.push_back(lj.at("trained_accuracy").get<double>());
        vanilla.push_back(lj.at("vanilla_accuracy").get<double>());
        random_mean.push_back(lj.at("random_mean_accuracy").get<double>());
        max_trainable = std::max(max_trainable, lj.at("trainable_entries").get<int>());
    }
    const double t = stats::mean(trained), v = stats::mean(vanilla), r = stats::mean(random_mean);
    const bool pass = t > v && t > r && max_trainable <= 32 && j.at("epochs").get<int>() == 2 &&
                      j.at("train_samples").get<int>() == 200;
    report(10, pass, "mask adaptation",
           "trained " + io::format_double(t) + " vs vanilla " + io::format_double(v) + " vs random " +
               io::format_double(r) + " (<= " + std::to_string(max_trainable) + " trainable entries)");
    CHECK(pass);
}

TEST_CASE("logit lens: enhancing language-A heads does not reduce final-layer mass on A") {
    REQUIRE(fixture().pipelines_ran);
    const auto j = load_json(kRunA + "/logit_lens.json");
    const auto vanilla = j.at("vanilla_lang_a_mass").get<std::vector<double>>();
    const auto enhanced = j.at("enhanced_lang_a_mass").get<std::vector<double>>();
    REQUIRE(vanilla.size() >= 2);
    const size_t n = vanilla.size();
    const double v_tail = 0.5 * (vanilla[n - 2] + vanilla[n - 1]);
    const double e_tail = 0.5 * (enhanced[n - 2] + enhanced[n - 1]);
    CHECK(e_tail >= v_tail - 1e-12);
}

TEST_CASE("desk training: loss after the configured steps is below the step-0 loss") {
    REQUIRE(fixture().pipelines_ran);
    const auto j = load_json(kRunA + "/losscurve.json");
    const double first = j.at("first_loss").get<double>();
    const double final_loss = j.at("final_loss").get<double>();
    CHECK(final_loss < first);
}

TEST_CASE("criterion 11: pipeline --seed 7 twice yields byte-identical artifact trees") {
    REQUIRE(fixture().pipelines_ran);
    std::set<std::string> names_a, names_b;
    for (const auto &e : fs::recursive_directory_iterator(kRunA)) {
        if (e.is_regular_file()) names_a.insert(fs::relative(e.path(), kRunA).string());
    }
    for (const auto &e : fs::recursive_directory_iterator(kRunB)) {
        if (e.is_regular_file()) names_b.insert(fs::relative(e.path(), kRunB).string());
    }
    bool pass = names_a == names_b && !names_a.empty();
    int mismatches = 0;
    if (pass) {
        for (const auto &name : names_a) {
            if (io::slurp_file(kRunA + "/" + name) != io::slurp_file(kRunB + "/" + name)) {
                ++mismatches;
                std::fprintf(stderr, "  mismatch: %s\n", name.c_str());
            }
        }
        pass = mismatches == 0;
    }
    report(11, pass, "byte-identical artifact trees",
           std::to_string(names_a.size()) + " files" +
               (mismatches ? (", " + std::to_string(mismatches) + " mismatched") : ""));
    CHECK(pass);
}
