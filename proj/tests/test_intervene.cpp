#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "headlens/intervene.hpp"
#include "headlens/io.hpp"
#include "headlens/train.hpp"

using namespace headlens;
using namespace headlens::nn;
using namespace headlens::eval;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_groups = 2;
    c.d_model = 32;
    c.d_head = 8;
    c.vocab_size = 256;
    c.max_seq_len = 32;
    c.mlp_hidden = 64;
    c.seed = 9;
    return c;
}

struct Fixture {
    synth::Registry reg = synth::make_registry(3, 256, 32, 31);
    ModelF model;
    std::vector<synth::Corpus> corpora;

    Fixture() {
        std::vector<std::vector<int>> train;
        for (int lang = 0; lang < 3; ++lang) {
            auto c = synth::sample_corpus(reg, lang, 40, 32, 70 + lang);
            for (auto &s : c.sequences) train.push_back(std::move(s));
        }
        TrainConfig tc;
        tc.steps = 60;
        tc.batch_size = 4;
        tc.lr = 1e-3f;
        tc.warmup_steps = 10;
        model = train_model(small_config(), train, tc);
        for (int lang = 0; lang < 3; ++lang) {
            corpora.push_back(synth::sample_corpus(reg, lang, 8, 32, 500 + lang));
        }
    }
};

Fixture &fixture() {
    static Fixture f;
    return f;
}

heads::HeadSet make_set(std::vector<heads::HeadId> ids, const std::string &label) {
    heads::HeadSet s;
    s.label = label;
    s.members = std::move(ids);
    std::sort(s.members.begin(), s.members.end());
    return s;
}

}  // namespace

TEST_CASE("build_gates: empty, single zero, conflicts") {
    const ModelConfig cfg = small_config();
    GateAssignment empty;
    const auto ones = build_gates(cfg, empty);
    CHECK(ones.is_all_ones());

    GateAssignment one;
    one.entries.push_back({make_set({{0, 3}}, "x"), 0.0});
    const auto g = build_gates(cfg, one);
    int zeros = 0;
    for (double v : g.values) {
        if (v == 0.0) ++zeros;
    }
    CHECK(zeros == 1);
    CHECK(g.at(0, 3) == 0.0);

    GateAssignment overlap;
    overlap.entries.push_back({make_set({{1, 2}, {0, 0}}, "a"), 2.0});
    overlap.entries.push_back({make_set({{1, 2}}, "b"), 0.0});
    CHECK_THROWS_WITH_AS(build_gates(cfg, overlap), doctest::Contains("(1,2)"), ContractError);

    GateAssignment oob;
    oob.entries.push_back({make_set({{5, 0}}, "c"), 1.0});
    CHECK_THROWS_AS(build_gates(cfg, oob), ContractError);

    GateAssignment neg;
    neg.entries.push_back({make_set({{0, 0}}, "d"), -1.0});
    CHECK_THROWS_AS(build_gates(cfg, neg), ContractError);
}

TEST_CASE("perplexity: uniform logits give PPL = vocab size; gate identity; empty corpus") {
    auto &f = fixture();
    ModelF uniform = init_model(small_config());
    std::fill(uniform.unembed.value.data.begin(), uniform.unembed.value.data.end(), 0.0f);
    const double ppl = perplexity(uniform, nullptr, f.corpora[0]);
    CHECK(std::abs(ppl - 256.0) <= 1e-6 * 256.0);

    const GateMatrix ones = GateMatrix::all_ones(f.model.config);
    const double vanilla = perplexity(f.model, nullptr, f.corpora[1]);
    const double gated = perplexity(f.model, &ones, f.corpora[1]);
    CHECK(vanilla == gated);
    CHECK(vanilla > 0.0);

    synth::Corpus empty;
    CHECK_THROWS_AS(perplexity(f.model, nullptr, empty), ContractError);
}

TEST_CASE("specificity matrix: shape, labels, empty-set row is zero") {
    auto &f = fixture();
    std::vector<heads::HeadSet> sets;
    sets.push_back(make_set({}, "0"));          // empty: zero row
    sets.push_back(make_set({{0, 1}}, "1"));
    sets.push_back(make_set({{1, 2}}, "2"));
    const auto m = specificity_matrix(f.model, sets, f.corpora);
    CHECK(m.size() == 3);
    CHECK(m.language_ids == std::vector<int>{0, 1, 2});
    for (int j = 0; j < 3; ++j) CHECK(m.at(0, j) == 0.0);

    save_specificity(m, "spec_tmp.json", "spec_tmp.csv", {{"config", "t"}});
    const auto csv = io::load_csv_matrix("spec_tmp.csv");
    CHECK(csv.rows.size() == 3);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) CHECK(csv.rows[static_cast<size_t>(i)][static_cast<size_t>(j)] == m.at(i, j));
    }
    std::remove("spec_tmp.json");
    std::remove("spec_tmp.csv");
}

TEST_CASE("conflict_eval: shares sum to one, sweep shape, contracts") {
    auto &f = fixture();
    const auto probes = synth::make_probe_set(f.reg, 1, 2, 60, 11);
    const auto a_set = make_set({{0, 0}, {1, 1}}, "1");
    const auto b_set = make_set({{0, 2}}, "2");
    const auto sweep = steering_sweep(a_set, b_set);
    REQUIRE(sweep.size() == 5);  // vanilla + {0,2,3,5}
    CHECK(sweep[0].entries.empty());

    const auto reports = conflict_eval(f.model, f.reg, probes, sweep);
    REQUIRE(reports.size() == 5);
    for (const auto &rep : reports) {
        CHECK(rep.n_probes == 60);
        CHECK(rep.share_context1 + rep.share_context2 + rep.share_other == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(rep.share_context1 >= 0.0);
        CHECK(rep.share_context2 >= 0.0);
        CHECK(rep.share_other >= 0.0);
    }

    // assignments must include vanilla
    std::vector<GateAssignment> no_vanilla(sweep.begin() + 1, sweep.end());
    CHECK_THROWS_AS(conflict_eval(f.model, f.reg, probes, no_vanilla), ContractError);

    // an over-long probe violates the contract
    auto long_probes = probes;
    long_probes[0].filler_tokens.assign(40, f.reg.languages[0].shared_tokens[0]);
    CHECK_THROWS_AS(conflict_eval(f.model, f.reg, long_probes, sweep), ContractError);
}

TEST_CASE("offtarget_eval: report structure and ranges") {
    auto &f = fixture();
    std::map<int, std::vector<std::vector<int>>> prompts;
    for (int lang = 0; lang < 3; ++lang) {
        prompts[lang] = synth::make_prompts(f.reg, lang, 5, 6, 900 + static_cast<uint64_t>(lang));
    }
    std::vector<std::pair<double, heads::HeadSet>> suppress;
    suppress.emplace_back(0.05, make_set({{1, 0}}, "0"));

    const auto reports = offtarget_eval(f.model, suppress, prompts, f.reg, 10);
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].config_id == "vanilla");
    CHECK(reports[0].suppress_fraction == 0.0);
    CHECK(reports[1].suppress_fraction == 0.05);
    for (const auto &rep : reports) {
        REQUIRE(rep.per_language.size() == 3);
        for (const auto &r : rep.per_language) {
            CHECK(r.language_accuracy >= 0.0);
            CHECK(r.language_accuracy <= 1.0);
            CHECK(r.grammar_log_likelihood < 0.0);
            CHECK(r.n_prompts == 5);
        }
    }

    save_offtarget_reports_json(reports, "ot_tmp.json", {{"config", "t"}});
    const auto j = nlohmann::json::parse(io::slurp_file("ot_tmp.json"));
    CHECK(j.at("reports").size() == 2);
    CHECK(j.at("fingerprints").contains("config"));
    std::remove("ot_tmp.json");
}

TEST_CASE("gate identity extends to generation") {
    auto &f = fixture();
    const GateMatrix ones = GateMatrix::all_ones(f.model.config);
    const auto prompt = synth::make_prompts(f.reg, 0, 1, 6, 77)[0];
    const auto a = generate<float>(f.model, nullptr, prompt, 12, 0.0, 3);
    const auto b = generate<float>(f.model, &ones, prompt, 12, 0.0, 3);
    CHECK(a == b);
}

TEST_CASE("gates CSV round-trip") {
    const ModelConfig cfg = small_config();
    GateAssignment a;
    a.entries.push_back({make_set({{0, 1}, {1, 3}}, "x"), 2.5});
    const auto gates = build_gates(cfg, a);
    io::save_gates_csv(gates, "gates_tmp.csv", {{"config", "t"}});
    const auto back = io::load_gates_csv("gates_tmp.csv");
    CHECK(back.n_layers == gates.n_layers);
    CHECK(back.n_heads == gates.n_heads);
    CHECK(back.values == gates.values);
    std::remove("gates_tmp.csv");
}
