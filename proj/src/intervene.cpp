#include "headlens/intervene.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "headlens/io.hpp"

namespace headlens::eval {

nn::GateMatrix build_gates(const nn::ModelConfig &cfg, const GateAssignment &assignment) {
    nn::GateMatrix gates = nn::GateMatrix::all_ones(cfg);
    std::vector<uint8_t> taken(static_cast<size_t>(cfg.n_layers) * cfg.n_heads, 0);
    for (const auto &entry : assignment.entries) {
        check_contract(entry.gate >= 0.0, "build_gates: gate value must be nonnegative");
        for (const auto id : entry.set.members) {
            check_contract(id.layer >= 0 && id.layer < cfg.n_layers && id.head >= 0 && id.head < cfg.n_heads,
                           "build_gates: head (" + std::to_string(id.layer) + "," + std::to_string(id.head) +
                               ") out of bounds");
            auto &slot = taken[static_cast<size_t>(id.layer) * cfg.n_heads + id.head];
            check_contract(slot == 0, "build_gates: conflicting assignments for head (" +
                                          std::to_string(id.layer) + "," + std::to_string(id.head) + ")");
            slot = 1;
            gates.at(id.layer, id.head) = entry.gate;
        }
    }
    return gates;
}

double perplexity(nn::ModelF &m, const nn::GateMatrix *gates, const synth::Corpus &corpus) {
    check_contract(!corpus.sequences.empty(), "perplexity: empty corpus");
    const auto losses = nn::forward_loss<float>(m, gates, corpus.sequences);
    double total_nll = 0.0;
    int64_t total_positions = 0;
    for (size_t s = 0; s < corpus.sequences.size(); ++s) {
        const int64_t predicted = static_cast<int64_t>(corpus.sequences[s].size()) - 1;
        total_nll += static_cast<double>(losses.per_sequence[s]) * static_cast<double>(predicted);
        total_positions += predicted;
    }
    return std::exp(total_nll / static_cast<double>(total_positions));
}

SpecificityMatrix specificity_matrix(nn::ModelF &m, const std::vector<heads::HeadSet> &specific_sets,
                                     const std::vector<synth::Corpus> &corpora) {
    check_contract(specific_sets.size() == corpora.size() && !corpora.empty(),
                   "specificity_matrix: sets and corpora must cover the same language list");
    const int L = static_cast<int>(corpora.size());
    SpecificityMatrix out;
    out.cells.assign(static_cast<size_t>(L) * L, 0.0);
    for (const auto &c : corpora) {
        out.language_ids.push_back(c.language_id);
        out.corpus_fingerprints.push_back(synth::corpus_fingerprint(c));
    }
    std::vector<double> vanilla(static_cast<size_t>(L));
    for (int j = 0; j < L; ++j) vanilla[static_cast<size_t>(j)] = perplexity(m, nullptr, corpora[static_cast<size_t>(j)]);
    for (int i = 0; i < L; ++i) {
        GateAssignment deact;
        deact.id = "deactivate-" + specific_sets[static_cast<size_t>(i)].label;
        deact.entries.push_back({specific_sets[static_cast<size_t>(i)], 0.0});
        const nn::GateMatrix gates = build_gates(m.config, deact);
        for (int j = 0; j < L; ++j) {
            out.at(i, j) = perplexity(m, &gates, corpora[static_cast<size_t>(j)]) - vanilla[static_cast<size_t>(j)];
        }
    }
    return out;
}

std::vector<GateAssignment> steering_sweep(const heads::HeadSet &heads_a, const heads::HeadSet &heads_b,
                                           const std::vector<double> &gate_values) {
    std::vector<GateAssignment> out;
    GateAssignment vanilla;
    vanilla.id = "vanilla";
    out.push_back(vanilla);
    for (double g : gate_values) {
        GateAssignment a;
        if (g == 0.0) {
            a.id = "deactivate-B-g0";
            a.entries.push_back({heads_b, 0.0});
        } else {
            a.id = "enhance-A-g" + io::format_double(g);
            a.entries.push_back({heads_a, g});
        }
        out.push_back(std::move(a));
    }
    return out;
}

std::vector<PreferenceReport> conflict_eval(nn::ModelF &m, const synth::Registry &reg,
                                            const std::vector<synth::ProbeInstance> &probes,
                                            const std::vector<GateAssignment> &assignments) {
    check_contract(!probes.empty(), "conflict_eval: empty probe set");
    bool has_vanilla = false;
    for (const auto &a : assignments) {
        if (a.entries.empty()) has_vanilla = true;
    }
    check_contract(has_vanilla, "conflict_eval: assignments must include the vanilla configuration");

    std::vector<PreferenceReport> reports;
    for (const auto &assignment : assignments) {
        const nn::GateMatrix gates = build_gates(m.config, assignment);
        std::vector<int> verdict(probes.size(), 2);  // 0 = context1, 1 = context2, 2 = other
        parallel_for_indexed(static_cast<int64_t>(probes.size()), [&](int64_t pi) {
            const auto &probe = probes[static_cast<size_t>(pi)];
            const auto tokens = probe.full_tokens();
            check_contract(static_cast<int>(tokens.size()) <= m.config.max_seq_len,
                           "conflict_eval: probe longer than max_seq_len");
            auto g = nn::build_sequence_graph<float>(m, &gates, nullptr, tokens, nullptr);
            nn::pass_counters().sequence_forwards.fetch_add(1);
            const auto &logits = g.tape.value(g.logits);
            const float *row = logits.data.data() + static_cast<size_t>(logits.dim(0) - 1) * m.config.vocab_size;
            // unrestricted argmax over the shared answer range (softmax is
            // monotone, so logits decide)
            int best = reg.answer_begin;
            for (int tok = reg.answer_begin + 1; tok < reg.answer_end; ++tok) {
                if (row[tok] > row[best]) best = tok;
            }
            verdict[static_cast<size_t>(pi)] = (best == probe.v1) ? 0 : (best == probe.v2) ? 1 : 2;
        });
        std::vector<int> counts(3, 0);
        for (int v : verdict) ++counts[static_cast<size_t>(v)];
        PreferenceReport rep;
        rep.config_id = assignment.id;
        rep.n_probes = static_cast<int>(probes.size());
        rep.share_context1 = static_cast<double>(counts[0]) / probes.size();
        rep.share_context2 = static_cast<double>(counts[1]) / probes.size();
        rep.share_other = static_cast<double>(counts[2]) / probes.size();
        reports.push_back(rep);
    }
    return reports;
}

std::vector<OffTargetReport> offtarget_eval(nn::ModelF &m,
                                            const std::vector<std::pair<double, heads::HeadSet>> &suppressions,
                                            const std::map<int, std::vector<std::vector<int>>> &prompts_by_language,
                                            const synth::Registry &reg, int gen_tokens) {
    check_contract(!prompts_by_language.empty(), "offtarget_eval: no prompts");
    std::vector<std::pair<std::string, nn::GateMatrix>> configs;
    configs.emplace_back("vanilla", nn::GateMatrix::all_ones(m.config));
    std::vector<double> fractions = {0.0};
    for (const auto &[fraction, set] : suppressions) {
        GateAssignment a;
        a.id = "suppress-" + io::format_double(fraction);
        a.entries.push_back({set, 0.0});
        configs.emplace_back(a.id, build_gates(m.config, a));
        fractions.push_back(fraction);
    }

    std::vector<OffTargetReport> reports;
    for (size_t ci = 0; ci < configs.size(); ++ci) {
        OffTargetReport rep;
        rep.config_id = configs[ci].first;
        rep.suppress_fraction = fractions[ci];
        for (const auto &[lang, prompts] : prompts_by_language) {
            check_contract(!prompts.empty(), "offtarget_eval: empty prompt list");
            std::vector<int> hits(prompts.size(), 0);
            std::vector<double> quality(prompts.size(), 0.0);
            parallel_for_indexed(static_cast<int64_t>(prompts.size()), [&](int64_t pi) {
                const auto &prompt = prompts[static_cast<size_t>(pi)];
                const auto continuation =
                    nn::generate<float>(m, &configs[ci].second, prompt, gen_tokens, 0.0, 0);
                const auto cls = synth::classify_sequence_language(continuation, reg);
                hits[static_cast<size_t>(pi)] = (cls.has_value() && cls->language_id == lang) ? 1 : 0;
                std::vector<int> with_boundary;
                with_boundary.push_back(prompt.back());
                with_boundary.insert(with_boundary.end(), continuation.begin(), continuation.end());
                quality[static_cast<size_t>(pi)] = synth::grammar_mean_log_likelihood(reg, lang, with_boundary);
            });
            OffTargetLangResult r;
            r.language_id = lang;
            r.n_prompts = static_cast<int>(prompts.size());
            int hit_count = 0;
            double q = 0.0;
            for (size_t i = 0; i < prompts.size(); ++i) {
                hit_count += hits[i];
                q += quality[i];
            }
            r.language_accuracy = static_cast<double>(hit_count) / static_cast<double>(prompts.size());
            r.grammar_log_likelihood = q / static_cast<double>(prompts.size());
            rep.per_language.push_back(r);
        }
        reports.push_back(std::move(rep));
    }
    return reports;
}

// ---- report files ----------------------------------------------------------

namespace {

nlohmann::json fingerprint_json(const std::map<std::string, std::string> &fps) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto &[k, v] : fps) j[k] = v;
    return j;
}

}  // namespace

void save_ppl_report_json(const std::vector<PplReport> &reports, const std::string &path,
                          const std::map<std::string, std::string> &fingerprints) {
    nlohmann::json j;
    j["fingerprints"] = fingerprint_json(fingerprints);
    nlohmann::json arr = nlohmann::json::array();
    for (const auto &rep : reports) {
        nlohmann::json rj;
        rj["config"] = rep.config_id;
        nlohmann::json langs = nlohmann::json::array();
        for (const auto &e : rep.per_language) {
            langs.push_back({{"language", e.language_id}, {"ppl", e.ppl}, {"corpus", e.corpus_fingerprint}});
        }
        rj["per_language"] = std::move(langs);
        arr.push_back(std::move(rj));
    }
    j["reports"] = std::move(arr);
    io::write_file(path, j.dump(1) + "\n");
}

void save_specificity(const SpecificityMatrix &m, const std::string &json_path, const std::string &csv_path,
                      const std::map<std::string, std::string> &fingerprints) {
    nlohmann::json j;
    j["fingerprints"] = fingerprint_json(fingerprints);
    j["language_ids"] = m.language_ids;
    j["corpus_fingerprints"] = m.corpus_fingerprints;
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < m.size(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int jj = 0; jj < m.size(); ++jj) row.push_back(m.at(i, jj));
        rows.push_back(std::move(row));
    }
    j["ppl_increase"] = std::move(rows);
    io::write_file(json_path, j.dump(1) + "\n");

    // CSV mirror in the importance-matrix layout
    std::string csv;
    csv += "#kind=specificity\n";
    csv += "#languages=";
    for (size_t i = 0; i < m.language_ids.size(); ++i) {
        if (i) csv += ";";
        csv += std::to_string(m.language_ids[i]);
    }
    csv += "\n";
    for (const auto &[k, v] : fingerprints) csv += "#" + k + "=" + v + "\n";
    for (int i = 0; i < m.size(); ++i) {
        for (int jj = 0; jj < m.size(); ++jj) {
            if (jj) csv += ",";
            csv += io::format_double(m.at(i, jj));
        }
        csv += "\n";
    }
    io::write_file(csv_path, csv);
}

void save_preference_reports_json(const std::vector<PreferenceReport> &reports, const std::string &path,
                                  const std::map<std::string, std::string> &fingerprints) {
    nlohmann::json j;
    j["fingerprints"] = fingerprint_json(fingerprints);
    nlohmann::json arr = nlohmann::json::array();
    for (const auto &rep : reports) {
        arr.push_back({{"config", rep.config_id},
                       {"share_context1", rep.share_context1},
                       {"share_context2", rep.share_context2},
                       {"share_other", rep.share_other},
                       {"n_probes", rep.n_probes}});
    }
    j["reports"] = std::move(arr);
    io::write_file(path, j.dump(1) + "\n");
}

void save_offtarget_reports_json(const std::vector<OffTargetReport> &reports, const std::string &path,
                                 const std::map<std::string, std::string> &fingerprints) {
    nlohmann::json j;
    j["fingerprints"] = fingerprint_json(fingerprints);
    nlohmann::json arr = nlohmann::json::array();
    for (const auto &rep : reports) {
        nlohmann::json rj;
        rj["config"] = rep.config_id;
        rj["suppress_fraction"] = rep.suppress_fraction;
        nlohmann::json langs = nlohmann::json::array();
        for (const auto &r : rep.per_language) {
            langs.push_back({{"language", r.language_id},
                             {"language_accuracy", r.language_accuracy},
                             {"grammar_log_likelihood", r.grammar_log_likelihood},
                             {"n_prompts", r.n_prompts}});
        }
        rj["per_language"] = std::move(langs);
        arr.push_back(std::move(rj));
    }
    j["reports"] = std::move(arr);
    io::write_file(path, j.dump(1) + "\n");
}

}  // namespace headlens::eval
