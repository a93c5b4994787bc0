#pragma once

#include <map>
#include <string>
#include <vector>

#include "headlens/headsets.hpp"
#include "headlens/model.hpp"

namespace headlens::eval {

// Named gate configuration: disjoint head sets mapped to gate values; every
// unassigned head keeps gate 1.
struct GateAssignment {
    struct Entry {
        heads::HeadSet set;
        double gate = 1.0;
    };
    std::string id = "vanilla";
    std::vector<Entry> entries;
};

nn::GateMatrix build_gates(const nn::ModelConfig &cfg, const GateAssignment &assignment);

// exp(mean next-token NLL over all predicted positions of all sequences).
double perplexity(nn::ModelF &m, const nn::GateMatrix *gates, const synth::Corpus &corpus);

struct PplEntry {
    int language_id = -1;
    double ppl = 0.0;
    std::string corpus_fingerprint;
};

struct PplReport {
    std::string config_id;
    std::vector<PplEntry> per_language;
};

// cell(i,j) = PPL increase on language j when language i's specific heads
// are deactivated.
struct SpecificityMatrix {
    std::vector<int> language_ids;
    std::vector<double> cells;
    std::vector<std::string> corpus_fingerprints;

    int size() const { return static_cast<int>(language_ids.size()); }
    double at(int i, int j) const { return cells[static_cast<size_t>(i) * language_ids.size() + j]; }
    double &at(int i, int j) { return cells[static_cast<size_t>(i) * language_ids.size() + j]; }
};

SpecificityMatrix specificity_matrix(nn::ModelF &m, const std::vector<heads::HeadSet> &specific_sets,
                                     const std::vector<synth::Corpus> &corpora);

struct PreferenceReport {
    std::string config_id;
    double share_context1 = 0.0;
    double share_context2 = 0.0;
    double share_other = 0.0;
    int n_probes = 0;
};

// Per assignment, the share of probes whose answer-range argmax is v1
// (context1), v2 (context2), or neither. Assignments must include the
// vanilla configuration.
std::vector<PreferenceReport> conflict_eval(nn::ModelF &m, const synth::Registry &reg,
                                            const std::vector<synth::ProbeInstance> &probes,
                                            const std::vector<GateAssignment> &assignments);

// Standard sweep for steering from language B toward language A: enhance A's
// heads with g in {2,3,5} and deactivate B's heads (g = 0).
std::vector<GateAssignment> steering_sweep(const heads::HeadSet &heads_a, const heads::HeadSet &heads_b,
                                           const std::vector<double> &gate_values = {0.0, 2.0, 3.0, 5.0});

struct OffTargetLangResult {
    int language_id = -1;
    double language_accuracy = 0.0;
    double grammar_log_likelihood = 0.0;  // mean per-transition, target grammar
    int n_prompts = 0;
};

struct OffTargetReport {
    std::string config_id;
    double suppress_fraction = 0.0;  // 0 = vanilla
    std::vector<OffTargetLangResult> per_language;
};

// Greedy continuations per prompt; accuracy is the share classified as the
// prompt's language. One report per configuration: vanilla first, then one
// per (fraction, suppressed head set).
std::vector<OffTargetReport> offtarget_eval(nn::ModelF &m,
                                            const std::vector<std::pair<double, heads::HeadSet>> &suppressions,
                                            const std::map<int, std::vector<std::vector<int>>> &prompts_by_language,
                                            const synth::Registry &reg, int gen_tokens);

// ---- report files ----------------------------------------------------------

void save_ppl_report_json(const std::vector<PplReport> &reports, const std::string &path,
                          const std::map<std::string, std::string> &fingerprints);
void save_specificity(const SpecificityMatrix &m, const std::string &json_path, const std::string &csv_path,
                      const std::map<std::string, std::string> &fingerprints);
void save_preference_reports_json(const std::vector<PreferenceReport> &reports, const std::string &path,
                                  const std::map<std::string, std::string> &fingerprints);
void save_offtarget_reports_json(const std::vector<OffTargetReport> &reports, const std::string &path,
                                 const std::map<std::string, std::string> &fingerprints);

}  // namespace headlens::eval
