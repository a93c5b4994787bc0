#include "headlens/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "headlens/rng.hpp"

namespace headlens::synth {

namespace {

constexpr int kKeyRangeSize = 16;
constexpr int kSharedCount = 16;
// each content range reserves [marker][key surface slice] before grammar tokens
constexpr int kMinGrammarTokens = 20;
constexpr double kSharedMass = 0.22;       // content row mass routed to shared tokens
constexpr double kSharedRunMass = 0.25;    // shared row mass staying on shared tokens
constexpr int kContentSuccessors = 3;      // grammar successors per content row
constexpr int kSharedSuccessors = 3;       // grammar successors per shared row
constexpr double kGrammarFloor = 1e-8;

std::vector<int> sample_distinct(DetRng &rng, int lo, int hi_exclusive, int count,
                                 int forbidden = -1) {
    std::vector<int> out;
    out.reserve(static_cast<size_t>(count));
    while (static_cast<int>(out.size()) < count) {
        int candidate = rng.next_int(lo, hi_exclusive);
        if (candidate == forbidden) continue;
        if (std::find(out.begin(), out.end(), candidate) != out.end()) continue;
        out.push_back(candidate);
    }
    return out;
}

}  // namespace

int LanguageSpec::alphabet_index(int token) const {
    if (token >= content_begin && token < content_end) return token - content_begin;
    for (size_t i = 0; i < shared_tokens.size(); ++i) {
        if (shared_tokens[i] == token) return content_size() + static_cast<int>(i);
    }
    return -1;
}

bool Registry::is_content_token(int t) const { return content_language(t) >= 0; }

int Registry::content_language(int t) const {
    for (const auto &lang : languages) {
        if (t >= lang.content_begin && t < lang.content_end) return lang.id;
    }
    return -1;
}

Registry make_registry(int n_languages, int vocab_size, int answer_range_size, uint64_t seed,
                       double dominant_mix_weight) {
    check_config(n_languages >= 2, "make_registry: need at least two languages");
    check_config(answer_range_size >= 4, "make_registry: answer range too small");
    check_config(dominant_mix_weight > 0.0 && dominant_mix_weight < 1.0,
                 "make_registry: dominant mix weight must lie in (0,1)");

    const int fixed = answer_range_size + kKeyRangeSize + 1 + kSharedCount;
    const int remaining = vocab_size - fixed;
    const int min_content = 1 + kKeyRangeSize + kMinGrammarTokens;
    check_config(remaining >= n_languages * min_content,
                 "make_registry: vocab_size " + std::to_string(vocab_size) +
                     " too small for " + std::to_string(n_languages) + " languages");
    const int content_size = remaining / n_languages;

    Registry reg;
    reg.seed = seed;
    reg.vocab_size = vocab_size;
    reg.answer_begin = 0;
    reg.answer_end = answer_range_size;
    reg.key_begin = answer_range_size;
    reg.key_end = answer_range_size + kKeyRangeSize;
    reg.query_marker = reg.key_end;

    std::vector<int> shared(kSharedCount);
    for (int i = 0; i < kSharedCount; ++i) shared[static_cast<size_t>(i)] = reg.query_marker + 1 + i;
    const int content_base = reg.query_marker + 1 + kSharedCount;

    DetRng rng(derive_seed(seed, "registry"));
    for (int c = 0; c < n_languages; ++c) {
        LanguageSpec lang;
        lang.id = c;
        lang.content_begin = content_base + c * content_size;
        lang.content_end = lang.content_begin + content_size;
        lang.shared_tokens = shared;
        lang.mix_weight = (c == 0) ? dominant_mix_weight
                                   : (1.0 - dominant_mix_weight) / (n_languages - 1);

        const int A = lang.alphabet_size();
        // marker + key-surface slice never occur as chain successors; they
        // only appear inside recall episodes
        const int reserved = 1 + kKeyRangeSize;
        lang.bigram.assign(static_cast<size_t>(A), std::vector<double>(static_cast<size_t>(A), 0.0));
        DetRng lrng = DetRng(derive_seed(seed, "bigram", static_cast<uint64_t>(c)));
        for (int row = 0; row < A; ++row) {
            auto &r = lang.bigram[static_cast<size_t>(row)];
            const bool from_shared = row >= content_size;
            const auto succ = sample_distinct(lrng, reserved, content_size,
                                              from_shared ? kSharedSuccessors : kContentSuccessors);
            double total = 0.0;
            std::vector<double> w(succ.size());
            for (size_t i = 0; i < succ.size(); ++i) {
                w[i] = 0.2 + lrng.next_double();
                total += w[i];
            }
            const double shared_mass = from_shared ? kSharedRunMass : kSharedMass;
            for (size_t i = 0; i < succ.size(); ++i) {
                r[static_cast<size_t>(succ[i])] = w[i] / total * (1.0 - shared_mass);
            }
            {
                const auto shared_succ = sample_distinct(lrng, content_size, A, from_shared ? 2 : 3);
                double stotal = 0.0;
                std::vector<double> sw(shared_succ.size());
                for (size_t i = 0; i < sw.size(); ++i) {
                    sw[i] = 0.2 + lrng.next_double();
                    stotal += sw[i];
                }
                for (size_t i = 0; i < shared_succ.size(); ++i) {
                    r[static_cast<size_t>(shared_succ[i])] = sw[i] / stotal * shared_mass;
                }
            }
            // Renormalize so each row sums to 1 up to a few ulps.
            double row_sum = 0.0;
            for (double v : r) row_sum += v;
            for (double &v : r) v /= row_sum;
        }
        reg.languages.push_back(std::move(lang));
    }
    return reg;
}

namespace {

int sample_row(const std::vector<double> &row, DetRng &rng) {
    const double u = rng.next_double();
    double acc = 0.0;
    for (size_t i = 0; i < row.size(); ++i) {
        acc += row[i];
        if (u < acc) return static_cast<int>(i);
    }
    // Guard against accumulated rounding at u ~ 1.
    for (size_t i = row.size(); i-- > 0;) {
        if (row[i] > 0.0) return static_cast<int>(i);
    }
    return 0;
}

// Walks the grammar chain for `len` steps starting from a random non-marker
// content token. State stays within the alphabet.
std::vector<int> chain_walk(const LanguageSpec &lang, int len, DetRng &rng) {
    std::vector<int> out;
    out.reserve(static_cast<size_t>(len));
    // start on a grammar token (skip marker and key-surface slice)
    int state = rng.next_int(1 + kKeyRangeSize, lang.content_size());
    for (int i = 0; i < len; ++i) {
        out.push_back(lang.alphabet_token(state));
        state = sample_row(lang.bigram[static_cast<size_t>(state)], rng);
    }
    return out;
}

struct Episode {
    int pos;
    std::vector<int> tokens;
};

}  // namespace

Corpus sample_corpus(const Registry &reg, int language_id, int n_sequences, int seq_len, uint64_t seed) {
    check_config(language_id >= 0 && language_id < reg.n_languages(),
                 "sample_corpus: unknown language id " + std::to_string(language_id));
    check_contract(seq_len >= 2, "sample_corpus: seq_len must be at least 2");
    const LanguageSpec &lang = reg.languages[static_cast<size_t>(language_id)];

    Corpus corpus;
    corpus.language_id = language_id;
    corpus.seed = seed;
    corpus.seq_len = seq_len;
    corpus.sequences.reserve(static_cast<size_t>(n_sequences));

    DetRng rng(derive_seed(seed, "corpus", static_cast<uint64_t>(language_id)));
    const int n_pairs = seq_len >= 48 ? 3 : (seq_len >= 32 ? 2 : (seq_len >= 24 ? 1 : 0));
    for (int s = 0; s < n_sequences; ++s) {
        std::vector<int> seq = chain_walk(lang, seq_len, rng);

        // Recall episodes: facts "[FACT_c key_c(k) value]" in the first part
        // of the sequence, queries "[QM k value]" in the second. Facts state
        // the key in the language's own surface tokens; queries use the
        // neutral key token. Occasionally a conflicting restatement of the
        // first key appears; the query then targets the fresher value.
        if (n_pairs > 0) {
            std::vector<int> keys;
            while (static_cast<int>(keys.size()) < n_pairs) {
                const int k = reg.key_begin + rng.next_int(0, reg.key_count());
                if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
            }
            std::vector<int> values;
            for (int p = 0; p < n_pairs; ++p) {
                values.push_back(reg.answer_begin + rng.next_int(0, reg.answer_end - reg.answer_begin));
            }

            const int fact_zone_end = seq_len * 9 / 16;
            std::vector<Episode> episodes;
            int pos = 1 + rng.next_int(0, 3);
            for (int p = 0; p < n_pairs; ++p) {
                episodes.push_back({pos, {lang.fact_marker(), reg.key_surface(language_id, keys[static_cast<size_t>(p)]),
                                          values[static_cast<size_t>(p)]}});
                pos += 3 + rng.next_int(1, 4);
            }
            bool conflict = false;
            if (seq_len >= 48 && pos + 3 <= fact_zone_end && rng.next_double() < 0.25) {
                conflict = true;
                int v2 = reg.answer_begin + rng.next_int(0, reg.answer_end - reg.answer_begin);
                while (v2 == values[0]) v2 = reg.answer_begin + rng.next_int(0, reg.answer_end - reg.answer_begin);
                episodes.push_back({pos, {lang.fact_marker(), reg.key_surface(language_id, keys[0]), v2}});
                values[0] = v2;  // the most recent assertion wins
            }

            std::vector<int> order(static_cast<size_t>(n_pairs));
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            int qpos = fact_zone_end + 2 + rng.next_int(0, 3);
            int first_asked = -1;
            for (int q : order) {
                if (qpos + 3 > seq_len) break;
                if (first_asked < 0) first_asked = q;
                episodes.push_back({qpos, {reg.query_marker, keys[static_cast<size_t>(q)], values[static_cast<size_t>(q)]}});
                qpos += 3 + rng.next_int(0, 3);
            }
            // occasionally re-ask the first key verbatim
            if (first_asked >= 0 && rng.next_double() < 0.5 && qpos + 3 <= seq_len) {
                episodes.push_back({qpos, {reg.query_marker, keys[static_cast<size_t>(first_asked)],
                                           values[static_cast<size_t>(first_asked)]}});
            }
            (void)conflict;
            for (const auto &ep : episodes) {
                for (size_t i = 0; i < ep.tokens.size(); ++i) {
                    seq[static_cast<size_t>(ep.pos) + i] = ep.tokens[i];
                }
            }
        }
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

namespace {

// Fact statement rendered in a language: two grammar tokens of local color,
// then marker, the key in the language's surface form, and the value.
std::vector<int> render_fact(const Registry &reg, int language_id, int key, int value, DetRng &rng) {
    const LanguageSpec &lang = reg.languages[static_cast<size_t>(language_id)];
    std::vector<int> out = chain_walk(lang, 2, rng);
    out.push_back(lang.fact_marker());
    out.push_back(reg.key_surface(language_id, key));
    out.push_back(value);
    return out;
}

}  // namespace

std::vector<ProbeInstance> make_probe_set(const Registry &reg, int lang_a, int lang_b, int n, uint64_t seed) {
    check_contract(lang_a != lang_b, "make_probe_set: languages must differ");
    check_config(lang_a >= 0 && lang_a < reg.n_languages() && lang_b >= 0 && lang_b < reg.n_languages(),
                 "make_probe_set: unknown language id");
    DetRng rng(derive_seed(seed, "probes", (static_cast<uint64_t>(lang_a) << 16) | static_cast<uint64_t>(lang_b)));

    std::vector<ProbeInstance> probes;
    probes.reserve(static_cast<size_t>(n));
    const auto &shared = reg.languages[0].shared_tokens;
    for (int i = 0; i < n; ++i) {
        ProbeInstance p;
        p.lang_a = lang_a;
        p.lang_b = lang_b;
        p.key = reg.key_begin + rng.next_int(0, reg.key_end - reg.key_begin);
        p.v1 = reg.answer_begin + rng.next_int(0, reg.answer_end - reg.answer_begin);
        p.v2 = reg.answer_begin + rng.next_int(0, reg.answer_end - reg.answer_begin);
        while (p.v2 == p.v1) p.v2 = reg.answer_begin + rng.next_int(0, reg.answer_end - reg.answer_begin);
        p.context1_tokens = render_fact(reg, lang_a, p.key, p.v1, rng);
        for (int f = 0; f < 4; ++f) {
            p.filler_tokens.push_back(shared[static_cast<size_t>(rng.next_int(0, static_cast<int>(shared.size())))]);
        }
        p.context2_tokens = render_fact(reg, lang_b, p.key, p.v2, rng);
        p.query_tokens = {reg.query_marker, p.key};
        probes.push_back(std::move(p));
    }
    return probes;
}

std::vector<int> ProbeInstance::full_tokens() const {
    std::vector<int> out;
    out.reserve(context1_tokens.size() + filler_tokens.size() + context2_tokens.size() + query_tokens.size());
    out.insert(out.end(), context1_tokens.begin(), context1_tokens.end());
    out.insert(out.end(), filler_tokens.begin(), filler_tokens.end());
    out.insert(out.end(), context2_tokens.begin(), context2_tokens.end());
    out.insert(out.end(), query_tokens.begin(), query_tokens.end());
    return out;
}

std::vector<RecallProbe> make_recall_probes(const Registry &reg, int language_id, int n, uint64_t seed,
                                            int key_parity) {
    check_config(language_id >= 0 && language_id < reg.n_languages(),
                 "make_recall_probes: unknown language id");
    DetRng rng(derive_seed(seed, "recall", (static_cast<uint64_t>(language_id) << 8) |
                                               static_cast<uint64_t>(key_parity)));
    const auto &shared = reg.languages[0].shared_tokens;
    const int n_keys = reg.key_end - reg.key_begin;

    auto draw_key = [&] {
        int k;
        do {
            k = reg.key_begin + rng.next_int(0, n_keys);
        } while ((k & 1) != key_parity);
        return k;
    };

    std::vector<RecallProbe> probes;
    probes.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        RecallProbe p;
        p.language_id = language_id;
        p.key = draw_key();
        p.answer = reg.answer_begin + rng.next_int(0, reg.answer_end - reg.answer_begin);
        int k2 = draw_key();
        while (k2 == p.key) k2 = draw_key();
        int v2 = reg.answer_begin + rng.next_int(0, reg.answer_end - reg.answer_begin);

        const bool distractor_first = rng.next_double() < 0.5;
        auto fact = render_fact(reg, language_id, p.key, p.answer, rng);
        auto distractor = render_fact(reg, language_id, k2, v2, rng);
        auto &first = distractor_first ? distractor : fact;
        auto &second = distractor_first ? fact : distractor;

        p.tokens = first;
        for (int f = 0; f < 3; ++f) {
            p.tokens.push_back(shared[static_cast<size_t>(rng.next_int(0, static_cast<int>(shared.size())))]);
        }
        p.tokens.insert(p.tokens.end(), second.begin(), second.end());
        p.tokens.push_back(reg.query_marker);
        p.tokens.push_back(p.key);
        probes.push_back(std::move(p));
    }
    return probes;
}

std::vector<std::vector<int>> make_prompts(const Registry &reg, int language_id, int n, int len, uint64_t seed) {
    check_config(language_id >= 0 && language_id < reg.n_languages(), "make_prompts: unknown language id");
    DetRng rng(derive_seed(seed, "prompts", static_cast<uint64_t>(language_id)));
    std::vector<std::vector<int>> prompts;
    prompts.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        prompts.push_back(chain_walk(reg.languages[static_cast<size_t>(language_id)], len, rng));
    }
    return prompts;
}

std::optional<Classification> classify_sequence_language(std::span<const int> tokens, const Registry &reg) {
    check_contract(!tokens.empty(), "classify_sequence_language: empty token list");
    std::vector<int> counts(static_cast<size_t>(reg.n_languages()), 0);
    int total = 0;
    for (int t : tokens) {
        const int lang = reg.content_language(t);
        if (lang >= 0) {
            ++counts[static_cast<size_t>(lang)];
            ++total;
        }
    }
    if (total == 0) return std::nullopt;
    int best = 0;
    for (int c = 1; c < reg.n_languages(); ++c) {
        if (counts[static_cast<size_t>(c)] > counts[static_cast<size_t>(best)]) best = c;
    }
    return Classification{best, static_cast<double>(counts[static_cast<size_t>(best)]) / total};
}

double grammar_mean_log_likelihood(const Registry &reg, int language_id, std::span<const int> tokens) {
    check_contract(tokens.size() >= 2, "grammar_mean_log_likelihood: need at least one transition");
    const LanguageSpec &lang = reg.languages[static_cast<size_t>(language_id)];
    double total = 0.0;
    int n_pairs = 0;
    for (size_t i = 0; i + 1 < tokens.size(); ++i) {
        const int a = lang.alphabet_index(tokens[i]);
        const int b = lang.alphabet_index(tokens[i + 1]);
        double p = kGrammarFloor;
        if (a >= 0 && b >= 0) {
            p = std::max(lang.bigram[static_cast<size_t>(a)][static_cast<size_t>(b)], kGrammarFloor);
        }
        total += std::log(p);
        ++n_pairs;
    }
    return total / n_pairs;
}

// ---- file formats ----------------------------------------------------------

void save_corpus(const Corpus &c, const std::string &path, const std::string &registry_fingerprint) {
    std::ofstream out(path);
    if (!out) throw IoError("save_corpus: cannot open " + path);
    out << "#lang=" << c.language_id << " seed=" << c.seed << " seq_len=" << c.seq_len
        << " registry=" << registry_fingerprint << "\n";
    for (const auto &seq : c.sequences) {
        for (size_t i = 0; i < seq.size(); ++i) {
            if (i) out << ' ';
            out << seq[i];
        }
        out << '\n';
    }
    if (!out) throw IoError("save_corpus: write failed for " + path);
}

Corpus load_corpus(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_corpus: cannot open " + path);
    std::string header;
    std::getline(in, header);
    Corpus c;
    {
        std::istringstream hs(header);
        std::string field;
        while (hs >> field) {
            auto eq = field.find('=');
            if (eq == std::string::npos) continue;
            std::string key = field.substr(0, eq);
            std::string val = field.substr(eq + 1);
            if (key == "#lang") c.language_id = std::stoi(val);
            else if (key == "seed") c.seed = std::stoull(val);
            else if (key == "seq_len") c.seq_len = std::stoi(val);
        }
    }
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::vector<int> seq;
        int t;
        while (ls >> t) seq.push_back(t);
        if (!seq.empty()) c.sequences.push_back(std::move(seq));
    }
    return c;
}

void save_registry(const Registry &reg, const std::string &path) {
    nlohmann::json j;
    j["seed"] = reg.seed;
    j["vocab_size"] = reg.vocab_size;
    j["answer_range"] = {reg.answer_begin, reg.answer_end};
    j["key_range"] = {reg.key_begin, reg.key_end};
    j["query_marker"] = reg.query_marker;
    j["fingerprint"] = registry_fingerprint(reg);
    nlohmann::json langs = nlohmann::json::array();
    for (const auto &lang : reg.languages) {
        nlohmann::json lj;
        lj["id"] = lang.id;
        lj["content_range"] = {lang.content_begin, lang.content_end};
        lj["shared_tokens"] = lang.shared_tokens;
        lj["mix_weight"] = lang.mix_weight;
        lj["bigram"] = lang.bigram;
        langs.push_back(std::move(lj));
    }
    j["languages"] = std::move(langs);
    std::ofstream out(path);
    if (!out) throw IoError("save_registry: cannot open " + path);
    out << j.dump(1) << "\n";
}

Registry load_registry(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_registry: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw IoError("load_registry: " + path + ": " + e.what());
    }
    Registry reg;
    reg.seed = j.at("seed").get<uint64_t>();
    reg.vocab_size = j.at("vocab_size").get<int>();
    reg.answer_begin = j.at("answer_range")[0].get<int>();
    reg.answer_end = j.at("answer_range")[1].get<int>();
    reg.key_begin = j.at("key_range")[0].get<int>();
    reg.key_end = j.at("key_range")[1].get<int>();
    reg.query_marker = j.at("query_marker").get<int>();
    for (const auto &lj : j.at("languages")) {
        LanguageSpec lang;
        lang.id = lj.at("id").get<int>();
        lang.content_begin = lj.at("content_range")[0].get<int>();
        lang.content_end = lj.at("content_range")[1].get<int>();
        lang.shared_tokens = lj.at("shared_tokens").get<std::vector<int>>();
        lang.mix_weight = lj.at("mix_weight").get<double>();
        lang.bigram = lj.at("bigram").get<std::vector<std::vector<double>>>();
        reg.languages.push_back(std::move(lang));
    }
    return reg;
}

std::string registry_fingerprint(const Registry &reg) {
    uint64_t h = fnv1a("registry");
    auto mix = [&h](uint64_t v) {
        for (int b = 0; b < 8; ++b) {
            const char byte = static_cast<char>((v >> (8 * b)) & 0xff);
            h = fnv1a(std::string_view(&byte, 1), h);
        }
    };
    mix(reg.seed);
    mix(static_cast<uint64_t>(reg.vocab_size));
    mix(static_cast<uint64_t>(reg.n_languages()));
    for (const auto &lang : reg.languages) {
        mix(static_cast<uint64_t>(lang.content_begin));
        mix(static_cast<uint64_t>(lang.content_end));
        for (const auto &row : lang.bigram) {
            for (double v : row) {
                uint64_t bits;
                static_assert(sizeof(bits) == sizeof(v));
                std::memcpy(&bits, &v, sizeof(bits));
                mix(bits);
            }
        }
    }
    return to_hex(h);
}

std::string corpus_fingerprint(const Corpus &c) {
    uint64_t h = fnv1a("corpus");
    auto mix = [&h](uint64_t v) {
        for (int b = 0; b < 8; ++b) {
            const char byte = static_cast<char>((v >> (8 * b)) & 0xff);
            h = fnv1a(std::string_view(&byte, 1), h);
        }
    };
    mix(static_cast<uint64_t>(c.language_id));
    mix(c.seed);
    mix(static_cast<uint64_t>(c.seq_len));
    for (const auto &seq : c.sequences) {
        for (int t : seq) mix(static_cast<uint64_t>(t));
    }
    return to_hex(h);
}

}  // namespace headlens::synth
