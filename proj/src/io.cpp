#include "headlens/io.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace headlens::io {

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string &s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw IoError("parse_double: malformed value '" + s + "'");
    }
    return v;
}

namespace {

void write_matrix_csv(const std::string &path, int lang, const std::string &kind, int samples,
                      const std::string &corpus_fp, int n_layers, int n_heads, const std::vector<double> &cells,
                      const std::map<std::string, std::string> &extra) {
    std::ofstream out(path);
    if (!out) throw IoError("save matrix: cannot open " + path);
    out << "#lang=" << lang << "\n";
    out << "#kind=" << kind << "\n";
    out << "#samples=" << samples << "\n";
    if (!corpus_fp.empty()) out << "#corpus=" << corpus_fp << "\n";
    for (const auto &[k, v] : extra) out << "#" << k << "=" << v << "\n";
    for (int l = 0; l < n_layers; ++l) {
        for (int h = 0; h < n_heads; ++h) {
            if (h) out << ",";
            out << format_double(cells[static_cast<size_t>(l) * n_heads + h]);
        }
        out << "\n";
    }
    if (!out) throw IoError("save matrix: write failed for " + path);
}

struct RawMatrix {
    std::map<std::string, std::string> comments;
    std::vector<std::vector<double>> rows;
};

RawMatrix read_matrix_csv(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw IoError("load matrix: cannot open " + path);
    RawMatrix raw;
    std::string line;
    int line_no = 0;
    size_t width = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq != std::string::npos) raw.comments[line.substr(1, eq - 1)] = line.substr(eq + 1);
            continue;
        }
        std::vector<double> row;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            try {
                row.push_back(parse_double(cell));
            } catch (const IoError &) {
                throw IoError(path + ":" + std::to_string(line_no) + ": malformed CSV cell '" + cell + "'");
            }
        }
        if (row.empty()) throw IoError(path + ":" + std::to_string(line_no) + ": empty CSV row");
        if (width == 0) width = row.size();
        if (row.size() != width) {
            throw IoError(path + ":" + std::to_string(line_no) + ": ragged CSV row");
        }
        raw.rows.push_back(std::move(row));
    }
    if (raw.rows.empty()) throw IoError(path + ":1: no data rows");
    return raw;
}

int comment_int(const RawMatrix &raw, const std::string &key, int fallback) {
    auto it = raw.comments.find(key);
    if (it == raw.comments.end()) return fallback;
    return std::stoi(it->second);
}

}  // namespace

void save_importance_csv(const lahis::ImportanceMatrix &m, const std::string &path,
                         const std::map<std::string, std::string> &extra_comments) {
    write_matrix_csv(path, m.language_id, lahis::score_kind_name(m.kind), m.n_samples, m.corpus_fingerprint,
                     m.n_layers, m.n_heads, m.scores, extra_comments);
}

lahis::ImportanceMatrix load_importance_csv(const std::string &path) {
    const RawMatrix raw = read_matrix_csv(path);
    lahis::ImportanceMatrix m;
    m.language_id = comment_int(raw, "lang", -1);
    m.n_samples = comment_int(raw, "samples", 0);
    auto kind_it = raw.comments.find("kind");
    if (kind_it != raw.comments.end()) {
        const std::string &k = kind_it->second;
        if (k == "exact") m.kind = lahis::ScoreKind::Exact;
        else if (k == "taylor") m.kind = lahis::ScoreKind::Taylor;
        else if (k == "lahis") m.kind = lahis::ScoreKind::Lahis;
        else if (k == "wneg") m.kind = lahis::ScoreKind::Wneg;
        else throw IoError(path + ": unknown matrix kind '" + k + "'");
    }
    auto fp_it = raw.comments.find("corpus");
    if (fp_it != raw.comments.end()) m.corpus_fingerprint = fp_it->second;
    m.n_layers = static_cast<int>(raw.rows.size());
    m.n_heads = static_cast<int>(raw.rows[0].size());
    for (const auto &row : raw.rows) {
        for (double v : row) m.scores.push_back(v);
    }
    return m;
}

void save_wneg_csv(const lahis::NegFractionMatrix &m, const std::string &path,
                   const std::map<std::string, std::string> &extra_comments) {
    write_matrix_csv(path, m.language_id, "wneg", m.n_samples, m.corpus_fingerprint, m.n_layers, m.n_heads,
                     m.values, extra_comments);
}

lahis::NegFractionMatrix load_wneg_csv(const std::string &path) {
    const auto m = load_importance_csv(path);
    if (m.kind != lahis::ScoreKind::Wneg) throw IoError(path + ": expected kind=wneg");
    lahis::NegFractionMatrix w;
    w.language_id = m.language_id;
    w.n_layers = m.n_layers;
    w.n_heads = m.n_heads;
    w.values = m.scores;
    w.n_samples = m.n_samples;
    w.corpus_fingerprint = m.corpus_fingerprint;
    return w;
}

CsvMatrix load_csv_matrix(const std::string &path) {
    const RawMatrix raw = read_matrix_csv(path);
    return CsvMatrix{raw.comments, raw.rows};
}

void save_gates_csv(const nn::GateMatrix &gates, const std::string &path,
                    const std::map<std::string, std::string> &extra_comments) {
    write_matrix_csv(path, -1, "gates", 0, "", gates.n_layers, gates.n_heads, gates.values, extra_comments);
}

nn::GateMatrix load_gates_csv(const std::string &path) {
    const RawMatrix raw = read_matrix_csv(path);
    auto kind = raw.comments.find("kind");
    if (kind == raw.comments.end() || kind->second != "gates") {
        throw IoError(path + ": expected kind=gates");
    }
    nn::GateMatrix g(static_cast<int>(raw.rows.size()), static_cast<int>(raw.rows[0].size()));
    size_t e = 0;
    for (const auto &row : raw.rows) {
        for (double v : row) g.values[e++] = v;
    }
    g.validate();
    return g;
}

void save_headset_json(const heads::HeadSet &set, const std::string &path) {
    nlohmann::json j;
    j["label"] = set.label;
    j["fraction"] = set.fraction;
    j["seed"] = set.seed;
    nlohmann::json members = nlohmann::json::array();
    for (const auto &id : set.members) members.push_back({id.layer, id.head});
    j["members"] = std::move(members);
    j["provenance"] = set.source_fingerprints;
    write_file(path, j.dump(1) + "\n");
}

heads::HeadSet load_headset_json(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_headset_json: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw IoError("load_headset_json: " + path + ": " + e.what());
    }
    heads::HeadSet set;
    set.label = j.at("label").get<std::string>();
    set.fraction = j.at("fraction").get<double>();
    set.seed = j.at("seed").get<uint64_t>();
    for (const auto &m : j.at("members")) {
        set.members.push_back({m[0].get<int>(), m[1].get<int>()});
    }
    if (j.contains("provenance")) set.source_fingerprints = j.at("provenance").get<std::vector<std::string>>();
    return set;
}

std::string slurp_file(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("slurp_file: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string &path, const std::string &content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_file: cannot open " + path);
    out << content;
    if (!out) throw IoError("write_file: write failed for " + path);
}

}  // namespace headlens::io
