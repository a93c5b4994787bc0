#pragma once

#include <map>
#include <string>
#include <vector>

#include "headlens/headsets.hpp"
#include "headlens/lahis.hpp"
#include "headlens/model.hpp"

namespace headlens::io {

// Shortest decimal form that parses back to the same bits.
std::string format_double(double v);
double parse_double(const std::string &s);

// Importance matrix CSV: comment lines (#lang, #kind, #samples plus
// fingerprint lines), then n_layers rows of n_heads comma-separated values.
void save_importance_csv(const lahis::ImportanceMatrix &m, const std::string &path,
                         const std::map<std::string, std::string> &extra_comments = {});
lahis::ImportanceMatrix load_importance_csv(const std::string &path);

void save_wneg_csv(const lahis::NegFractionMatrix &m, const std::string &path,
                   const std::map<std::string, std::string> &extra_comments = {});
lahis::NegFractionMatrix load_wneg_csv(const std::string &path);

// Plain numeric CSV with optional # comments; parse errors carry the
// 1-based line number.
struct CsvMatrix {
    std::map<std::string, std::string> comments;
    std::vector<std::vector<double>> rows;
};
CsvMatrix load_csv_matrix(const std::string &path);

void save_gates_csv(const nn::GateMatrix &gates, const std::string &path,
                    const std::map<std::string, std::string> &extra_comments = {});
nn::GateMatrix load_gates_csv(const std::string &path);

void save_headset_json(const heads::HeadSet &set, const std::string &path);
heads::HeadSet load_headset_json(const std::string &path);

std::string slurp_file(const std::string &path);
void write_file(const std::string &path, const std::string &content);

}  // namespace headlens::io
