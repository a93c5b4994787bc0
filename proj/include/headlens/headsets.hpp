#pragma once

#include <string>
#include <vector>

#include "headlens/headid.hpp"
#include "headlens/lahis.hpp"

namespace headlens::heads {

// A labeled, sorted, duplicate-free selection of heads plus the provenance
// needed to regenerate it.
struct HeadSet {
    std::string label;  // language id, "general", or "random"
    std::vector<HeadId> members;
    double fraction = 0.0;
    uint64_t seed = 0;
    std::vector<std::string> source_fingerprints;

    bool contains(HeadId id) const;
    int size() const { return static_cast<int>(members.size()); }
};

// k = max(1, floor(fraction * n_layers * n_heads)) highest-scoring heads;
// ties broken by (score desc, layer asc, head asc).
HeadSet top_fraction(const lahis::ImportanceMatrix &matrix, double fraction);

// Heads in every language's top-fraction set.
HeadSet general_heads(const std::vector<lahis::ImportanceMatrix> &matrices, double fraction);

// Language top-fraction minus the general set. May legally come out empty;
// `warn_empty` (stderr) flags that case.
HeadSet specific_heads(const lahis::ImportanceMatrix &matrix, double fraction, const HeadSet &general,
                       bool warn_empty = true);

// Uniform sample of n heads without replacement from the (n_layers x n_heads)
// universe minus `exclude`.
HeadSet random_heads(int n, int n_layers, int n_heads, const HeadSet &exclude, uint64_t seed);

}  // namespace headlens::heads
