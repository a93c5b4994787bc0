#include "headlens/headsets.hpp"

#include <algorithm>
#include <cstdio>

#include "headlens/rng.hpp"

namespace headlens::heads {

bool HeadSet::contains(HeadId id) const {
    return std::binary_search(members.begin(), members.end(), id);
}

HeadSet top_fraction(const lahis::ImportanceMatrix &matrix, double fraction) {
    check_contract(fraction > 0.0 && fraction <= 1.0, "top_fraction: fraction must lie in (0, 1]");
    const int total = matrix.n_layers * matrix.n_heads;
    check_contract(total > 0, "top_fraction: empty matrix");
    const int k = std::max(1, static_cast<int>(std::floor(fraction * total)));

    std::vector<HeadId> order;
    order.reserve(static_cast<size_t>(total));
    for (int l = 0; l < matrix.n_layers; ++l) {
        for (int h = 0; h < matrix.n_heads; ++h) order.push_back({l, h});
    }
    std::stable_sort(order.begin(), order.end(), [&](HeadId a, HeadId b) {
        const double sa = matrix.at(a.layer, a.head);
        const double sb = matrix.at(b.layer, b.head);
        if (sa != sb) return sa > sb;
        return a < b;
    });

    HeadSet out;
    out.label = std::to_string(matrix.language_id);
    out.fraction = fraction;
    out.source_fingerprints = {lahis::matrix_fingerprint(matrix)};
    out.members.assign(order.begin(), order.begin() + k);
    std::sort(out.members.begin(), out.members.end());
    return out;
}

HeadSet general_heads(const std::vector<lahis::ImportanceMatrix> &matrices, double fraction) {
    check_contract(matrices.size() >= 2, "general_heads: need at least two languages");
    for (const auto &m : matrices) {
        check_contract(m.n_layers == matrices[0].n_layers && m.n_heads == matrices[0].n_heads,
                       "general_heads: matrix shape mismatch");
    }
    HeadSet out;
    out.label = "general";
    out.fraction = fraction;
    std::vector<HeadId> inter;
    for (size_t i = 0; i < matrices.size(); ++i) {
        HeadSet top = top_fraction(matrices[i], fraction);
        out.source_fingerprints.push_back(top.source_fingerprints[0]);
        if (i == 0) {
            inter = top.members;
        } else {
            std::vector<HeadId> next;
            std::set_intersection(inter.begin(), inter.end(), top.members.begin(), top.members.end(),
                                  std::back_inserter(next));
            inter = std::move(next);
        }
    }
    out.members = std::move(inter);
    return out;
}

HeadSet specific_heads(const lahis::ImportanceMatrix &matrix, double fraction, const HeadSet &general,
                       bool warn_empty) {
    HeadSet top = top_fraction(matrix, fraction);
    HeadSet out;
    out.label = std::to_string(matrix.language_id);
    out.fraction = fraction;
    out.source_fingerprints = top.source_fingerprints;
    for (const auto &fp : general.source_fingerprints) out.source_fingerprints.push_back(fp);
    std::set_difference(top.members.begin(), top.members.end(), general.members.begin(), general.members.end(),
                        std::back_inserter(out.members));
    if (out.members.empty() && warn_empty) {
        std::fprintf(stderr,
                     "warning: specific_heads for language %d is empty (general set covers the whole top set)\n",
                     matrix.language_id);
    }
    return out;
}

HeadSet random_heads(int n, int n_layers, int n_heads, const HeadSet &exclude, uint64_t seed) {
    std::vector<HeadId> pool;
    for (int l = 0; l < n_layers; ++l) {
        for (int h = 0; h < n_heads; ++h) {
            const HeadId id{l, h};
            if (!exclude.contains(id)) pool.push_back(id);
        }
    }
    check_contract(n >= 0 && n <= static_cast<int>(pool.size()),
                   "random_heads: requested " + std::to_string(n) + " heads from a pool of " +
                       std::to_string(pool.size()));
    DetRng rng(derive_seed(seed, "random-heads"));
    HeadSet out;
    out.label = "random";
    out.seed = seed;
    for (int pick = 0; pick < n; ++pick) {
        const size_t j = static_cast<size_t>(rng.next_below(pool.size()));
        out.members.push_back(pool[j]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    }
    std::sort(out.members.begin(), out.members.end());
    return out;
}

}  // namespace headlens::heads
