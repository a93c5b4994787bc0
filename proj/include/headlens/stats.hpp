#pragma once

#include <span>
#include <vector>

namespace headlens::stats {

double mean(std::span<const double> xs);

// Average ranks (ties share the mean of the positions they occupy).
std::vector<double> average_ranks(std::span<const double> xs);

// Spearman rank correlation with average-rank tie handling.
double spearman_rho(std::span<const double> a, std::span<const double> b);

}  // namespace headlens::stats
