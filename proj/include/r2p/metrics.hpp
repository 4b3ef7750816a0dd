#pragma once

#include <cmath>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <vector>

#include "r2p/conformal.hpp"
#include "r2p/stats.hpp"

namespace r2p {

// All evaluation quantities are computed on test rows with known true
// effects; population (divide-by-n) variances throughout.
struct RunMetrics {
    double v_across = 0.0;
    double v_in = 0.0;
    double v_pop = 0.0;
    double v_in_normalized = 0.0;
    std::size_t n_subgroups = 0;
    double ci_width = 0.0;            // mean over test rows
    double ci_width_leaf_mean = 0.0;  // mean over leaves
    double coverage = 0.0;
    double overlap = 0.0;
    double pehe_root = 0.0;
};

// Variance of the per-group means; empty groups are skipped.
inline double v_across(const std::vector<std::vector<double>>& tau_by_group) {
    std::vector<double> means;
    for (const auto& g : tau_by_group)
        if (!g.empty()) means.push_back(mean(g));
    if (means.empty()) throw std::invalid_argument("v_across needs a nonempty group");
    if (means.size() == 1) return 0.0;
    return variance_population(means);
}

// Unweighted mean of the per-group variances.
inline double v_in(const std::vector<std::vector<double>>& tau_by_group) {
    std::vector<double> vars;
    for (const auto& g : tau_by_group)
        if (!g.empty()) vars.push_back(variance_population(g));
    if (vars.empty()) throw std::invalid_argument("v_in needs a nonempty group");
    return mean(vars);
}

inline double coverage_rate(std::span<const Interval> intervals,
                            std::span<const double> tau) {
    if (intervals.size() != tau.size())
        throw std::invalid_argument("coverage_rate length mismatch");
    if (intervals.empty()) throw std::invalid_argument("coverage_rate on empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < tau.size(); ++i) hit += intervals[i].contains(tau[i]) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(tau.size());
}

inline double mean_ci_width(std::span<const Interval> intervals) {
    if (intervals.empty()) throw std::invalid_argument("mean_ci_width on empty input");
    double s = 0.0;
    for (const auto& iv : intervals) {
        if (!iv.finite()) {
            std::fprintf(stderr, "warning: infinite interval in width aggregation\n");
            return kInf;
        }
        s += iv.width();
    }
    return s / static_cast<double>(intervals.size());
}

// Mean pairwise overlap of the per-group [p,q]-percentile effect intervals.
// Groups with a single value contribute a point interval; fewer than two
// groups overlap nothing.
inline double overlap(const std::vector<std::vector<double>>& tau_by_group, double p = 20.0,
                      double q = 80.0) {
    if (!(p < q)) throw std::invalid_argument("overlap needs p < q");
    std::vector<Interval> bands;
    for (const auto& g : tau_by_group) {
        if (g.empty()) continue;
        bands.push_back({percentile_linear(g, p), percentile_linear(g, q)});
    }
    if (bands.size() < 2) return 0.0;
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < bands.size(); ++a) {
        for (std::size_t b = a + 1; b < bands.size(); ++b) {
            const double lo = std::max(bands[a].lo, bands[b].lo);
            const double hi = std::min(bands[a].hi, bands[b].hi);
            total += std::max(0.0, hi - lo);
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

// Root mean squared error of the estimated effect against the truth.
inline double pehe(std::span<const double> tau_hat, std::span<const double> tau_true) {
    if (tau_hat.size() != tau_true.size()) throw std::invalid_argument("pehe length mismatch");
    if (tau_hat.empty()) throw std::invalid_argument("pehe on empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < tau_hat.size(); ++i) {
        const double e = tau_hat[i] - tau_true[i];
        s += e * e;
    }
    return std::sqrt(s / static_cast<double>(tau_hat.size()));
}

}  // namespace r2p
