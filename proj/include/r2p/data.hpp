#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "r2p/linalg.hpp"
#include "r2p/rng.hpp"

namespace r2p {

struct RegressionDataset {
    Matrix covariates;
    std::vector<double> outcomes;

    std::size_t n() const { return outcomes.size(); }
    std::size_t dim() const { return covariates.cols(); }

    void validate() const {
        if (covariates.rows() != outcomes.size())
            throw std::invalid_argument("covariate/outcome row counts differ");
        for (double v : covariates.data())
            if (!std::isfinite(v)) throw std::invalid_argument("non-finite covariate");
        for (double v : outcomes)
            if (!std::isfinite(v)) throw std::invalid_argument("non-finite outcome");
    }
};

// Noiseless per-sample potential-outcome means and their difference. Loaded
// data may carry only tau, in which case y0/y1 stay empty.
struct GroundTruth {
    std::vector<double> y0;
    std::vector<double> y1;
    std::vector<double> tau;

    bool has_potential_outcomes() const { return !y0.empty() && !y1.empty(); }
};

struct HteDataset {
    Matrix covariates;
    std::vector<int> treatments;  // values in {0, 1}
    std::vector<double> outcomes;
    std::optional<GroundTruth> truth;

    std::size_t n() const { return outcomes.size(); }
    std::size_t dim() const { return covariates.cols(); }

    std::size_t count_treated() const {
        return static_cast<std::size_t>(std::count(treatments.begin(), treatments.end(), 1));
    }
    std::size_t count_control() const { return n() - count_treated(); }

    void validate() const {
        const std::size_t m = n();
        if (covariates.rows() != m || treatments.size() != m)
            throw std::invalid_argument("hte dataset length mismatch");
        if (truth && truth->tau.size() != m)
            throw std::invalid_argument("ground truth length mismatch");
        for (int t : treatments)
            if (t != 0 && t != 1) throw std::invalid_argument("treatment not in {0,1}");
        if (count_treated() == 0 || count_control() == 0)
            throw std::invalid_argument("dataset needs both treatment arms");
        for (double v : covariates.data())
            if (!std::isfinite(v)) throw std::invalid_argument("non-finite covariate");
        for (double v : outcomes)
            if (!std::isfinite(v)) throw std::invalid_argument("non-finite outcome");
    }
};

// Disjoint train/calibration index sets covering 0..n-1, both sorted.
struct DataSplit {
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> calib_idx;
};

// Seeded uniform split: random permutation, first floor(ratio*n) rows train.
inline DataSplit split_dataset(std::size_t n, double ratio, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("dataset too small to split");
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split ratio must be in (0,1)");
    Rng rng(seed);
    const auto perm = rng.permutation(n);
    const auto n_train = static_cast<std::size_t>(
        std::floor(ratio * static_cast<double>(n)));
    DataSplit s;
    s.train_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.calib_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
    std::sort(s.train_idx.begin(), s.train_idx.end());
    std::sort(s.calib_idx.begin(), s.calib_idx.end());
    return s;
}

// Splits each treatment arm independently so neither half can starve an arm.
inline DataSplit stratified_split_hte(const HteDataset& data, double ratio,
                                      std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split ratio must be in (0,1)");
    std::vector<std::size_t> arm_rows[2];
    for (std::size_t i = 0; i < data.n(); ++i)
        arm_rows[data.treatments[i]].push_back(i);
    if (arm_rows[0].size() < 2 || arm_rows[1].size() < 2)
        throw std::invalid_argument("arm too small");
    Rng rng(seed);
    DataSplit s;
    for (auto& rows : arm_rows) {
        rng.shuffle(rows);
        const auto n_train = static_cast<std::size_t>(
            std::floor(ratio * static_cast<double>(rows.size())));
        s.train_idx.insert(s.train_idx.end(), rows.begin(),
                           rows.begin() + static_cast<std::ptrdiff_t>(n_train));
        s.calib_idx.insert(s.calib_idx.end(),
                           rows.begin() + static_cast<std::ptrdiff_t>(n_train), rows.end());
    }
    std::sort(s.train_idx.begin(), s.train_idx.end());
    std::sort(s.calib_idx.begin(), s.calib_idx.end());
    return s;
}

inline HteDataset subset(const HteDataset& data, std::span<const std::size_t> rows) {
    HteDataset out;
    out.covariates = data.covariates.take_rows(rows);
    out.treatments.reserve(rows.size());
    out.outcomes.reserve(rows.size());
    for (std::size_t i : rows) {
        out.treatments.push_back(data.treatments[i]);
        out.outcomes.push_back(data.outcomes[i]);
    }
    if (data.truth) {
        GroundTruth t;
        for (std::size_t i : rows) {
            t.tau.push_back(data.truth->tau[i]);
            if (data.truth->has_potential_outcomes()) {
                t.y0.push_back(data.truth->y0[i]);
                t.y1.push_back(data.truth->y1[i]);
            }
        }
        out.truth = std::move(t);
    }
    return out;
}

inline HteDataset head(const HteDataset& data, std::size_t count) {
    std::vector<std::size_t> rows(count);
    for (std::size_t i = 0; i < count; ++i) rows[i] = i;
    return subset(data, rows);
}

inline HteDataset tail(const HteDataset& data, std::size_t count) {
    std::vector<std::size_t> rows(count);
    for (std::size_t i = 0; i < count; ++i) rows[i] = data.n() - count + i;
    return subset(data, rows);
}

}  // namespace r2p
