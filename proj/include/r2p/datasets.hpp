#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2p/data.hpp"
#include "r2p/rng.hpp"
#include "r2p/stats.hpp"

namespace r2p {

struct SyntheticSpec {
    enum class Kind { A, B };
    Kind kind = Kind::A;
    std::size_t n_train = 300;
    std::size_t n_test = 1000;
    std::uint64_t seed = 0;
};

// The second parameter of every stated normal is read as a VARIANCE by
// default; noise_as_sd flips the noise terms to a standard-deviation reading
// for sensitivity checks.

// Two standard-normal covariates; baseline 0.5*x0 + x1, effect 0.5*x0,
// treatment by fair coin, independent noise per potential outcome.
inline HteDataset gen_synthetic_a(const SyntheticSpec& spec, bool noise_as_sd = false) {
    const std::size_t n = spec.n_train + spec.n_test;
    const double noise_sd = noise_as_sd ? 0.01 : std::sqrt(0.01);
    Rng rng(spec.seed);
    HteDataset d;
    d.covariates = Matrix(n, 2);
    d.treatments.resize(n);
    d.outcomes.resize(n);
    GroundTruth t;
    t.y0.resize(n);
    t.y1.resize(n);
    t.tau.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x0 = rng.normal();
        const double x1 = rng.normal();
        d.covariates(i, 0) = x0;
        d.covariates(i, 1) = x1;
        const int treat = rng.bernoulli(0.5) ? 1 : 0;
        d.treatments[i] = treat;
        const double eta = 0.5 * x0 + x1;
        const double kappa = 0.5 * x0;
        const double e0 = rng.normal(0.0, noise_sd);
        const double e1 = rng.normal(0.0, noise_sd);
        t.tau[i] = kappa;
        t.y0[i] = eta - 0.5 * kappa + e0;
        t.y1[i] = eta + 0.5 * kappa + e1;
        d.outcomes[i] = treat == 1 ? t.y1[i] : t.y0[i];
    }
    d.truth = std::move(t);
    return d;
}

// Treatment effect of the clinical-trial-style generator as a function of the
// time-from-onset covariate.
inline double synthetic_b_tau(double time_from_onset) {
    return 4.0 * logistic(time_from_onset - 9.0) - 5.0;
}

namespace detail {

struct MarginalNormal {
    double mu;
    double var;
};

// Nine lab-value covariates (features 1..9); feature 0 is time from onset.
inline constexpr std::array<MarginalNormal, 9> kSyntheticBLabs = {{
    {66.0, 4.0},    // age
    {66.0, 4.0},    // white blood cell count (as printed)
    {0.8, 0.1},     // lymphocyte count
    {183.0, 20.4},  // platelet count
    {68.0, 6.6},    // serum creatinine
    {31.0, 5.1},    // aspartate aminotransferase
    {26.0, 5.1},    // alanine aminotransferase
    {339.0, 51.0},  // lactate dehydrogenase
    {76.0, 21.0},   // creatine kinase
}};

}  // namespace detail

// Ten clinical covariates; the effect depends only on time from onset through
// a logistic contrast, the labs shift both arms equally through a sparse
// linear term on standardized values. Coefficients are redrawn per seed.
inline HteDataset gen_synthetic_b(const SyntheticSpec& spec, bool noise_as_sd = false) {
    const std::size_t n = spec.n_train + spec.n_test;
    const double noise_sd = noise_as_sd ? 0.1 : std::sqrt(0.1);
    Rng rng(spec.seed);

    std::array<double, 9> beta{};
    for (auto& b : beta) {
        const double u = rng.uniform01();
        if (u < 0.6) b = 0.0;
        else if (u < 0.7) b = 0.1;
        else if (u < 0.8) b = 0.2;
        else if (u < 0.9) b = 0.3;
        else b = 0.4;
    }

    HteDataset d;
    d.covariates = Matrix(n, 10);
    d.treatments.resize(n);
    d.outcomes.resize(n);
    GroundTruth t;
    t.y0.resize(n);
    t.y1.resize(n);
    t.tau.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x0 = rng.uniform(4.0, 14.0);
        d.covariates(i, 0) = x0;
        // Standardized against the generating marginals, not the sample.
        double linear = 0.0;
        for (std::size_t j = 0; j < detail::kSyntheticBLabs.size(); ++j) {
            const auto& m = detail::kSyntheticBLabs[j];
            const double v = rng.normal(m.mu, std::sqrt(m.var));
            d.covariates(i, j + 1) = v;
            linear += beta[j] * (v - m.mu) / std::sqrt(m.var);
        }
        const int treat = rng.bernoulli(0.5) ? 1 : 0;
        d.treatments[i] = treat;
        const double sig = logistic(x0 - 9.0);
        const double m0 = linear + sig + 5.0;
        const double m1 = linear + 5.0 * sig;
        const double e0 = rng.normal(0.0, noise_sd);
        const double e1 = rng.normal(0.0, noise_sd);
        t.tau[i] = m1 - m0;  // = synthetic_b_tau(x0)
        t.y0[i] = m0 + e0;
        t.y1[i] = m1 + e1;
        d.outcomes[i] = treat == 1 ? t.y1[i] : t.y0[i];
    }
    d.truth = std::move(t);
    return d;
}

inline HteDataset gen_synthetic(const SyntheticSpec& spec, bool noise_as_sd = false) {
    return spec.kind == SyntheticSpec::Kind::A ? gen_synthetic_a(spec, noise_as_sd)
                                               : gen_synthetic_b(spec, noise_as_sd);
}

// Column naming for semi-synthetic CSV ingestion. An empty covariate list
// means "every column not otherwise claimed".
struct CsvSchema {
    std::vector<std::string> covariates;
    std::string treatment = "treatment";
    std::string outcome = "outcome";
    std::optional<std::string> tau;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        // trim surrounding whitespace
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

inline double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
    double v = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc{} || res.ptr != last)
        throw std::invalid_argument("non-numeric value at row " + std::to_string(row) +
                                    ", column " + col);
    return v;
}

}  // namespace detail

// Reads a header-first CSV into an HteDataset. A tau column, when named,
// populates ground truth (potential outcomes stay empty).
inline HteDataset load_semisynthetic_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open csv file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("empty csv file: " + path);
    const auto header = detail::split_csv_line(line);

    auto find_col = [&](const std::string& name) -> std::size_t {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return j;
        throw std::invalid_argument("missing column: " + name);
    };

    const std::size_t t_col = find_col(schema.treatment);
    const std::size_t y_col = find_col(schema.outcome);
    std::optional<std::size_t> tau_col;
    if (schema.tau) tau_col = find_col(*schema.tau);

    std::vector<std::size_t> x_cols;
    if (schema.covariates.empty()) {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (j != t_col && j != y_col && (!tau_col || j != *tau_col))
                x_cols.push_back(j);
    } else {
        for (const auto& name : schema.covariates) x_cols.push_back(find_col(name));
    }
    if (x_cols.empty()) throw std::invalid_argument("csv schema has no covariate columns");

    std::vector<std::vector<double>> xs;
    std::vector<int> ts;
    std::vector<double> ys, taus;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw std::invalid_argument("row " + std::to_string(row) + " has " +
                                        std::to_string(cells.size()) + " cells, expected " +
                                        std::to_string(header.size()));
        std::vector<double> x;
        x.reserve(x_cols.size());
        for (std::size_t j : x_cols) x.push_back(detail::parse_cell(cells[j], row, header[j]));
        const double tv = detail::parse_cell(cells[t_col], row, header[t_col]);
        if (tv != 0.0 && tv != 1.0)
            throw std::invalid_argument("treatment value not in {0,1} at row " +
                                        std::to_string(row));
        xs.push_back(std::move(x));
        ts.push_back(tv == 1.0 ? 1 : 0);
        ys.push_back(detail::parse_cell(cells[y_col], row, header[y_col]));
        if (tau_col) taus.push_back(detail::parse_cell(cells[*tau_col], row, header[*tau_col]));
    }

    HteDataset d;
    d.covariates = Matrix::from_rows(xs);
    d.treatments = std::move(ts);
    d.outcomes = std::move(ys);
    if (tau_col) {
        GroundTruth t;
        t.tau = std::move(taus);
        d.truth = std::move(t);
    }
    d.validate();
    return d;
}

}  // namespace r2p
