#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "r2p/linalg.hpp"

namespace r2p {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    double width() const { return hi - lo; }
    bool contains(double v) const { return v >= lo && v <= hi; }
    bool finite() const { return std::isfinite(lo) && std::isfinite(hi); }
};

// Residual quantile at a coverage level together with the calibration size it
// came from. quantile is +inf when the level is not certifiable from n_calib
// residuals.
struct ConformalCalibration {
    double quantile = kInf;
    double coverage = 0.0;
    std::size_t n_calib = 0;
};

// Per-arm calibrations used to compose treatment-effect intervals.
struct ArmCalibrations {
    ConformalCalibration q0;  // control
    ConformalCalibration q1;  // treated
};

namespace detail {

// Order-statistic rank ceil((n+1)*coverage), with a snap window so that
// products that are integers in exact arithmetic do not round up from
// floating-point noise (e.g. 10 * 0.9).
inline std::size_t conformal_rank(std::size_t n, double coverage) {
    const double v = static_cast<double>(n + 1) * coverage;
    double r = std::ceil(v);
    if (r - v > 1.0 - 1e-9) r -= 1.0;
    return static_cast<std::size_t>(r);
}

}  // namespace detail

// The ceil((n+1)*coverage)-th smallest residual, or +inf when that rank
// exceeds n. No interpolation; ties kept as duplicates.
inline double residual_quantile(std::vector<double> residuals, double coverage) {
    if (!(coverage > 0.0 && coverage < 1.0))
        throw std::invalid_argument("coverage must be in (0,1)");
    const std::size_t n = residuals.size();
    if (n == 0) return kInf;
    const std::size_t rank = detail::conformal_rank(n, coverage);
    if (rank > n) return kInf;
    auto nth = residuals.begin() + static_cast<std::ptrdiff_t>(rank - 1);
    std::nth_element(residuals.begin(), nth, residuals.end());
    return *nth;
}

// Clamped variant: when the exact rank exceeds n, fall back to the largest
// residual instead of +inf. The certified level drops to n/(n+1) but the
// interval stays usable on small calibration sets.
inline double residual_quantile_clamped(std::vector<double> residuals, double coverage) {
    if (!(coverage > 0.0 && coverage < 1.0))
        throw std::invalid_argument("coverage must be in (0,1)");
    const std::size_t n = residuals.size();
    if (n == 0) return kInf;
    const std::size_t rank = std::min(detail::conformal_rank(n, coverage), n);
    auto nth = residuals.begin() + static_cast<std::ptrdiff_t>(rank - 1);
    std::nth_element(residuals.begin(), nth, residuals.end());
    return *nth;
}

inline ConformalCalibration calibrate(std::span<const double> residuals, double coverage,
                                      bool clamp_rank = false) {
    ConformalCalibration c;
    c.coverage = coverage;
    c.n_calib = residuals.size();
    std::vector<double> copy(residuals.begin(), residuals.end());
    c.quantile = clamp_rank ? residual_quantile_clamped(std::move(copy), coverage)
                            : residual_quantile(std::move(copy), coverage);
    return c;
}

// Convenience form: absolute residuals of a prediction function over the
// calibration rows of a dataset.
template <typename PredictFn>
ConformalCalibration calibrate(PredictFn&& predict, const Matrix& covariates,
                               std::span<const double> outcomes,
                               std::span<const std::size_t> calib_idx, double coverage) {
    std::vector<double> residuals;
    residuals.reserve(calib_idx.size());
    for (std::size_t i : calib_idx)
        residuals.push_back(std::abs(outcomes[i] - predict(covariates.row(i))));
    return calibrate(residuals, coverage);
}

inline Interval interval(double prediction, const ConformalCalibration& calib) {
    if (!std::isfinite(calib.quantile)) return {-kInf, kInf};
    return {prediction - calib.quantile, prediction + calib.quantile};
}

// Treatment-effect interval: center mu1 - mu0, half-width the sum of the
// per-arm quantiles.
inline Interval ite_interval(double mu1, double mu0, const ArmCalibrations& arms) {
    const double q = arms.q0.quantile + arms.q1.quantile;
    if (!std::isfinite(q)) return {-kInf, kInf};
    const double center = mu1 - mu0;
    return {center - q, center + q};
}

// Per-arm coverage level whose product meets the joint 1 - alpha target.
inline double coverage_level_per_arm(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw std::invalid_argument("alpha must be in (0,1)");
    return std::sqrt(1.0 - alpha);
}

}  // namespace r2p
