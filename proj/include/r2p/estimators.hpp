#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "r2p/data.hpp"
#include "r2p/linalg.hpp"
#include "r2p/stats.hpp"

namespace r2p {

struct EstimatorConfig {
    enum class Kind { knn, ridge, gp };

    Kind kind = Kind::gp;
    std::size_t knn_k = 10;
    double ridge_penalty = 1e-3;
    // gp_* values <= 0 select data-driven defaults: median pairwise distance
    // for the lengthscale, Var(y) for the signal variance, and a
    // marginal-likelihood grid for the noise variance.
    double gp_lengthscale = 0.0;
    double gp_signal_var = 0.0;
    double gp_noise_var = 0.0;
    std::uint64_t seed = 0;
};

inline EstimatorConfig::Kind estimator_kind_from_name(const std::string& name) {
    if (name == "knn") return EstimatorConfig::Kind::knn;
    if (name == "ridge") return EstimatorConfig::Kind::ridge;
    if (name == "gp") return EstimatorConfig::Kind::gp;
    throw std::invalid_argument("unknown estimator kind: " + name);
}

// Outcome model contract: deterministic predictions once fitted, defined for
// any finite covariate vector. Fitted estimators are immutable.
class OutcomeEstimator {
public:
    virtual ~OutcomeEstimator() = default;
    virtual double predict(std::span<const double> x) const = 0;
};

using OutcomePtr = std::shared_ptr<const OutcomeEstimator>;

namespace detail {

// Per-feature zero-mean unit-variance transform with statistics from the fit
// rows only. Constant features pass through unscaled.
struct Standardizer {
    std::vector<double> mean_;
    std::vector<double> sd_;

    void fit(const Matrix& x) {
        const std::size_t d = x.cols();
        mean_.assign(d, 0.0);
        sd_.assign(d, 1.0);
        if (x.rows() == 0) return;
        for (std::size_t j = 0; j < d; ++j) {
            double m = 0.0;
            for (std::size_t i = 0; i < x.rows(); ++i) m += x(i, j);
            m /= static_cast<double>(x.rows());
            double v = 0.0;
            for (std::size_t i = 0; i < x.rows(); ++i) {
                const double c = x(i, j) - m;
                v += c * c;
            }
            v /= static_cast<double>(x.rows());
            mean_[j] = m;
            sd_[j] = v > 0.0 ? std::sqrt(v) : 1.0;
        }
    }

    std::vector<double> apply(std::span<const double> x) const {
        std::vector<double> z(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) z[j] = (x[j] - mean_[j]) / sd_[j];
        return z;
    }

    Matrix apply(const Matrix& x) const {
        Matrix z(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j)
                z(i, j) = (x(i, j) - mean_[j]) / sd_[j];
        return z;
    }
};

class KnnEstimator final : public OutcomeEstimator {
public:
    KnnEstimator(const Matrix& x, std::span<const double> y, std::size_t k) : k_(k) {
        if (k == 0) throw std::invalid_argument("knn needs k >= 1");
        if (k > x.rows()) throw std::invalid_argument("knn needs k <= training size");
        scaler_.fit(x);
        x_ = scaler_.apply(x);
        y_.assign(y.begin(), y.end());
    }

    double predict(std::span<const double> x) const override {
        const auto z = scaler_.apply(x);
        // (distance, row) pairs; ties resolved toward the lower row index.
        std::vector<std::pair<double, std::size_t>> order(x_.rows());
        for (std::size_t i = 0; i < x_.rows(); ++i)
            order[i] = {squared_distance(x_.row(i), z), i};
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k_),
                          order.end());
        double s = 0.0;
        for (std::size_t i = 0; i < k_; ++i) s += y_[order[i].second];
        return s / static_cast<double>(k_);
    }

private:
    std::size_t k_;
    Standardizer scaler_;
    Matrix x_;
    std::vector<double> y_;
};

class RidgeEstimator final : public OutcomeEstimator {
public:
    RidgeEstimator(const Matrix& x, std::span<const double> y, double penalty) {
        if (penalty < 0.0) throw std::invalid_argument("ridge penalty must be >= 0");
        const std::size_t n = x.rows();
        const std::size_t d = x.cols();
        // Normal equations over [1, x]; the intercept is not penalized.
        Matrix a(d + 1, d + 1);
        std::vector<double> rhs(d + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> z(d + 1);
            z[0] = 1.0;
            for (std::size_t j = 0; j < d; ++j) z[j + 1] = x(i, j);
            for (std::size_t r = 0; r < d + 1; ++r) {
                rhs[r] += z[r] * y[i];
                for (std::size_t c = 0; c < d + 1; ++c) a(r, c) += z[r] * z[c];
            }
        }
        for (std::size_t j = 1; j < d + 1; ++j) a(j, j) += penalty;
        Cholesky chol;
        if (!chol.factor(a)) throw std::runtime_error("singular design");
        coef_ = chol.solve(rhs);
    }

    double predict(std::span<const double> x) const override {
        double s = coef_[0];
        for (std::size_t j = 0; j < x.size(); ++j) s += coef_[j + 1] * x[j];
        return s;
    }

private:
    std::vector<double> coef_;
};

inline double median_pairwise_distance(const Matrix& x) {
    const std::size_t n = x.rows();
    if (n < 2) return 1.0;
    std::vector<double> d2;
    d2.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            d2.push_back(squared_distance(x.row(i), x.row(j)));
    std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(d2.size() / 2),
                     d2.end());
    const double med = std::sqrt(d2[d2.size() / 2]);
    return med > 0.0 ? med : 1.0;
}

// Zero-mean Gaussian-process regression with an RBF kernel
// k(a,b) = signal * exp(-|a-b|^2 / (2 l^2)) and noise on the diagonal.
class GpEstimator final : public OutcomeEstimator {
public:
    GpEstimator(const Matrix& x, std::span<const double> y, const EstimatorConfig& cfg) {
        scaler_.fit(x);
        x_ = scaler_.apply(x);
        const std::size_t n = x_.rows();
        std::vector<double> yv(y.begin(), y.end());

        const double var_y = n > 0 ? variance_population(yv) : 0.0;
        signal_ = cfg.gp_signal_var > 0.0 ? cfg.gp_signal_var : std::max(var_y, 1e-12);

        if (cfg.gp_lengthscale > 0.0 && cfg.gp_noise_var > 0.0) {
            lengthscale_ = cfg.gp_lengthscale;
            noise_ = cfg.gp_noise_var;
            if (!fit_exact(yv, noise_)) throw std::runtime_error("kernel not positive definite");
        } else {
            select_hyperparameters(yv, cfg);
        }
    }

    double predict(std::span<const double> x) const override {
        const auto z = scaler_.apply(x);
        double s = 0.0;
        for (std::size_t i = 0; i < x_.rows(); ++i)
            s += kernel(x_.row(i), z) * alpha_[i];
        return s;
    }

    double lengthscale() const { return lengthscale_; }
    double noise_var() const { return noise_; }

private:
    double kernel(std::span<const double> a, std::span<const double> b) const {
        return signal_ * std::exp(-squared_distance(a, b) /
                                  (2.0 * lengthscale_ * lengthscale_));
    }

    bool fit_exact(const std::vector<double>& y, double noise) {
        const std::size_t n = x_.rows();
        Matrix k(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                const double v = kernel(x_.row(i), x_.row(j));
                k(i, j) = v;
                k(j, i) = v;
            }
            k(i, i) += noise + 1e-10 * signal_;
        }
        if (!chol_.factor(k)) return false;
        alpha_ = chol_.solve(y);
        return true;
    }

    // Lengthscale and noise chosen on a fixed multiplicative grid by the log
    // marginal likelihood; keeps the fit adaptive between interpolation and
    // smoothing without a free optimizer. Long lengthscales let the kernel
    // track smooth global trends, which keeps far-from-data residuals from
    // blowing up.
    void select_hyperparameters(const std::vector<double>& y, const EstimatorConfig& cfg) {
        static constexpr double noise_grid[] = {1e-4, 1e-3, 1e-2, 3e-2, 1e-1, 3e-1};
        static constexpr double length_grid[] = {0.5, 1.0, 2.0, 4.0, 8.0};
        const double med = median_pairwise_distance(x_);

        std::vector<double> lengths;
        if (cfg.gp_lengthscale > 0.0)
            lengths.push_back(cfg.gp_lengthscale);
        else
            for (double f : length_grid) lengths.push_back(f * med);
        std::vector<double> noises;
        if (cfg.gp_noise_var > 0.0)
            noises.push_back(cfg.gp_noise_var);
        else
            for (double g : noise_grid) noises.push_back(g * signal_);

        double best_ll = -std::numeric_limits<double>::infinity();
        double best_len = 0.0, best_noise = 0.0;
        for (double len : lengths) {
            lengthscale_ = len;
            for (double noise : noises) {
                if (!fit_exact(y, noise)) continue;
                double quad = 0.0;
                for (std::size_t i = 0; i < y.size(); ++i) quad += y[i] * alpha_[i];
                const double ll = -0.5 * quad - 0.5 * chol_.log_det();
                if (ll > best_ll) {
                    best_ll = ll;
                    best_len = len;
                    best_noise = noise;
                }
            }
        }
        if (best_noise <= 0.0) throw std::runtime_error("kernel not positive definite");
        lengthscale_ = best_len;
        noise_ = best_noise;
        fit_exact(y, noise_);
    }

    Standardizer scaler_;
    Matrix x_;
    double lengthscale_ = 1.0;
    double signal_ = 1.0;
    double noise_ = 1.0;
    Cholesky chol_;
    std::vector<double> alpha_;
};

}  // namespace detail

inline OutcomePtr fit_knn(const Matrix& covariates, std::span<const double> outcomes,
                          std::size_t k) {
    return std::make_shared<detail::KnnEstimator>(covariates, outcomes, k);
}

inline OutcomePtr fit_ridge(const Matrix& covariates, std::span<const double> outcomes,
                            double penalty) {
    return std::make_shared<detail::RidgeEstimator>(covariates, outcomes, penalty);
}

inline OutcomePtr fit_gp(const Matrix& covariates, std::span<const double> outcomes,
                         const EstimatorConfig& cfg) {
    return std::make_shared<detail::GpEstimator>(covariates, outcomes, cfg);
}

inline OutcomePtr fit_outcome(const Matrix& covariates, std::span<const double> outcomes,
                              const EstimatorConfig& cfg) {
    switch (cfg.kind) {
        case EstimatorConfig::Kind::knn:
            return fit_knn(covariates, outcomes, cfg.knn_k);
        case EstimatorConfig::Kind::ridge:
            return fit_ridge(covariates, outcomes, cfg.ridge_penalty);
        case EstimatorConfig::Kind::gp:
            return fit_gp(covariates, outcomes, cfg);
    }
    throw std::logic_error("unhandled estimator kind");
}

// Two-arm treatment-effect model: tau(x) = mu1(x) - mu0(x) by construction.
class IteEstimator {
public:
    virtual ~IteEstimator() = default;
    virtual std::pair<double, double> predict_arms(std::span<const double> x) const = 0;

    double predict_ite(std::span<const double> x) const {
        const auto [mu0, mu1] = predict_arms(x);
        return mu1 - mu0;
    }
};

using ItePtr = std::shared_ptr<const IteEstimator>;

namespace detail {

class TLearner final : public IteEstimator {
public:
    TLearner(OutcomePtr mu0, OutcomePtr mu1) : mu0_(std::move(mu0)), mu1_(std::move(mu1)) {}

    std::pair<double, double> predict_arms(std::span<const double> x) const override {
        return {mu0_->predict(x), mu1_->predict(x)};
    }

private:
    OutcomePtr mu0_;
    OutcomePtr mu1_;
};

}  // namespace detail

// Fits one outcome model per treatment arm on the given training rows.
inline ItePtr fit_ite_t_learner(const HteDataset& data, const EstimatorConfig& cfg,
                                std::span<const std::size_t> train_idx) {
    std::vector<std::size_t> arm_rows[2];
    for (std::size_t i : train_idx) arm_rows[data.treatments[i]].push_back(i);
    if (arm_rows[0].empty() || arm_rows[1].empty())
        throw std::runtime_error("cannot fit arm");

    OutcomePtr models[2];
    for (int a = 0; a < 2; ++a) {
        const Matrix x = data.covariates.take_rows(arm_rows[a]);
        std::vector<double> y;
        y.reserve(arm_rows[a].size());
        for (std::size_t i : arm_rows[a]) y.push_back(data.outcomes[i]);
        models[a] = fit_outcome(x, y, cfg);
    }
    return std::make_shared<detail::TLearner>(models[0], models[1]);
}

}  // namespace r2p
