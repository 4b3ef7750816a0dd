#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "r2p/datasets.hpp"
#include "r2p/partition.hpp"

using namespace r2p;

TEST_CASE("deviation branches") {
    CHECK(deviation(5.0, {1.0, 3.0}) == 2.0);
    CHECK(deviation(2.0, {1.0, 3.0}) == 0.0);
    CHECK(deviation(0.0, {1.0, 3.0}) == 1.0);
}

TEST_CASE("subgroup_stats degenerate calibration") {
    std::vector<CalibPoint> rows(100, CalibPoint{4.0, 0.0, 0});
    const auto st = subgroup_stats(rows, 0.05, 0.8, TaskMode::regression);
    CHECK(st.w_hat == 0.0);
    CHECK(st.s_hat == 0.0);
    CHECK(st.center == doctest::Approx(4.0));
    CHECK(st.n_calib == 100);
}

TEST_CASE("subgroup_stats hand-evaluated deviation") {
    // Two rows with predictions 0 and 10, residuals 1: the 0.2-coverage
    // quantile is 1, so each deviation is 5 - 1 = 4.
    std::vector<CalibPoint> rows{{0.0, 1.0, 0}, {10.0, 1.0, 0}};
    const auto st = subgroup_stats(rows, 0.05, 0.8, TaskMode::regression);
    CHECK(st.center == doctest::Approx(5.0));
    CHECK(st.s_hat == doctest::Approx(4.0));
    CHECK(std::isinf(st.w_hat));  // 0.95 rank overflows two rows
}

TEST_CASE("subgroup_stats starved arm in hte mode") {
    std::vector<CalibPoint> rows(30, CalibPoint{1.0, 0.5, 0});  // control only
    const auto st = subgroup_stats(rows, 0.05, 0.8, TaskMode::hte);
    CHECK(std::isinf(st.w_hat));
    CHECK(std::isinf(st.s_hat));
}

TEST_CASE("subgroup_stats empty input") {
    const auto st = subgroup_stats({}, 0.05, 0.8, TaskMode::regression);
    CHECK(std::isinf(st.w_hat));
    CHECK(std::isinf(st.s_hat));
}

TEST_CASE("candidate_thresholds midpoints, constants, cap") {
    CHECK(candidate_thresholds({1, 2, 4}, 64) == std::vector<double>{1.5, 3.0});
    CHECK(candidate_thresholds({7, 7, 7}, 64).empty());

    std::vector<double> many(1000);
    for (std::size_t i = 0; i < many.size(); ++i) many[i] = static_cast<double>(i);
    const auto capped = candidate_thresholds(many, 64);
    CHECK(capped.size() == 64);
    for (double t : capped) {
        CHECK(t > 0.0);
        CHECK(t < 999.0);
    }
    CHECK(std::is_sorted(capped.begin(), capped.end()));
}

TEST_CASE("confident_criterion worked examples") {
    SubgroupStats parent;
    parent.w_hat = 1.0;
    parent.s_hat = 1.0;  // impurity 1.0 at lambda 0.5
    PartitionConfig cfg;
    cfg.lambda = 0.5;

    cfg.gamma = 0.0;
    CHECK(confident_criterion(parent, 1.0, 1.0, cfg));  // boundary accepted
    cfg.gamma = 0.05;
    CHECK_FALSE(confident_criterion(parent, 0.96, 0.96, cfg));
    CHECK(confident_criterion(parent, 0.90, 0.90, cfg));

    SubgroupStats open;
    CHECK_FALSE(confident_criterion(open, 0.0, 0.0, cfg));
}

namespace {

struct StepData {
    RegressionDataset data;
    DataSplit split;
    detail::PredictionCache cache;
};

// Step outcome in feature 0 with a perfect model: predictions equal the
// noiseless step, residuals equal the injected noise.
StepData make_step_regression(std::size_t n, std::uint64_t seed, double noise_sd) {
    Rng rng(seed);
    StepData sd;
    sd.data.covariates = Matrix(n, 2);
    sd.data.outcomes.resize(n);
    sd.cache.pred.resize(n);
    sd.cache.resid.assign(n, 0.0);
    sd.cache.arm.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const double x0 = rng.uniform(-1.0, 1.0);
        sd.data.covariates(i, 0) = x0;
        sd.data.covariates(i, 1) = rng.normal();
        const double level = x0 >= 0.0 ? 10.0 : 0.0;
        const double noise = rng.normal(0.0, noise_sd);
        sd.data.outcomes[i] = level + noise;
        sd.cache.pred[i] = level;
        sd.cache.resid[i] = std::abs(noise);
    }
    sd.split = split_dataset(n, 0.5, seed + 1);
    return sd;
}

// Straight-line reimplementation of the weighted child impurity used to
// cross-check best_split's argmin.
double oracle_children_impurity(const StepData& sd, const PartitionConfig& cfg,
                                std::size_t feature, double threshold) {
    auto stats_for = [&](bool geq) {
        std::vector<double> preds, res;
        for (std::size_t i : sd.split.calib_idx) {
            const bool side = sd.data.covariates(i, feature) >= threshold;
            if (side != geq) continue;
            preds.push_back(sd.cache.pred[i]);
            res.push_back(sd.cache.resid[i]);
        }
        const std::size_t n = preds.size();
        std::vector<double> sorted = res;
        std::sort(sorted.begin(), sorted.end());
        auto rank_value = [&](double cov) {
            const auto r = static_cast<std::size_t>(
                std::ceil((static_cast<double>(n) + 1.0) * cov - 1e-9));
            return r > n ? kInf : sorted[r - 1];
        };
        const double qw = rank_value(1.0 - cfg.alpha);
        const double qs = rank_value(1.0 - cfg.beta_s);
        double center = 0.0;
        for (double p : preds) center += p;
        center /= static_cast<double>(n);
        double s = 0.0;
        for (double p : preds) s += std::max(0.0, std::abs(p - center) - qs);
        s /= static_cast<double>(n);
        return std::tuple<double, double, std::size_t>{2.0 * qw, s, n};
    };
    const auto [w_g, s_g, n_g] = stats_for(true);
    const auto [w_l, s_l, n_l] = stats_for(false);
    const double n_all = static_cast<double>(n_g + n_l);
    const double w = (w_g * n_g + w_l * n_l) / n_all;
    const double s = (s_g * n_g + s_l * n_l) / n_all;
    return cfg.lambda * w + (1.0 - cfg.lambda) * s;
}

}  // namespace

TEST_CASE("best_split matches a brute-force impurity scan on step data") {
    const auto sd = make_step_regression(200, 31, 0.05);
    PartitionConfig cfg;
    cfg.alpha = 0.1;

    const auto got = detail::best_split(sd.data.covariates, sd.split.train_idx,
                                        sd.split.calib_idx, sd.cache, cfg,
                                        TaskMode::regression);
    REQUIRE(got.has_value());
    CHECK(got->rule.feature == 0);
    CHECK(std::abs(got->rule.threshold) < 0.15);

    // independent argmin over the same candidate grid
    double best_obj = kInf;
    std::size_t best_feature = 99;
    double best_threshold = 0.0;
    for (std::size_t feature = 0; feature < 2; ++feature) {
        std::vector<double> values;
        for (std::size_t i : sd.split.train_idx)
            values.push_back(sd.data.covariates(i, feature));
        for (double t : candidate_thresholds(values, cfg.max_thresholds_per_feature)) {
            std::size_t tr_g = 0, tr_l = 0, ca_g = 0, ca_l = 0;
            for (std::size_t i : sd.split.train_idx)
                (sd.data.covariates(i, feature) >= t ? tr_g : tr_l) += 1;
            for (std::size_t i : sd.split.calib_idx)
                (sd.data.covariates(i, feature) >= t ? ca_g : ca_l) += 1;
            if (std::min({tr_g, tr_l, ca_g, ca_l}) < cfg.min_leaf) continue;
            const double obj = oracle_children_impurity(sd, cfg, feature, t);
            if (obj < best_obj) {
                best_obj = obj;
                best_feature = feature;
                best_threshold = t;
            }
        }
    }
    CHECK(got->rule.feature == best_feature);
    CHECK(got->rule.threshold == doctest::Approx(best_threshold));
    const double got_obj = cfg.lambda * got->children_w + (1.0 - cfg.lambda) * got->children_s;
    CHECK(got_obj == doctest::Approx(best_obj).epsilon(1e-9));
}

TEST_CASE("best_split refuses undersized subgroups") {
    const auto sd = make_step_regression(60, 5, 0.05);
    PartitionConfig cfg;
    cfg.min_leaf = 31;  // 2*min_leaf exceeds the 30-row training half
    CHECK_FALSE(detail::best_split(sd.data.covariates, sd.split.train_idx,
                                   sd.split.calib_idx, sd.cache, cfg, TaskMode::regression)
                    .has_value());
}

namespace {

RegressionDataset make_noise_regression(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    RegressionDataset d;
    d.covariates = Matrix(n, 1);
    d.outcomes.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        d.covariates(i, 0) = rng.normal();
        d.outcomes[i] = rng.normal(0.0, 0.1);
    }
    return d;
}

RegressionDataset make_step_dataset(std::size_t n, std::uint64_t seed) {
    // level jumps at x0 = 0, with a margin band so local estimators never mix
    // the two plateaus
    Rng rng(seed);
    RegressionDataset d;
    d.covariates = Matrix(n, 2);
    d.outcomes.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double mag = rng.uniform(0.1, 1.0);
        d.covariates(i, 0) = rng.bernoulli(0.5) ? mag : -mag;
        d.covariates(i, 1) = rng.normal();
        d.outcomes[i] = (d.covariates(i, 0) >= 0.0 ? 10.0 : 0.0) + rng.normal(0.0, 0.05);
    }
    return d;
}

EstimatorConfig knn_cfg(std::size_t k) {
    EstimatorConfig cfg;
    cfg.kind = EstimatorConfig::Kind::knn;
    cfg.knn_k = k;
    return cfg;
}

}  // namespace

TEST_CASE("r2p_fit keeps pure-noise data in one subgroup") {
    std::size_t single = 0;
    const int runs = 50;
    for (int r = 0; r < runs; ++r) {
        const auto d = make_noise_regression(600, 400 + r);
        PartitionConfig cfg;
        cfg.seed = 400 + r;
        const auto tree = r2p_fit(d, knn_cfg(20), cfg);
        single += tree.n_leaves() == 1 ? 1 : 0;
    }
    CHECK(single >= runs * 9 / 10);
}

TEST_CASE("r2p_fit recovers the step partition") {
    // min_leaf at 60 leaves room for exactly one split of the 200-row
    // training half, isolating step recovery from deeper refinements
    std::size_t good = 0;
    const int runs = 50;
    for (int r = 0; r < runs; ++r) {
        const auto d = make_step_dataset(400, 900 + r);
        PartitionConfig cfg;
        cfg.alpha = 0.1;
        cfg.min_leaf = 60;
        cfg.seed = 900 + r;
        const auto tree = r2p_fit(d, knn_cfg(5), cfg);
        const bool two_leaves = tree.n_leaves() == 2;
        const bool near_step = !tree.nodes[0].is_leaf &&
                               tree.nodes[0].split->feature == 0 &&
                               std::abs(tree.nodes[0].split->threshold) < 0.2;
        good += (two_leaves && near_step) ? 1 : 0;
    }
    CHECK(good >= runs * 9 / 10);
}

TEST_CASE("r2p_fit deterministic for a fixed seed") {
    const auto d = make_step_dataset(200, 77);
    PartitionConfig cfg;
    cfg.alpha = 0.1;
    cfg.seed = 123;
    const auto a = r2p_fit(d, knn_cfg(5), cfg);
    const auto b = r2p_fit(d, knn_cfg(5), cfg);
    CHECK(to_json(a) == to_json(b));
}

TEST_CASE("r2p_fit errors when alpha cannot calibrate the root") {
    const auto d = make_noise_regression(12, 3);
    PartitionConfig cfg;
    cfg.alpha = 0.05;  // needs 19 calibration rows, only 6 available
    cfg.min_leaf = 2;
    CHECK_THROWS_WITH_AS(r2p_fit(d, knn_cfg(2), cfg),
                         "alpha too strict for calibration size", std::runtime_error);
}

namespace {

PartitionConfig table_cfg(std::uint64_t seed) {
    PartitionConfig cfg;
    cfg.alpha = 0.1;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("r2p_hte_fit subgroup counts on the two-covariate generator") {
    std::vector<std::size_t> leaves;
    for (int r = 0; r < 50; ++r) {
        const auto d = gen_synthetic_a({SyntheticSpec::Kind::A, 300, 0, 7000ull + r},
                                       /*noise_as_sd=*/true);
        EstimatorConfig est;  // gp defaults
        auto cfg = table_cfg(7000ull + r);
        cfg.gamma = 0.2;  // benchmark operating point, see the gamma ablation
        const auto tree = r2p_hte_fit(d, est, cfg);
        leaves.push_back(tree.n_leaves());
    }
    double m = 0.0;
    for (auto l : leaves) m += static_cast<double>(l);
    m /= static_cast<double>(leaves.size());
    CHECK(m >= 3.0);
    CHECK(m <= 7.0);
}

TEST_CASE("r2p_hte_fit leaf centers track the time covariate") {
    std::size_t ordered = 0;
    const int runs = 10;
    for (int r = 0; r < runs; ++r) {
        const auto d = gen_synthetic_b({SyntheticSpec::Kind::B, 300, 0, 8100ull + r});
        EstimatorConfig est;
        const auto tree = r2p_hte_fit(d, est, table_cfg(8100ull + r));
        const auto ids = tree.leaf_ids();
        if (ids.size() < 2) continue;
        double lo_x0 = kInf, hi_x0 = -kInf;
        double lo_center = 0.0, hi_center = 0.0;
        for (auto id : ids) {
            const auto& node = tree.nodes[id];
            double mx = 0.0;
            for (auto i : node.calib_idx) mx += d.covariates(i, 0);
            mx /= static_cast<double>(node.calib_idx.size());
            if (mx < lo_x0) {
                lo_x0 = mx;
                lo_center = node.stats.center;
            }
            if (mx > hi_x0) {
                hi_x0 = mx;
                hi_center = node.stats.center;
            }
        }
        ordered += lo_center < hi_center ? 1 : 0;
    }
    CHECK(ordered >= 8);
}

TEST_CASE("r2p_hte_fit keeps a zero-effect world in one subgroup") {
    // library defaults: alpha 0.05, gamma 0.05
    std::size_t single = 0;
    const int runs = 20;
    for (int r = 0; r < runs; ++r) {
        Rng rng(6200 + r);
        HteDataset d;
        const std::size_t n = 300;
        d.covariates = Matrix(n, 2);
        d.treatments.resize(n);
        d.outcomes.resize(n);
        GroundTruth t;
        t.tau.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            d.covariates(i, 0) = rng.normal();
            d.covariates(i, 1) = rng.normal();
            d.treatments[i] = rng.bernoulli(0.5) ? 1 : 0;
            d.outcomes[i] = 0.5 * d.covariates(i, 0) + rng.normal(0.0, 0.1);
        }
        d.truth = std::move(t);
        EstimatorConfig est;
        PartitionConfig cfg;
        cfg.seed = 6200ull + r;
        const auto tree = r2p_hte_fit(d, est, cfg);
        single += tree.n_leaves() == 1 ? 1 : 0;
    }
    CHECK(single >= runs * 9 / 10);
}

TEST_CASE("r2p_hte_fit deterministic for a fixed seed") {
    const auto d = gen_synthetic_a({SyntheticSpec::Kind::A, 300, 0, 555}, true);
    EstimatorConfig est;
    const auto a = r2p_hte_fit(d, est, table_cfg(555));
    const auto b = r2p_hte_fit(d, est, table_cfg(555));
    CHECK(to_json(a) == to_json(b));
}

TEST_CASE("predict_group routing") {
    const auto d = make_step_dataset(200, 42);
    PartitionConfig cfg;
    cfg.alpha = 0.1;
    cfg.seed = 42;
    const auto tree = r2p_fit(d, knn_cfg(5), cfg);
    REQUIRE(tree.n_leaves() >= 2);
    REQUIRE(!tree.nodes[0].is_leaf);

    const double phi = tree.nodes[0].split->threshold;
    const std::size_t feature = tree.nodes[0].split->feature;
    std::vector<double> x{0.0, 0.0};

    x[feature] = phi - 0.5;
    CHECK(predict_group(tree, x).leaf_id == tree.route(x));
    x[feature] = phi;  // boundary goes to the geq side
    const auto boundary = predict_group(tree, x);
    std::size_t at = tree.nodes[0].children[1];
    while (!tree.nodes[at].is_leaf)
        at = tree.nodes[at].children[x[tree.nodes[at].split->feature] >=
                                             tree.nodes[at].split->threshold
                                         ? 1
                                         : 0];
    CHECK(boundary.leaf_id == at);
    CHECK(boundary.interval.contains(boundary.estimate));
}

TEST_CASE("single-leaf tree routes everything to the root") {
    const auto d = make_noise_regression(300, 17);
    PartitionConfig cfg;
    cfg.seed = 17;
    const auto tree = r2p_fit(d, knn_cfg(20), cfg);
    if (tree.n_leaves() == 1) {
        for (double v : {-2.0, 0.0, 3.5}) {
            const std::vector<double> x{v};
            CHECK(predict_group(tree, x).leaf_id == 0);
        }
    }
}

TEST_CASE("every covariate point lands in exactly one leaf") {
    const auto d = gen_synthetic_a({SyntheticSpec::Kind::A, 300, 0, 99}, true);
    EstimatorConfig est;
    const auto tree = r2p_hte_fit(d, est, table_cfg(99));
    Rng rng(1);
    for (int rep = 0; rep < 200; ++rep) {
        const std::vector<double> x{rng.normal(0.0, 2.0), rng.normal(0.0, 2.0)};
        std::size_t accepting = 0;
        std::size_t accepted_id = 0;
        for (auto id : tree.leaf_ids()) {
            bool ok = true;
            for (const auto& rule : tree.nodes[id].rule_path) ok = ok && rule.accepts(x);
            if (ok) {
                ++accepting;
                accepted_id = id;
            }
        }
        CHECK(accepting == 1);
        CHECK(accepted_id == tree.route(x));
    }
}

TEST_CASE("accepted splits replay the confident criterion") {
    const auto d = gen_synthetic_a({SyntheticSpec::Kind::A, 300, 0, 321}, true);
    EstimatorConfig est;
    const auto cfg = table_cfg(321);
    const auto tree = r2p_hte_fit(d, est, cfg);
    for (const auto& node : tree.nodes) {
        if (node.is_leaf) continue;
        const double lhs = (1.0 - cfg.gamma) * node.split_parent_impurity;
        const double rhs = cfg.lambda * node.split_children_w +
                           (1.0 - cfg.lambda) * node.split_children_s;
        CHECK(lhs >= rhs);
        CHECK(node.split_parent_impurity ==
              doctest::Approx(node.stats.impurity(cfg.lambda)));
    }
}

TEST_CASE("leaf count weakly nonincreasing in gamma") {
    const auto d = gen_synthetic_a({SyntheticSpec::Kind::A, 300, 0, 2718}, true);
    EstimatorConfig est;
    std::size_t prev = SIZE_MAX;
    for (double gamma : {0.01, 0.05, 0.1, 0.2, 0.5}) {
        auto cfg = table_cfg(2718);
        cfg.gamma = gamma;
        const auto tree = r2p_hte_fit(d, est, cfg);
        CHECK(tree.n_leaves() <= prev);
        prev = tree.n_leaves();
    }
    CHECK(prev >= 1);
}
