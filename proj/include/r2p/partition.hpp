#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2p/conformal.hpp"
#include "r2p/data.hpp"
#include "r2p/estimators.hpp"

namespace r2p {

enum class TaskMode { regression, hte };

// Axis-aligned half-space rule. A node's split routes x[feature] >= threshold
// to the geq child; rule paths record which side a subgroup lies on.
struct SplitRule {
    enum class Side { geq, lt };

    std::size_t feature = 0;
    double threshold = 0.0;
    Side side = Side::geq;

    bool accepts(std::span<const double> x) const {
        return side == Side::geq ? x[feature] >= threshold : x[feature] < threshold;
    }
};

struct PartitionConfig {
    double alpha = 0.05;
    double lambda = 0.5;
    double gamma = 0.05;
    double beta_s = 0.8;  // miscoverage of the intervals inside the deviation term
    std::size_t min_leaf = 10;
    std::optional<std::size_t> max_depth;
    std::size_t max_thresholds_per_feature = 64;
    double split_ratio = 0.5;
    bool stratify_split = true;
    // Child subgroups whose calibration sets cannot certify the target rank
    // take the larger of their own largest residual and the parent quantile,
    // instead of an infinite quantile; the root must always certify exactly.
    // Subsetting therefore never shrinks a width through rank effects alone.
    // Turning this off makes uncertifiable children invalid split candidates.
    bool inherit_small_calibrations = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0,1)");
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must be in [0,1]");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must be in [0,1)");
        if (!(beta_s > 0.0 && beta_s < 1.0)) throw std::invalid_argument("beta_s must be in (0,1)");
        if (min_leaf < 2) throw std::invalid_argument("min_leaf must be >= 2");
        if (!(split_ratio > 0.0 && split_ratio < 1.0))
            throw std::invalid_argument("split ratio must be in (0,1)");
        if (max_thresholds_per_feature == 0)
            throw std::invalid_argument("threshold cap must be >= 1");
    }
};

// Mean interval width, mean deviation beyond the interval, and prediction
// center over a subgroup's calibration rows, with the calibrations behind
// them. In regression mode only the arm-0 slots are used.
struct SubgroupStats {
    double w_hat = kInf;
    double s_hat = kInf;
    double center = 0.0;
    std::size_t n_calib = 0;
    ConformalCalibration alpha_q0, alpha_q1;
    ConformalCalibration beta_q0, beta_q1;

    double impurity(double lambda) const { return lambda * w_hat + (1.0 - lambda) * s_hat; }
    double halfwidth_alpha() const { return alpha_q0.quantile + alpha_q1.quantile; }
    bool finite() const { return std::isfinite(w_hat) && std::isfinite(s_hat); }
};

// One calibration row as the split search sees it: the global model's
// prediction, its absolute residual, and the observed arm (ignored in
// regression mode).
struct CalibPoint {
    double pred = 0.0;
    double resid = 0.0;
    int arm = 0;
};

// Distance from the center to the interval when the center falls outside it,
// zero otherwise.
inline double deviation(double center, const Interval& iv) {
    if (center > iv.hi) return center - iv.hi;
    if (center < iv.lo) return iv.lo - center;
    return 0.0;
}

inline SubgroupStats subgroup_stats(std::span<const CalibPoint> rows, double alpha,
                                    double beta_s, TaskMode mode,
                                    const SubgroupStats* parent_floor = nullptr) {
    SubgroupStats st;
    st.n_calib = rows.size();
    if (rows.empty()) return st;  // both stats stay +inf

    double sum = 0.0;
    for (const auto& r : rows) sum += r.pred;
    st.center = sum / static_cast<double>(rows.size());

    const double cov_w = mode == TaskMode::hte ? coverage_level_per_arm(alpha) : 1.0 - alpha;
    const double cov_s = mode == TaskMode::hte ? coverage_level_per_arm(beta_s) : 1.0 - beta_s;
    const bool clamp = parent_floor != nullptr;

    if (mode == TaskMode::regression) {
        std::vector<double> res;
        res.reserve(rows.size());
        for (const auto& r : rows) res.push_back(r.resid);
        st.alpha_q0 = calibrate(res, cov_w, clamp);
        st.beta_q0 = calibrate(res, cov_s, clamp);
        st.alpha_q1 = {0.0, cov_w, 0};
        st.beta_q1 = {0.0, cov_s, 0};
    } else {
        std::vector<double> res0, res1;
        for (const auto& r : rows) (r.arm == 1 ? res1 : res0).push_back(r.resid);
        st.alpha_q0 = calibrate(res0, cov_w, clamp);
        st.alpha_q1 = calibrate(res1, cov_w, clamp);
        st.beta_q0 = calibrate(res0, cov_s, clamp);
        st.beta_q1 = calibrate(res1, cov_s, clamp);
    }
    if (parent_floor) {
        // A quantile pinned to its own sample maximum is a subsetting
        // artifact (subset maxima only shrink); such estimates may not
        // undercut the quantile of the sample they were carved from.
        auto floor_q = [](ConformalCalibration& q, const ConformalCalibration& parent) {
            const std::size_t exact = detail::conformal_rank(q.n_calib, q.coverage);
            if (exact >= q.n_calib && std::isfinite(parent.quantile))
                q.quantile = std::max(q.quantile, parent.quantile);
        };
        floor_q(st.alpha_q0, parent_floor->alpha_q0);
        floor_q(st.alpha_q1, parent_floor->alpha_q1);
        floor_q(st.beta_q0, parent_floor->beta_q0);
        floor_q(st.beta_q1, parent_floor->beta_q1);
    }

    // Interval width is constant within the subgroup, so its mean over the
    // calibration rows equals 2x the half-width.
    const double half_w = st.alpha_q0.quantile + st.alpha_q1.quantile;
    st.w_hat = std::isfinite(half_w) ? 2.0 * half_w : kInf;

    const double half_s = st.beta_q0.quantile + st.beta_q1.quantile;
    if (std::isfinite(half_s)) {
        double dev = 0.0;
        for (const auto& r : rows)
            dev += deviation(st.center, Interval{r.pred - half_s, r.pred + half_s});
        st.s_hat = dev / static_cast<double>(rows.size());
    } else {
        st.s_hat = kInf;
    }
    return st;
}

// Midpoints between consecutive distinct sorted values, thinned to at most
// `cap` quantile-spaced picks. Constant input yields an empty list.
inline std::vector<double> candidate_thresholds(std::vector<double> values, std::size_t cap) {
    if (values.empty()) return {};
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    if (values.size() < 2) return {};
    std::vector<double> mids;
    mids.reserve(values.size() - 1);
    for (std::size_t i = 0; i + 1 < values.size(); ++i)
        mids.push_back(values[i] + 0.5 * (values[i + 1] - values[i]));
    if (mids.size() <= cap) return mids;
    std::vector<double> thinned;
    thinned.reserve(cap);
    for (std::size_t j = 0; j < cap; ++j) {
        const auto pick = static_cast<std::size_t>(
            std::floor((static_cast<double>(j) + 0.5) * static_cast<double>(mids.size()) /
                       static_cast<double>(cap)));
        thinned.push_back(mids[pick]);
    }
    return thinned;
}

// Impurity reduction test: children must sit at or below (1 - gamma) of the
// parent's impurity. `children_w` / `children_s` carry the aggregated child
// statistics produced by best_split.
inline bool confident_criterion(const SubgroupStats& parent, double children_w,
                                double children_s, const PartitionConfig& cfg) {
    if (!parent.finite()) return false;
    const double lhs = (1.0 - cfg.gamma) * parent.impurity(cfg.lambda);
    const double rhs = cfg.lambda * children_w + (1.0 - cfg.lambda) * children_s;
    return lhs >= rhs;
}

namespace detail {

// Per-row model outputs shared by the whole search: the global estimator is
// trained once and never refit per subgroup.
struct PredictionCache {
    std::vector<double> pred;    // all rows
    std::vector<double> resid;   // calibration rows only (by row index)
    std::vector<int> arm;        // observed arm per row; all zero in regression
};

struct SplitProposal {
    SplitRule rule;  // geq side
    SubgroupStats geq_stats, lt_stats;
    std::vector<std::size_t> train_geq, train_lt;
    std::vector<std::size_t> calib_geq, calib_lt;
    // Child statistics aggregated by calibration mass; the values compared
    // against the parent in the confident criterion.
    double children_w = kInf;
    double children_s = kInf;
};

inline std::vector<CalibPoint> gather_calib(const PredictionCache& cache,
                                            std::span<const std::size_t> calib_idx) {
    std::vector<CalibPoint> rows;
    rows.reserve(calib_idx.size());
    for (std::size_t i : calib_idx)
        rows.push_back({cache.pred[i], cache.resid[i], cache.arm[i]});
    return rows;
}

inline std::size_t arm_count(const PredictionCache& cache,
                             std::span<const std::size_t> idx, int arm) {
    std::size_t c = 0;
    for (std::size_t i : idx) c += cache.arm[i] == arm ? 1 : 0;
    return c;
}

// Greedy scan over every (feature, threshold) candidate. Children are kept
// only when both satisfy the minimum-size gates and calibrate to finite
// statistics; the winner minimizes the mass-weighted child impurity with ties
// broken toward the lower feature index, then the lower threshold.
inline std::optional<SplitProposal> best_split(const Matrix& covariates,
                                               std::span<const std::size_t> train_idx,
                                               std::span<const std::size_t> calib_idx,
                                               const PredictionCache& cache,
                                               const PartitionConfig& cfg, TaskMode mode,
                                               const SubgroupStats* parent_stats = nullptr) {
    if (train_idx.size() < 2 * cfg.min_leaf) return std::nullopt;
    const SubgroupStats* floor =
        cfg.inherit_small_calibrations ? parent_stats : nullptr;

    std::optional<SplitProposal> best;
    double best_objective = kInf;

    for (std::size_t feature = 0; feature < covariates.cols(); ++feature) {
        std::vector<double> values;
        values.reserve(train_idx.size());
        for (std::size_t i : train_idx) values.push_back(covariates(i, feature));
        const auto thresholds = candidate_thresholds(std::move(values),
                                                     cfg.max_thresholds_per_feature);
        for (double threshold : thresholds) {
            SplitProposal p;
            p.rule = {feature, threshold, SplitRule::Side::geq};
            for (std::size_t i : train_idx)
                (covariates(i, feature) >= threshold ? p.train_geq : p.train_lt).push_back(i);
            if (p.train_geq.size() < cfg.min_leaf || p.train_lt.size() < cfg.min_leaf)
                continue;
            for (std::size_t i : calib_idx)
                (covariates(i, feature) >= threshold ? p.calib_geq : p.calib_lt).push_back(i);
            if (p.calib_geq.size() < cfg.min_leaf || p.calib_lt.size() < cfg.min_leaf)
                continue;
            if (mode == TaskMode::hte) {
                bool arms_ok = true;
                for (const auto& side : {p.calib_geq, p.calib_lt})
                    for (int a : {0, 1})
                        arms_ok = arms_ok && arm_count(cache, side, a) >= 2;
                if (!arms_ok) continue;
            }

            const auto rows_geq = gather_calib(cache, p.calib_geq);
            const auto rows_lt = gather_calib(cache, p.calib_lt);
            p.geq_stats = subgroup_stats(rows_geq, cfg.alpha, cfg.beta_s, mode, floor);
            p.lt_stats = subgroup_stats(rows_lt, cfg.alpha, cfg.beta_s, mode, floor);
            if (!p.geq_stats.finite() || !p.lt_stats.finite()) continue;

            const double n_geq = static_cast<double>(p.calib_geq.size());
            const double n_lt = static_cast<double>(p.calib_lt.size());
            const double n_all = n_geq + n_lt;
            p.children_w = (n_geq * p.geq_stats.w_hat + n_lt * p.lt_stats.w_hat) / n_all;
            p.children_s = (n_geq * p.geq_stats.s_hat + n_lt * p.lt_stats.s_hat) / n_all;

            const double objective =
                cfg.lambda * p.children_w + (1.0 - cfg.lambda) * p.children_s;
            if (objective < best_objective) {
                best_objective = objective;
                best = std::move(p);
            }
        }
    }
    return best;
}

}  // namespace detail

struct GroupPrediction {
    std::size_t leaf_id = 0;
    double estimate = 0.0;
    Interval interval;
};

struct TreeNode {
    std::size_t id = 0;
    std::size_t depth = 0;
    bool is_leaf = true;
    std::optional<SplitRule> split;           // internal nodes
    std::array<std::size_t, 2> children{0, 0};  // [lt, geq]
    std::vector<SplitRule> rule_path;         // conjunction from the root
    std::vector<std::size_t> train_idx, calib_idx;
    SubgroupStats stats;
    // Accepted-split audit record, for replaying the criterion post hoc.
    double split_parent_impurity = 0.0;
    double split_children_w = 0.0;
    double split_children_s = 0.0;
};

class PartitionTree {
public:
    TaskMode mode = TaskMode::regression;
    PartitionConfig config;
    std::size_t dim = 0;
    std::vector<TreeNode> nodes;
    OutcomePtr outcome;  // regression mode
    ItePtr ite;          // hte mode

    std::vector<std::size_t> leaf_ids() const {
        std::vector<std::size_t> ids;
        for (const auto& n : nodes)
            if (n.is_leaf) ids.push_back(n.id);
        return ids;
    }

    std::size_t n_leaves() const { return leaf_ids().size(); }

    std::size_t route(std::span<const double> x) const {
        std::size_t at = 0;
        while (!nodes[at].is_leaf)
            at = nodes[at].children[x[nodes[at].split->feature] >= nodes[at].split->threshold
                                        ? 1
                                        : 0];
        return at;
    }

    double estimate_at(std::span<const double> x) const {
        return mode == TaskMode::regression ? outcome->predict(x) : ite->predict_ite(x);
    }
};

inline GroupPrediction predict_group(const PartitionTree& tree, std::span<const double> x) {
    if (x.size() != tree.dim) throw std::invalid_argument("covariate dimension mismatch");
    GroupPrediction out;
    out.leaf_id = tree.route(x);
    out.estimate = tree.estimate_at(x);
    const double half = tree.nodes[out.leaf_id].stats.halfwidth_alpha();
    out.interval = std::isfinite(half) ? Interval{out.estimate - half, out.estimate + half}
                                       : Interval{-kInf, kInf};
    return out;
}

namespace detail {

inline PartitionTree grow_tree(const Matrix& covariates, const DataSplit& split,
                               const PredictionCache& cache, const PartitionConfig& cfg,
                               TaskMode mode) {
    PartitionTree tree;
    tree.mode = mode;
    tree.config = cfg;
    tree.dim = covariates.cols();

    TreeNode root;
    root.id = 0;
    root.train_idx = split.train_idx;
    root.calib_idx = split.calib_idx;
    // The root must certify the exact rank regardless of the inheritance
    // policy.
    root.stats = subgroup_stats(gather_calib(cache, root.calib_idx), cfg.alpha, cfg.beta_s,
                                mode);
    if (!std::isfinite(root.stats.w_hat))
        throw std::runtime_error("alpha too strict for calibration size");
    tree.nodes.push_back(std::move(root));

    std::deque<std::size_t> frontier{0};
    while (!frontier.empty()) {
        const std::size_t id = frontier.front();
        frontier.pop_front();
        if (cfg.max_depth && tree.nodes[id].depth >= *cfg.max_depth) continue;
        if (!tree.nodes[id].stats.finite()) continue;

        auto proposal = best_split(covariates, tree.nodes[id].train_idx,
                                   tree.nodes[id].calib_idx, cache, cfg, mode,
                                   &tree.nodes[id].stats);
        if (!proposal) continue;
        if (!confident_criterion(tree.nodes[id].stats, proposal->children_w,
                                 proposal->children_s, cfg))
            continue;

        const std::size_t lt_id = tree.nodes.size();
        const std::size_t geq_id = lt_id + 1;
        TreeNode lt, geq;
        lt.id = lt_id;
        geq.id = geq_id;
        lt.depth = geq.depth = tree.nodes[id].depth + 1;
        lt.rule_path = geq.rule_path = tree.nodes[id].rule_path;
        lt.rule_path.push_back({proposal->rule.feature, proposal->rule.threshold,
                                SplitRule::Side::lt});
        geq.rule_path.push_back({proposal->rule.feature, proposal->rule.threshold,
                                 SplitRule::Side::geq});
        lt.train_idx = std::move(proposal->train_lt);
        lt.calib_idx = std::move(proposal->calib_lt);
        lt.stats = proposal->lt_stats;
        geq.train_idx = std::move(proposal->train_geq);
        geq.calib_idx = std::move(proposal->calib_geq);
        geq.stats = proposal->geq_stats;

        auto& parent = tree.nodes[id];
        parent.is_leaf = false;
        parent.split = proposal->rule;
        parent.children = {lt_id, geq_id};
        parent.split_parent_impurity = parent.stats.impurity(cfg.lambda);
        parent.split_children_w = proposal->children_w;
        parent.split_children_s = proposal->children_s;

        tree.nodes.push_back(std::move(lt));
        tree.nodes.push_back(std::move(geq));
        frontier.push_back(lt_id);
        frontier.push_back(geq_id);
    }
    return tree;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string rule_path_string(const std::vector<SplitRule>& path) {
    std::string s;
    for (const auto& r : path) {
        if (!s.empty()) s += " & ";
        s += "x" + std::to_string(r.feature);
        s += r.side == SplitRule::Side::geq ? " >= " : " < ";
        s += format_double(r.threshold);
    }
    return s;
}

inline nlohmann::json tree_nodes_json(const auto& nodes) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& n : nodes) {
        nlohmann::json jn;
        jn["id"] = n.id;
        if (n.is_leaf) {
            jn["split"] = nullptr;
            jn["children"] = nullptr;
        } else {
            jn["split"] = {{"feature", n.split->feature}, {"threshold", n.split->threshold}};
            jn["children"] = {n.children[0], n.children[1]};
        }
        jn["leaf"] = nullptr;
        arr.push_back(std::move(jn));
    }
    return arr;
}

}  // namespace detail

// Tree serialization: stable field names, half-width +inf encoded as "inf".
inline nlohmann::json to_json(const PartitionTree& tree) {
    nlohmann::json doc;
    doc["method"] = "r2p";
    auto arr = detail::tree_nodes_json(tree.nodes);
    for (auto& jn : arr) {
        const auto& n = tree.nodes[jn["id"].get<std::size_t>()];
        if (!n.is_leaf) continue;
        const double half = n.stats.halfwidth_alpha();
        nlohmann::json leaf;
        leaf["n_train"] = n.train_idx.size();
        leaf["n_calib"] = n.calib_idx.size();
        leaf["center"] = n.stats.center;
        if (std::isfinite(half))
            leaf["halfwidth"] = half;
        else
            leaf["halfwidth"] = "inf";
        leaf["rule_path"] = detail::rule_path_string(n.rule_path);
        jn["leaf"] = std::move(leaf);
    }
    doc["nodes"] = std::move(arr);
    return doc;
}

// Recursive partitioning of a regression dataset. The outcome model is
// trained once on the root's training half and reused for every subgroup.
inline PartitionTree r2p_fit(const RegressionDataset& data, const EstimatorConfig& est_cfg,
                             const PartitionConfig& cfg) {
    cfg.validate();
    data.validate();
    const DataSplit split = split_dataset(data.n(), cfg.split_ratio, cfg.seed);

    const Matrix train_x = data.covariates.take_rows(split.train_idx);
    std::vector<double> train_y;
    train_y.reserve(split.train_idx.size());
    for (std::size_t i : split.train_idx) train_y.push_back(data.outcomes[i]);
    OutcomePtr model = fit_outcome(train_x, train_y, est_cfg);

    detail::PredictionCache cache;
    cache.pred.resize(data.n());
    cache.resid.assign(data.n(), 0.0);
    cache.arm.assign(data.n(), 0);
    for (std::size_t i = 0; i < data.n(); ++i)
        cache.pred[i] = model->predict(data.covariates.row(i));
    for (std::size_t i : split.calib_idx)
        cache.resid[i] = std::abs(data.outcomes[i] - cache.pred[i]);

    PartitionTree tree = detail::grow_tree(data.covariates, split, cache, cfg,
                                           TaskMode::regression);
    tree.outcome = std::move(model);
    return tree;
}

// Treatment-effect variant: the per-sample prediction is tau(x) from a global
// two-arm model, residuals are per observed arm, and interval half-widths are
// per-arm quantile sums at the square-root coverage levels.
inline PartitionTree r2p_hte_fit(const HteDataset& data, const EstimatorConfig& est_cfg,
                                 const PartitionConfig& cfg) {
    cfg.validate();
    data.validate();
    const DataSplit split = cfg.stratify_split
                                ? stratified_split_hte(data, cfg.split_ratio, cfg.seed)
                                : split_dataset(data.n(), cfg.split_ratio, cfg.seed);

    ItePtr model = fit_ite_t_learner(data, est_cfg, split.train_idx);

    detail::PredictionCache cache;
    cache.pred.resize(data.n());
    cache.resid.assign(data.n(), 0.0);
    cache.arm = data.treatments;
    for (std::size_t i = 0; i < data.n(); ++i) {
        const auto [mu0, mu1] = model->predict_arms(data.covariates.row(i));
        cache.pred[i] = mu1 - mu0;
        const double fitted = data.treatments[i] == 1 ? mu1 : mu0;
        cache.resid[i] = std::abs(data.outcomes[i] - fitted);
    }
    PartitionTree tree = detail::grow_tree(data.covariates, split, cache, cfg, TaskMode::hte);
    tree.ite = std::move(model);
    return tree;
}

}  // namespace r2p
