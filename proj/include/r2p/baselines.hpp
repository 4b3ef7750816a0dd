#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2p/conformal.hpp"
#include "r2p/data.hpp"
#include "r2p/partition.hpp"
#include "r2p/stats.hpp"

namespace r2p {

enum class BaselineInterval { gaussian_plugin, split_conformal };

// Leaf payload of a comparison causal tree: per-arm counts, the
// difference-of-means effect estimate, its plug-in variance, and (for the
// conformal variant) per-arm residual calibrations.
struct CausalLeaf {
    std::size_t n1 = 0;
    std::size_t n0 = 0;
    double mean1 = 0.0;
    double mean0 = 0.0;
    double tau_hat = 0.0;
    double var_hat = 0.0;
    ConformalCalibration q0, q1;
};

struct CausalNode {
    std::size_t id = 0;
    bool is_leaf = true;
    bool dead = false;  // pruned away; removed by compact()
    std::optional<SplitRule> split;
    std::array<std::size_t, 2> children{0, 0};  // [lt, geq]
    std::vector<SplitRule> rule_path;
    std::vector<std::size_t> rows;       // rows the structure was grown on
    std::vector<std::size_t> est_rows;   // rows the leaf payload came from
    CausalLeaf leaf;
};

struct CausalTree {
    std::string method;
    BaselineInterval source = BaselineInterval::gaussian_plugin;
    double alpha = 0.05;
    std::size_t dim = 0;
    std::vector<CausalNode> nodes;

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
};

namespace detail {

struct ArmSummary {
    std::size_t n1 = 0, n0 = 0;
    double mean1 = 0.0, mean0 = 0.0;
    double var1 = 0.0, var0 = 0.0;  // sample variances; 0 below two rows
};

inline ArmSummary summarize_arms(const HteDataset& data, std::span<const std::size_t> rows) {
    std::vector<double> y1, y0;
    for (std::size_t i : rows) (data.treatments[i] == 1 ? y1 : y0).push_back(data.outcomes[i]);
    ArmSummary s;
    s.n1 = y1.size();
    s.n0 = y0.size();
    if (!y1.empty()) s.mean1 = mean(y1);
    if (!y0.empty()) s.mean0 = mean(y0);
    s.var1 = variance_sample(y1);
    s.var0 = variance_sample(y0);
    return s;
}

inline CausalLeaf leaf_from_rows(const HteDataset& data, std::span<const std::size_t> rows) {
    const ArmSummary s = summarize_arms(data, rows);
    CausalLeaf leaf;
    leaf.n1 = s.n1;
    leaf.n0 = s.n0;
    leaf.mean1 = s.mean1;
    leaf.mean0 = s.mean0;
    leaf.tau_hat = s.mean1 - s.mean0;
    // Variance of the difference of arm means.
    leaf.var_hat = (s.n1 > 0 ? s.var1 / static_cast<double>(s.n1) : 0.0) +
                   (s.n0 > 0 ? s.var0 / static_cast<double>(s.n0) : 0.0);
    return leaf;
}

// Adaptive causal-tree growth: maximize sum over children of
// n_child * tau_child^2 (the sample-mean squared-effect objective), under
// minimum-size gates and both arms present in each child.
inline void grow_causal(CausalTree& tree, const HteDataset& data, std::size_t node_id,
                        std::size_t min_leaf, std::size_t cap,
                        const std::optional<std::size_t>& max_depth, std::size_t depth) {
    if (max_depth && depth >= *max_depth) return;
    auto rows_of = [&](std::size_t id) { return tree.nodes[id].rows; };
    const auto rows = rows_of(node_id);
    if (rows.size() < 2 * min_leaf) return;

    const ArmSummary parent = summarize_arms(data, rows);
    const double parent_tau = parent.mean1 - parent.mean0;
    const double parent_obj = static_cast<double>(rows.size()) * parent_tau * parent_tau;

    double best_gain = 0.0;
    std::optional<SplitRule> best_rule;
    std::vector<std::size_t> best_geq, best_lt;

    for (std::size_t feature = 0; feature < data.dim(); ++feature) {
        std::vector<double> values;
        values.reserve(rows.size());
        for (std::size_t i : rows) values.push_back(data.covariates(i, feature));
        for (double threshold : candidate_thresholds(std::move(values), cap)) {
            std::vector<std::size_t> geq, lt;
            for (std::size_t i : rows)
                (data.covariates(i, feature) >= threshold ? geq : lt).push_back(i);
            if (geq.size() < min_leaf || lt.size() < min_leaf) continue;
            const ArmSummary sg = summarize_arms(data, geq);
            const ArmSummary sl = summarize_arms(data, lt);
            if (sg.n1 == 0 || sg.n0 == 0 || sl.n1 == 0 || sl.n0 == 0) continue;
            const double tg = sg.mean1 - sg.mean0;
            const double tl = sl.mean1 - sl.mean0;
            const double obj = static_cast<double>(geq.size()) * tg * tg +
                               static_cast<double>(lt.size()) * tl * tl;
            const double gain = obj - parent_obj;
            if (gain > best_gain) {
                best_gain = gain;
                best_rule = SplitRule{feature, threshold, SplitRule::Side::geq};
                best_geq = std::move(geq);
                best_lt = std::move(lt);
            }
        }
    }
    if (!best_rule) return;

    const std::size_t lt_id = tree.nodes.size();
    const std::size_t geq_id = lt_id + 1;
    CausalNode lt, geq;
    lt.id = lt_id;
    geq.id = geq_id;
    lt.rule_path = geq.rule_path = tree.nodes[node_id].rule_path;
    lt.rule_path.push_back({best_rule->feature, best_rule->threshold, SplitRule::Side::lt});
    geq.rule_path.push_back({best_rule->feature, best_rule->threshold, SplitRule::Side::geq});
    lt.rows = std::move(best_lt);
    geq.rows = std::move(best_geq);

    auto& parent_node = tree.nodes[node_id];
    parent_node.is_leaf = false;
    parent_node.split = best_rule;
    parent_node.children = {lt_id, geq_id};
    tree.nodes.push_back(std::move(lt));
    tree.nodes.push_back(std::move(geq));
    grow_causal(tree, data, lt_id, min_leaf, cap, max_depth, depth + 1);
    grow_causal(tree, data, geq_id, min_leaf, cap, max_depth, depth + 1);
}

// Fills leaf payloads from est_rows; a leaf whose estimation sample lacks an
// arm reports false so the caller can collapse its parent.
inline void assign_estimation_rows(CausalTree& tree, const HteDataset& data,
                                   std::span<const std::size_t> est_rows) {
    auto& root = tree.nodes[0];
    root.est_rows.assign(est_rows.begin(), est_rows.end());
    for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
        auto& n = tree.nodes[id];
        if (n.is_leaf) continue;
        auto& lt = tree.nodes[n.children[0]];
        auto& geq = tree.nodes[n.children[1]];
        for (std::size_t i : n.est_rows)
            (data.covariates(i, n.split->feature) >= n.split->threshold ? geq : lt)
                .est_rows.push_back(i);
    }
}

inline void collapse_to_leaf(CausalTree& tree, std::size_t id) {
    auto& n = tree.nodes[id];
    if (n.is_leaf) return;
    // Mark the subtree dead; compact() drops dead nodes and renumbers.
    std::vector<std::size_t> stack{n.children[0], n.children[1]};
    while (!stack.empty()) {
        const std::size_t c = stack.back();
        stack.pop_back();
        auto& cn = tree.nodes[c];
        if (!cn.is_leaf && cn.split) {
            stack.push_back(cn.children[0]);
            stack.push_back(cn.children[1]);
        }
        cn.is_leaf = false;
        cn.split.reset();
        cn.dead = true;
    }
    n.is_leaf = true;
    n.split.reset();
}

// Rebuilds the node array without dead subtrees, ids renumbered in level
// order from the root.
inline void compact(CausalTree& tree) {
    std::vector<std::size_t> order{0};
    for (std::size_t at = 0; at < order.size(); ++at) {
        const auto& n = tree.nodes[order[at]];
        if (!n.is_leaf && n.split) {
            order.push_back(n.children[0]);
            order.push_back(n.children[1]);
        }
    }
    std::vector<std::size_t> remap(tree.nodes.size(), 0);
    for (std::size_t pos = 0; pos < order.size(); ++pos) remap[order[pos]] = pos;
    std::vector<CausalNode> live;
    live.reserve(order.size());
    for (std::size_t old_id : order) {
        CausalNode n = tree.nodes[old_id];
        n.id = remap[old_id];
        if (!n.is_leaf && n.split)
            n.children = {remap[n.children[0]], remap[n.children[1]]};
        live.push_back(std::move(n));
    }
    tree.nodes = std::move(live);
}

// Two-sample z-test on the children's effect difference; splits whose
// children do not separate at sig_level are removed bottom-up until no
// mergeable pair remains.
inline void significance_prune(CausalTree& tree, const HteDataset& data, double sig_level) {
    const double z_crit = normal_quantile(1.0 - sig_level / 2.0);
    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t id = tree.nodes.size(); id-- > 0;) {
            auto& n = tree.nodes[id];
            if (n.is_leaf || !n.split) continue;
            const auto& lt = tree.nodes[n.children[0]];
            const auto& geq = tree.nodes[n.children[1]];
            if (!lt.is_leaf || !geq.is_leaf) continue;
            const double gap = std::abs(lt.leaf.tau_hat - geq.leaf.tau_hat);
            const double se = std::sqrt(lt.leaf.var_hat + geq.leaf.var_hat);
            const double z = se > 0.0 ? gap / se : (gap > 0.0 ? kInf : 0.0);
            if (z < z_crit) {
                collapse_to_leaf(tree, id);
                tree.nodes[id].leaf = leaf_from_rows(data, tree.nodes[id].est_rows);
                changed = true;
            }
        }
    }
}

inline void fill_leaves(CausalTree& tree, const HteDataset& data) {
    for (auto& n : tree.nodes)
        if (n.is_leaf) n.leaf = leaf_from_rows(data, n.est_rows);
}

// Collapse any leaf whose estimation sample is missing an arm into its
// parent, repeating until all leaves carry both arms.
inline void collapse_armless_leaves(CausalTree& tree, const HteDataset& data) {
    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t id = tree.nodes.size(); id-- > 0;) {
            auto& n = tree.nodes[id];
            if (n.is_leaf || !n.split) continue;
            const auto& lt = tree.nodes[n.children[0]];
            const auto& geq = tree.nodes[n.children[1]];
            if (!lt.is_leaf || !geq.is_leaf) continue;
            const bool starved = lt.leaf.n1 == 0 || lt.leaf.n0 == 0 || geq.leaf.n1 == 0 ||
                                 geq.leaf.n0 == 0;
            if (starved) {
                collapse_to_leaf(tree, id);
                tree.nodes[id].leaf = leaf_from_rows(data, tree.nodes[id].est_rows);
                changed = true;
            }
        }
    }
}

inline CausalTree make_structure(const HteDataset& data, std::span<const std::size_t> rows,
                                 std::size_t min_leaf, std::size_t cap,
                                 const std::optional<std::size_t>& max_depth) {
    CausalTree tree;
    tree.dim = data.dim();
    CausalNode root;
    root.id = 0;
    root.rows.assign(rows.begin(), rows.end());
    tree.nodes.push_back(std::move(root));
    grow_causal(tree, data, 0, min_leaf, cap, max_depth, 0);
    return tree;
}

inline std::vector<std::size_t> all_rows(std::size_t n) {
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    return rows;
}

constexpr std::size_t kBaselineThresholdCap = 64;

}  // namespace detail

// Adaptive causal tree: structure, effects, and pruning all on the full
// sample.
inline CausalTree fit_ct_a(const HteDataset& data, std::size_t min_leaf = 20,
                           double sig_level = 0.05, double alpha = 0.05,
                           std::optional<std::size_t> max_depth = std::nullopt) {
    data.validate();
    CausalTree tree = detail::make_structure(data, detail::all_rows(data.n()), min_leaf,
                                             detail::kBaselineThresholdCap, max_depth);
    tree.method = "ct-a";
    tree.source = BaselineInterval::gaussian_plugin;
    tree.alpha = alpha;
    detail::assign_estimation_rows(tree, data, detail::all_rows(data.n()));
    detail::fill_leaves(tree, data);
    detail::significance_prune(tree, data, sig_level);
    detail::compact(tree);
    return tree;
}

// Honest variant built from an explicit split: structure on train_idx, leaf
// effects and pruning statistics on calib_idx.
inline CausalTree fit_ct_h_split(const HteDataset& data, const DataSplit& split,
                                 std::size_t min_leaf = 10, double sig_level = 0.05,
                                 double alpha = 0.05,
                                 std::optional<std::size_t> max_depth = std::nullopt) {
    data.validate();
    CausalTree tree = detail::make_structure(data, split.train_idx, min_leaf,
                                             detail::kBaselineThresholdCap, max_depth);
    tree.method = "ct-h";
    tree.source = BaselineInterval::gaussian_plugin;
    tree.alpha = alpha;
    detail::assign_estimation_rows(tree, data, split.calib_idx);
    detail::fill_leaves(tree, data);
    detail::collapse_armless_leaves(tree, data);
    detail::significance_prune(tree, data, sig_level);
    detail::compact(tree);
    return tree;
}

inline CausalTree fit_ct_h(const HteDataset& data, std::size_t min_leaf = 10,
                           double sig_level = 0.05, std::uint64_t seed = 0,
                           double alpha = 0.05,
                           std::optional<std::size_t> max_depth = std::nullopt) {
    return fit_ct_h_split(data, stratified_split_hte(data, 0.5, seed), min_leaf, sig_level,
                          alpha, max_depth);
}

// Conformal causal tree: adaptive structure and effects on the training half,
// per-arm split-conformal calibration on the held-out half at the
// square-root per-arm level.
inline CausalTree fit_cct_split(const HteDataset& data, const DataSplit& split,
                                std::size_t min_leaf = 10, double sig_level = 0.05,
                                double alpha = 0.05, std::optional<std::size_t> max_depth =
                                                         std::nullopt) {
    data.validate();
    CausalTree tree = detail::make_structure(data, split.train_idx, min_leaf,
                                             detail::kBaselineThresholdCap, max_depth);
    tree.method = "cct";
    tree.source = BaselineInterval::split_conformal;
    tree.alpha = alpha;
    detail::assign_estimation_rows(tree, data, split.train_idx);
    detail::fill_leaves(tree, data);
    detail::significance_prune(tree, data, sig_level);
    detail::compact(tree);

    // Route calibration rows to surviving leaves and calibrate each arm
    // against the leaf's arm-mean model.
    const double cov = coverage_level_per_arm(alpha);
    std::vector<std::vector<double>> res0(tree.nodes.size()), res1(tree.nodes.size());
    for (std::size_t i : split.calib_idx) {
        const std::size_t leaf = tree.route(data.covariates.row(i));
        const auto& payload = tree.nodes[leaf].leaf;
        const double fitted = data.treatments[i] == 1 ? payload.mean1 : payload.mean0;
        const double r = std::abs(data.outcomes[i] - fitted);
        (data.treatments[i] == 1 ? res1 : res0)[leaf].push_back(r);
    }
    for (auto& n : tree.nodes) {
        if (!n.is_leaf) continue;
        n.leaf.q0 = calibrate(res0[n.id], cov);
        n.leaf.q1 = calibrate(res1[n.id], cov);
    }
    return tree;
}

inline CausalTree fit_cct(const HteDataset& data, std::size_t min_leaf = 10,
                          double sig_level = 0.05, double alpha = 0.05,
                          std::uint64_t seed = 0,
                          std::optional<std::size_t> max_depth = std::nullopt) {
    return fit_cct_split(data, stratified_split_hte(data, 0.5, seed), min_leaf, sig_level,
                         alpha, max_depth);
}

inline GroupPrediction predict_baseline(const CausalTree& tree, std::span<const double> x) {
    if (x.size() != tree.dim) throw std::invalid_argument("covariate dimension mismatch");
    GroupPrediction out;
    out.leaf_id = tree.route(x);
    const auto& leaf = tree.nodes[out.leaf_id].leaf;
    out.estimate = leaf.tau_hat;
    if (tree.source == BaselineInterval::gaussian_plugin) {
        const double half = normal_quantile(1.0 - tree.alpha / 2.0) * std::sqrt(leaf.var_hat);
        out.interval = {out.estimate - half, out.estimate + half};
    } else {
        out.interval = ite_interval(leaf.tau_hat, 0.0,
                                    ArmCalibrations{leaf.q0, leaf.q1});
    }
    return out;
}

inline nlohmann::json to_json(const CausalTree& tree) {
    nlohmann::json doc;
    doc["method"] = tree.method;
    auto arr = detail::tree_nodes_json(tree.nodes);
    for (auto& jn : arr) {
        const auto& n = tree.nodes[jn["id"].get<std::size_t>()];
        if (!n.is_leaf) continue;
        double half;
        if (tree.source == BaselineInterval::gaussian_plugin)
            half = normal_quantile(1.0 - tree.alpha / 2.0) * std::sqrt(n.leaf.var_hat);
        else
            half = n.leaf.q0.quantile + n.leaf.q1.quantile;
        nlohmann::json leaf;
        leaf["n_train"] = n.rows.size();
        leaf["n_calib"] = n.est_rows.size();
        leaf["center"] = n.leaf.tau_hat;
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

}  // namespace r2p
