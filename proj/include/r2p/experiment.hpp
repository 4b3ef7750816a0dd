#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "r2p/baselines.hpp"
#include "r2p/data.hpp"
#include "r2p/datasets.hpp"
#include "r2p/estimators.hpp"
#include "r2p/metrics.hpp"
#include "r2p/partition.hpp"

namespace r2p {

enum class Method { r2p, ct_a, ct_h, cct };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::r2p: return "r2p";
        case Method::ct_a: return "ct-a";
        case Method::ct_h: return "ct-h";
        case Method::cct: return "cct";
    }
    throw std::logic_error("unhandled method");
}

inline Method method_from_name(const std::string& name) {
    if (name == "r2p") return Method::r2p;
    if (name == "ct-a") return Method::ct_a;
    if (name == "ct-h") return Method::ct_h;
    if (name == "cct") return Method::cct;
    throw std::invalid_argument("unknown method: " + name);
}

enum class DatasetKind { synthetic_a, synthetic_b, csv };
enum class ReportFormat { csv, json, both };

struct ExperimentConfig {
    DatasetKind dataset = DatasetKind::synthetic_a;
    std::string csv_path;
    CsvSchema csv_schema;
    std::vector<Method> methods = {Method::r2p};
    std::size_t runs = 50;
    std::uint64_t base_seed = 1;
    double alpha = 0.05;
    double lambda = 0.5;
    double gamma = 0.05;
    double beta_s = 0.8;
    EstimatorConfig estimator;
    std::size_t n_train = 300;
    std::size_t n_test = 1000;
    bool n_counts_set = false;  // whether n_train/n_test were given explicitly
    std::optional<std::size_t> max_depth;
    std::size_t min_leaf = 10;
    bool stratify = true;
    bool noise_as_sd = false;
    bool exact_quantiles = false;  // disable small-calibration inheritance
    std::size_t threads = 1;
    std::string out_dir = "out";
    ReportFormat format = ReportFormat::both;
    bool dump_trees = false;

    void validate() const {
        if (runs < 1) throw std::invalid_argument("runs must be >= 1");
        if (methods.empty()) throw std::invalid_argument("no methods selected");
        if (dataset == DatasetKind::csv && csv_path.empty())
            throw std::invalid_argument("csv dataset needs --csv-path");
        partition_config(0).validate();
    }

    PartitionConfig partition_config(std::uint64_t seed) const {
        PartitionConfig p;
        p.alpha = alpha;
        p.lambda = lambda;
        p.gamma = gamma;
        p.beta_s = beta_s;
        p.min_leaf = min_leaf;
        p.max_depth = max_depth;
        p.stratify_split = stratify;
        p.inherit_small_calibrations = !exact_quantiles;
        p.seed = seed;
        return p;
    }
};

struct RunRecord {
    std::size_t run = 0;
    Method method = Method::r2p;
    RunMetrics metrics;
    nlohmann::json tree;
};

struct MetricAggregate {
    double mean = 0.0;
    double stderr_ = 0.0;
    std::size_t n_finite = 0;
};

struct ExperimentReport {
    ExperimentConfig config;
    std::vector<RunRecord> per_run;

    // metric name -> aggregate, per method name
    std::map<std::string, std::map<std::string, MetricAggregate>> aggregate() const;
};

namespace detail {

struct MetricColumn {
    const char* name;
    double RunMetrics::* field;
};

inline constexpr MetricColumn kCsvMetricColumns[] = {
    {"v_across", &RunMetrics::v_across},
    {"v_in", &RunMetrics::v_in},
    {"v_in_normalized", &RunMetrics::v_in_normalized},
    {"ci_width", &RunMetrics::ci_width},
    {"coverage", &RunMetrics::coverage},
    {"overlap", &RunMetrics::overlap},
    {"pehe_root", &RunMetrics::pehe_root},
};

inline constexpr MetricColumn kJsonOnlyMetricColumns[] = {
    {"v_pop", &RunMetrics::v_pop},
    {"ci_width_leaf_mean", &RunMetrics::ci_width_leaf_mean},
};

// Per-test-row predictions of one fitted method plus its leaf count.
struct MethodEval {
    std::vector<GroupPrediction> preds;
    std::size_t n_leaves = 0;
    nlohmann::json tree;
};

inline RunMetrics evaluate_method(const MethodEval& eval, const HteDataset& test) {
    RunMetrics m;
    m.n_subgroups = eval.n_leaves;

    std::vector<Interval> intervals;
    intervals.reserve(eval.preds.size());
    for (const auto& p : eval.preds) intervals.push_back(p.interval);
    m.ci_width = mean_ci_width(intervals);

    std::map<std::size_t, double> leaf_width;
    for (const auto& p : eval.preds) leaf_width.emplace(p.leaf_id, p.interval.width());
    double leaf_sum = 0.0;
    for (const auto& [id, w] : leaf_width) leaf_sum += w;
    m.ci_width_leaf_mean = leaf_width.empty()
                               ? kInf
                               : leaf_sum / static_cast<double>(leaf_width.size());

    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (!test.truth) {
        m.v_across = m.v_in = m.v_pop = m.v_in_normalized = nan;
        m.coverage = m.overlap = m.pehe_root = nan;
        return m;
    }

    const auto& tau = test.truth->tau;
    std::map<std::size_t, std::vector<double>> by_leaf;
    for (std::size_t i = 0; i < eval.preds.size(); ++i)
        by_leaf[eval.preds[i].leaf_id].push_back(tau[i]);
    std::vector<std::vector<double>> groups;
    groups.reserve(by_leaf.size());
    for (auto& [id, g] : by_leaf) groups.push_back(std::move(g));

    m.v_across = v_across(groups);
    m.v_in = v_in(groups);
    m.v_pop = variance_population(tau);
    m.v_in_normalized = m.v_pop > 0.0 ? m.v_in / m.v_pop : 0.0;
    m.coverage = coverage_rate(intervals, tau);
    m.overlap = overlap(groups);

    std::vector<double> tau_hat;
    tau_hat.reserve(eval.preds.size());
    for (const auto& p : eval.preds) tau_hat.push_back(p.estimate);
    m.pehe_root = pehe(tau_hat, tau);
    return m;
}

struct RunData {
    HteDataset train;
    HteDataset test;
};

inline RunData make_run_data(const ExperimentConfig& cfg, const HteDataset* csv_data,
                             std::uint64_t seed) {
    RunData rd;
    if (cfg.dataset == DatasetKind::csv) {
        const std::size_t n = csv_data->n();
        std::size_t n_test = n / 5;
        std::size_t n_train = n - n_test;
        if (cfg.n_counts_set && cfg.n_train + cfg.n_test <= n) {
            n_train = cfg.n_train;
            n_test = cfg.n_test;
        }
        Rng rng(seed);
        const auto perm = rng.permutation(n);
        std::vector<std::size_t> train_rows(perm.begin(),
                                            perm.begin() + static_cast<std::ptrdiff_t>(n_train));
        std::vector<std::size_t> test_rows(perm.end() - static_cast<std::ptrdiff_t>(n_test),
                                           perm.end());
        std::sort(train_rows.begin(), train_rows.end());
        std::sort(test_rows.begin(), test_rows.end());
        rd.train = subset(*csv_data, train_rows);
        rd.test = subset(*csv_data, test_rows);
        return rd;
    }
    SyntheticSpec spec;
    spec.kind = cfg.dataset == DatasetKind::synthetic_a ? SyntheticSpec::Kind::A
                                                        : SyntheticSpec::Kind::B;
    spec.n_train = cfg.n_train;
    spec.n_test = cfg.n_test;
    spec.seed = seed;
    const HteDataset all = gen_synthetic(spec, cfg.noise_as_sd);
    rd.train = head(all, cfg.n_train);
    rd.test = tail(all, cfg.n_test);
    return rd;
}

inline MethodEval run_method(Method method, const ExperimentConfig& cfg,
                             const RunData& rd, const DataSplit& split,
                             std::uint64_t seed) {
    MethodEval eval;
    eval.preds.reserve(rd.test.n());
    switch (method) {
        case Method::r2p: {
            const PartitionTree tree = r2p_hte_fit(rd.train, cfg.estimator,
                                                   cfg.partition_config(seed));
            for (std::size_t i = 0; i < rd.test.n(); ++i)
                eval.preds.push_back(predict_group(tree, rd.test.covariates.row(i)));
            eval.n_leaves = tree.n_leaves();
            eval.tree = to_json(tree);
            break;
        }
        case Method::ct_a: {
            const CausalTree tree = fit_ct_a(rd.train, 20, 0.05, cfg.alpha, cfg.max_depth);
            for (std::size_t i = 0; i < rd.test.n(); ++i)
                eval.preds.push_back(predict_baseline(tree, rd.test.covariates.row(i)));
            eval.n_leaves = tree.n_leaves();
            eval.tree = to_json(tree);
            break;
        }
        case Method::ct_h: {
            const CausalTree tree =
                fit_ct_h_split(rd.train, split, cfg.min_leaf, 0.05, cfg.alpha, cfg.max_depth);
            for (std::size_t i = 0; i < rd.test.n(); ++i)
                eval.preds.push_back(predict_baseline(tree, rd.test.covariates.row(i)));
            eval.n_leaves = tree.n_leaves();
            eval.tree = to_json(tree);
            break;
        }
        case Method::cct: {
            const CausalTree tree =
                fit_cct_split(rd.train, split, cfg.min_leaf, 0.05, cfg.alpha, cfg.max_depth);
            for (std::size_t i = 0; i < rd.test.n(); ++i)
                eval.preds.push_back(predict_baseline(tree, rd.test.covariates.row(i)));
            eval.n_leaves = tree.n_leaves();
            eval.tree = to_json(tree);
            break;
        }
    }
    return eval;
}

inline std::string format_csv_double(double v) {
    if (!std::isfinite(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// One experiment: `runs` seeded repetitions, every selected method fitted on
// the identical per-run dataset and train/calibration split.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    ExperimentReport report;
    report.config = cfg;
    report.per_run.resize(cfg.runs * cfg.methods.size());

    std::optional<HteDataset> csv_data;
    if (cfg.dataset == DatasetKind::csv)
        csv_data = load_semisynthetic_csv(cfg.csv_path, cfg.csv_schema);

    std::vector<std::string> errors(cfg.runs);
    auto do_run = [&](std::size_t run) {
        try {
            const std::uint64_t seed = cfg.base_seed + run;
            const detail::RunData rd =
                detail::make_run_data(cfg, csv_data ? &*csv_data : nullptr, seed);
            const DataSplit split = cfg.stratify
                                        ? stratified_split_hte(rd.train, 0.5, seed)
                                        : split_dataset(rd.train.n(), 0.5, seed);
            for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
                const Method method = cfg.methods[mi];
                const auto eval = detail::run_method(method, cfg, rd, split, seed);
                RunRecord rec;
                rec.run = run;
                rec.method = method;
                rec.metrics = detail::evaluate_method(eval, rd.test);
                rec.tree = eval.tree;
                report.per_run[run * cfg.methods.size() + mi] = std::move(rec);
            }
        } catch (const std::exception& e) {
            errors[run] = e.what();
        }
    };

    const std::size_t workers =
        std::max<std::size_t>(1, std::min(cfg.threads == 0
                                              ? static_cast<std::size_t>(
                                                    std::thread::hardware_concurrency())
                                              : cfg.threads,
                                          cfg.runs));
    if (workers == 1) {
        for (std::size_t run = 0; run < cfg.runs; ++run) do_run(run);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t run = next.fetch_add(1); run < cfg.runs;
                     run = next.fetch_add(1))
                    do_run(run);
            });
        for (auto& t : pool) t.join();
    }
    for (std::size_t run = 0; run < cfg.runs; ++run)
        if (!errors[run].empty())
            throw std::runtime_error("run " + std::to_string(run) + " failed: " + errors[run]);
    return report;
}

inline std::map<std::string, std::map<std::string, MetricAggregate>>
ExperimentReport::aggregate() const {
    std::map<std::string, std::map<std::string, MetricAggregate>> out;
    for (const Method method : config.methods) {
        auto& per_metric = out[method_name(method)];
        auto add_metric = [&](const std::string& name, auto getter) {
            std::vector<double> finite;
            for (const auto& rec : per_run)
                if (rec.method == method) {
                    const double v = getter(rec.metrics);
                    if (std::isfinite(v)) finite.push_back(v);
                }
            MetricAggregate agg;
            agg.n_finite = finite.size();
            if (!finite.empty()) {
                agg.mean = mean(finite);
                agg.stderr_ = finite.size() > 1
                                  ? std::sqrt(variance_sample(finite) /
                                              static_cast<double>(finite.size()))
                                  : 0.0;
            }
            per_metric[name] = agg;
        };
        for (const auto& col : detail::kCsvMetricColumns)
            add_metric(col.name, [&col](const RunMetrics& m) { return m.*(col.field); });
        for (const auto& col : detail::kJsonOnlyMetricColumns)
            add_metric(col.name, [&col](const RunMetrics& m) { return m.*(col.field); });
        add_metric("n_subgroups", [](const RunMetrics& m) {
            return static_cast<double>(m.n_subgroups);
        });
    }
    return out;
}

// Writes runs.csv, summary.json, and optional per-run tree dumps. Non-finite
// values serialize as empty CSV cells; aggregates cover finite values only.
inline void emit_reports(const ExperimentReport& report, const std::string& out_dir,
                         ReportFormat format, bool dump_trees) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    if (format == ReportFormat::csv || format == ReportFormat::both) {
        std::ofstream csv(fs::path(out_dir) / "runs.csv");
        csv << "run,method,v_across,v_in,v_in_normalized,n_subgroups,ci_width,coverage,"
               "overlap,pehe_root\n";
        for (const auto& rec : report.per_run) {
            const auto& m = rec.metrics;
            csv << rec.run << ',' << method_name(rec.method) << ','
                << detail::format_csv_double(m.v_across) << ','
                << detail::format_csv_double(m.v_in) << ','
                << detail::format_csv_double(m.v_in_normalized) << ',' << m.n_subgroups << ','
                << detail::format_csv_double(m.ci_width) << ','
                << detail::format_csv_double(m.coverage) << ','
                << detail::format_csv_double(m.overlap) << ','
                << detail::format_csv_double(m.pehe_root) << '\n';
        }
    }

    if (format == ReportFormat::json || format == ReportFormat::both) {
        nlohmann::json doc;
        doc["runs"] = report.config.runs;
        nlohmann::json methods = nlohmann::json::object();
        for (const auto& [name, per_metric] : report.aggregate()) {
            nlohmann::json jm = nlohmann::json::object();
            for (const auto& [metric, agg] : per_metric) {
                nlohmann::json ja;
                if (agg.n_finite > 0) {
                    ja["mean"] = agg.mean;
                    ja["stderr"] = agg.stderr_;
                } else {
                    ja["mean"] = nullptr;
                    ja["stderr"] = nullptr;
                }
                ja["n_finite"] = agg.n_finite;
                jm[metric] = std::move(ja);
            }
            methods[name] = std::move(jm);
        }
        doc["methods"] = std::move(methods);
        std::ofstream json_out(fs::path(out_dir) / "summary.json");
        json_out << doc.dump(2) << '\n';
    }

    if (dump_trees) {
        for (const auto& rec : report.per_run) {
            const auto path = fs::path(out_dir) / ("tree_" + method_name(rec.method) + "_" +
                                                   std::to_string(rec.run) + ".json");
            std::ofstream tree_out(path);
            tree_out << rec.tree.dump(2) << '\n';
        }
    }
}

}  // namespace r2p
