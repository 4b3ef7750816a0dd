#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2p/experiment.hpp"

using namespace r2p;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.dataset = DatasetKind::synthetic_a;
    cfg.methods = {Method::r2p, Method::ct_a};
    cfg.runs = 3;
    cfg.base_seed = 42;
    cfg.alpha = 0.1;
    cfg.noise_as_sd = true;
    cfg.n_train = 200;
    cfg.n_test = 300;
    cfg.n_counts_set = true;
    cfg.estimator.kind = EstimatorConfig::Kind::knn;
    cfg.estimator.knn_k = 10;
    cfg.out_dir = out_dir;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("experiment produces paired rows and reports") {
    const std::string out = "exp_out_basic";
    fs::remove_all(out);
    const auto cfg = small_config(out);
    const auto report = run_experiment(cfg);
    REQUIRE(report.per_run.size() == 6);  // runs x methods
    for (std::size_t run = 0; run < 3; ++run) {
        CHECK(report.per_run[2 * run].run == run);
        CHECK(report.per_run[2 * run].method == Method::r2p);
        CHECK(report.per_run[2 * run + 1].method == Method::ct_a);
    }
    emit_reports(report, out, ReportFormat::both, true);
    CHECK(fs::exists(fs::path(out) / "runs.csv"));
    CHECK(fs::exists(fs::path(out) / "summary.json"));
    CHECK(fs::exists(fs::path(out) / "tree_r2p_0.json"));
    CHECK(fs::exists(fs::path(out) / "tree_ct-a_2.json"));

    // csv row count = runs x methods (+ header)
    std::ifstream csv(fs::path(out) / "runs.csv");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(csv, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 7);
    fs::remove_all(out);
}

TEST_CASE("per-method metrics are identical when run alone or together") {
    auto cfg = small_config("exp_out_paired_a");
    const auto combined = run_experiment(cfg);
    cfg.methods = {Method::r2p};
    const auto solo = run_experiment(cfg);
    for (std::size_t run = 0; run < cfg.runs; ++run) {
        const auto& a = combined.per_run[2 * run].metrics;
        const auto& b = solo.per_run[run].metrics;
        CHECK(a.v_across == b.v_across);
        CHECK(a.ci_width == b.ci_width);
        CHECK(a.n_subgroups == b.n_subgroups);
        CHECK(a.pehe_root == b.pehe_root);
    }
}

TEST_CASE("identical configs emit byte-identical reports") {
    const std::string out1 = "exp_out_det1", out2 = "exp_out_det2";
    fs::remove_all(out1);
    fs::remove_all(out2);
    auto cfg = small_config(out1);
    cfg.dump_trees = true;
    const auto r1 = run_experiment(cfg);
    emit_reports(r1, out1, ReportFormat::both, true);
    const auto r2 = run_experiment(cfg);
    emit_reports(r2, out2, ReportFormat::both, true);
    CHECK(slurp(fs::path(out1) / "runs.csv") == slurp(fs::path(out2) / "runs.csv"));
    CHECK(slurp(fs::path(out1) / "summary.json") == slurp(fs::path(out2) / "summary.json"));
    CHECK(slurp(fs::path(out1) / "tree_r2p_1.json") ==
          slurp(fs::path(out2) / "tree_r2p_1.json"));
    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("parallel execution matches sequential output") {
    auto cfg = small_config("unused");
    cfg.runs = 4;
    cfg.threads = 1;
    const auto seq = run_experiment(cfg);
    cfg.threads = 4;
    const auto par = run_experiment(cfg);
    REQUIRE(seq.per_run.size() == par.per_run.size());
    for (std::size_t i = 0; i < seq.per_run.size(); ++i) {
        CHECK(seq.per_run[i].metrics.ci_width == par.per_run[i].metrics.ci_width);
        CHECK(seq.per_run[i].metrics.n_subgroups == par.per_run[i].metrics.n_subgroups);
        CHECK(seq.per_run[i].tree == par.per_run[i].tree);
    }
}

TEST_CASE("summary aggregates reproduce csv column means") {
    const std::string out = "exp_out_roundtrip";
    fs::remove_all(out);
    const auto cfg = small_config(out);
    const auto report = run_experiment(cfg);
    emit_reports(report, out, ReportFormat::both, false);

    // reparse runs.csv and recompute the ci_width mean per method
    std::ifstream csv(fs::path(out) / "runs.csv");
    std::string line;
    std::getline(csv, line);  // header
    std::map<std::string, std::vector<double>> widths;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        REQUIRE(cells.size() == 10);
        if (!cells[6].empty()) widths[cells[1]].push_back(std::stod(cells[6]));
    }
    const auto doc = nlohmann::json::parse(slurp(fs::path(out) / "summary.json"));
    for (const auto& [method, vals] : widths) {
        const double csv_mean = mean(vals);
        const double json_mean = doc["methods"][method]["ci_width"]["mean"].get<double>();
        CHECK(csv_mean == doctest::Approx(json_mean).epsilon(1e-12));
        CHECK(doc["methods"][method]["ci_width"]["n_finite"].get<std::size_t>() ==
              vals.size());
    }
    fs::remove_all(out);
}

TEST_CASE("csv dataset flows through the runner") {
    const std::string out = "exp_out_csv";
    fs::remove_all(out);
    ExperimentConfig cfg;
    cfg.dataset = DatasetKind::csv;
    cfg.csv_path = std::string(R2P_TEST_DATA_DIR) + "/ihdp_sample.csv";
    cfg.csv_schema.tau = "tau";
    cfg.methods = {Method::ct_a};
    cfg.runs = 2;
    cfg.alpha = 0.1;
    cfg.out_dir = out;
    const auto report = run_experiment(cfg);
    REQUIRE(report.per_run.size() == 2);
    CHECK(report.per_run[0].metrics.n_subgroups >= 1);
    CHECK(std::isfinite(report.per_run[0].metrics.pehe_root));
    emit_reports(report, out, ReportFormat::csv, false);
    CHECK(fs::exists(fs::path(out) / "runs.csv"));
    fs::remove_all(out);
}

TEST_CASE("a failing run aborts with its index and cause") {
    ExperimentConfig cfg;
    cfg.dataset = DatasetKind::synthetic_a;
    cfg.methods = {Method::r2p};
    cfg.runs = 2;
    cfg.alpha = 0.001;  // rank unattainable from 100 calibration rows
    cfg.n_train = 200;
    cfg.n_test = 50;
    cfg.n_counts_set = true;
    try {
        run_experiment(cfg);
        FAIL("expected a runtime error");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("run 0") != std::string::npos);
        CHECK(msg.find("alpha too strict") != std::string::npos);
    }
}

TEST_CASE("missing output directory is created") {
    const std::string out = "exp_out_nested/deeper/dir";
    fs::remove_all("exp_out_nested");
    auto cfg = small_config(out);
    cfg.runs = 1;
    const auto report = run_experiment(cfg);
    emit_reports(report, out, ReportFormat::csv, false);
    CHECK(fs::exists(fs::path(out) / "runs.csv"));
    fs::remove_all("exp_out_nested");
}
