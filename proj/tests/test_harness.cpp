#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "driftweight/checkpoint.hpp"
#include "driftweight/driftweight.hpp"
#include "test_utils.hpp"

using namespace driftweight;

namespace {

TemporalDataset constant_dataset(std::size_t n, Task task, std::uint64_t seed) {
    dwtest::Rng rng(seed);
    TemporalDataset ds;
    ds.task = task;
    ds.features = Matrix(n, 2);
    ds.labels.resize(n);
    ds.timestamps.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.features.at(i, 0) = rng.normal();
        ds.features.at(i, 1) = rng.normal();
        ds.labels[i] = task == Task::classification ? static_cast<double>(i % 2) : rng.normal();
        ds.timestamps[i] = static_cast<double>(i);
    }
    return ds;
}

}  // namespace

TEST_CASE("evaluate_metric") {
    SECTION("a perfect classifier scores accuracy 1") {
        TemporalDataset ds = constant_dataset(10, Task::classification, 1);
        // predict from the label itself through an identity passthrough:
        // class = x0 > 0, relabel to match
        ModelParams p = mlp_init({2, 2}, 0);
        std::fill(p.values.begin(), p.values.end(), 0.0);
        p.values[0] = -1.0;  // logit_0 = -x0
        p.values[2] = 1.0;   // logit_1 = +x0
        for (std::size_t i = 0; i < ds.size(); ++i) {
            ds.labels[i] = ds.features.at(i, 0) > 0.0 ? 1.0 : 0.0;
        }
        REQUIRE(evaluate_metric(p, ds) == 1.0);
    }
    SECTION("a constant classifier on balanced data scores one half") {
        TemporalDataset ds = constant_dataset(100, Task::classification, 2);
        ModelParams p = mlp_init({2, 2}, 0);
        std::fill(p.values.begin(), p.values.end(), 0.0);
        const auto off = layer_offset(p.layer_sizes, 0) + 4;  // bias block
        p.values[off + 1] = 5.0;  // always predict class 1
        REQUIRE(evaluate_metric(p, ds) == 0.5);
    }
    SECTION("a perfect regressor scores rmse 0") {
        TemporalDataset ds = constant_dataset(10, Task::regression, 3);
        ModelParams p = mlp_init({2, 1}, 0);
        p.values = {1.0, 0.0, 0.0};
        for (std::size_t i = 0; i < ds.size(); ++i) ds.labels[i] = ds.features.at(i, 0);
        REQUIRE(evaluate_metric(p, ds) == 0.0);
    }
    SECTION("predicting the mean scores the population standard deviation") {
        TemporalDataset ds = constant_dataset(500, Task::regression, 4);
        double mean = 0.0;
        for (const double y : ds.labels) mean += y;
        mean /= static_cast<double>(ds.size());
        double var = 0.0;
        for (const double y : ds.labels) var += (y - mean) * (y - mean);
        var /= static_cast<double>(ds.size());
        ModelParams p = mlp_init({2, 1}, 0);
        p.values = {0.0, 0.0, mean};
        REQUIRE_THAT(evaluate_metric(p, ds),
                     Catch::Matchers::WithinRel(std::sqrt(var), 1e-12));
    }
}

TEST_CASE("decay_curve") {
    SECTION("single window equals the whole-set metric") {
        TemporalDataset ds = constant_dataset(50, Task::classification, 5);
        const ModelParams p = mlp_init({2, 2}, 9);
        const auto curve = decay_curve(p, ds, 1);
        REQUIRE(curve.windows.size() == 1);
        REQUIRE(curve.windows[0].metric == evaluate_metric(p, ds));
        REQUIRE(curve.windows[0].n == 50);
    }
    SECTION("i.i.d. data gives a flat curve within sampling noise") {
        SyntheticParams params;
        params.n = 8000;
        params.omega_fast = 0.0;
        params.sigma = 0.2;
        const auto ds = generate_synthetic(SyntheticKind::rotating_boundary, params, 6);
        // the true boundary classifier
        ModelParams p = mlp_init({2, 2}, 0);
        std::fill(p.values.begin(), p.values.end(), 0.0);
        p.values[0] = -1.0;
        p.values[2] = 1.0;
        const auto curve = decay_curve(p, ds, 8);
        const double overall = evaluate_metric(p, ds);
        for (const auto& w : curve.windows) {
            const double se = std::sqrt(overall * (1.0 - overall) / static_cast<double>(w.n));
            REQUIRE(std::fabs(w.metric - overall) <= 2.5 * se);
        }
    }
    SECTION("window metrics aggregate exactly to the whole-set accuracy") {
        TemporalDataset ds = constant_dataset(1003, Task::classification, 7);
        dwtest::Rng rng(3);
        ModelParams p = mlp_init({2, 2}, 4);
        for (double& v : p.values) v += rng.normal();
        const auto curve = decay_curve(p, ds, 7);
        double weighted = 0.0;
        std::size_t total = 0;
        for (const auto& w : curve.windows) {
            weighted += w.metric * static_cast<double>(w.n);
            total += w.n;
        }
        REQUIRE(total == ds.size());
        REQUIRE_THAT(weighted / static_cast<double>(total),
                     Catch::Matchers::WithinRel(evaluate_metric(p, ds), 1e-12));
    }
    SECTION("an ERM model on rotating data decays over the test period") {
        SyntheticParams params;
        params.n = 6000;
        params.omega_fast = 0.8;
        params.time_span = 6.0;
        params.sigma = 0.2;
        const auto ds = generate_synthetic(SyntheticKind::rotating_boundary, params, 8);
        const auto split = temporal_split(ds, 0.5, 0.1);
        const AgeNormalizer norm = make_normalizer(split.train.t_begin(), split.train.t_end());
        BilevelConfig cfg;
        cfg.epochs = 15;
        cfg.beta = 0.1;
        cfg.seed = 2;
        cfg.early_stop_patience = 99;
        const ModelParams theta0 = mlp_init({2, 16, 2}, 3);
        const auto result = train_bilevel(theta0, make_importance(WeightScheme::uniform),
                                          split.train, split.val, norm, cfg);
        const auto curve = decay_curve(result.theta, split.test, 8);
        double kendall = 0.0;
        for (std::size_t i = 0; i < curve.windows.size(); ++i) {
            for (std::size_t j = i + 1; j < curve.windows.size(); ++j) {
                const double d = curve.windows[j].metric - curve.windows[i].metric;
                kendall += d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            }
        }
        kendall /= 28.0;  // C(8,2)
        REQUIRE(kendall < 0.0);
    }
}

TEST_CASE("weight_profile") {
    // discrete timestamps: every bucket holds exactly one age
    TemporalDataset ds;
    ds.task = Task::classification;
    const std::size_t per_bucket = 50, n_buckets = 10;
    ds.features = Matrix(per_bucket * n_buckets, 2);
    dwtest::Rng rng(4);
    for (double& v : ds.features.data) v = rng.normal();
    for (std::size_t i = 0; i < per_bucket * n_buckets; ++i) {
        ds.labels.push_back(static_cast<double>(i % 2));
        ds.timestamps.push_back(static_cast<double>(i / per_bucket));
    }
    const AgeNormalizer norm = make_normalizer(0.0, static_cast<double>(n_buckets - 1));

    SECTION("uniform: mean one, zero spread") {
        const auto profile =
            weight_profile(make_importance(WeightScheme::uniform), ds, norm, n_buckets);
        REQUIRE(profile.size() == n_buckets);
        for (const auto& b : profile) {
            REQUIRE(b.mean == 1.0);
            REQUIRE(b.std_dev == 0.0);
        }
    }
    SECTION("single_exp: mean strictly decreasing with age, zero spread") {
        ImportanceModel model = make_importance(WeightScheme::single_exp);
        model.lambda = 2.0;
        const auto profile = weight_profile(model, ds, norm, n_buckets);
        // buckets run oldest to newest: age falls, so the mean weight rises
        for (std::size_t b = 1; b < profile.size(); ++b) {
            REQUIRE(profile[b].mean_age < profile[b - 1].mean_age);
            REQUIRE(profile[b].mean > profile[b - 1].mean);
            REQUIRE(profile[b].std_dev < 1e-12);
        }
    }
    SECTION("non-increasing schemes keep bucket means monotone in age on spread ages") {
        // continuous timestamps now: within-bucket age variation
        TemporalDataset cont = ds;
        for (std::size_t i = 0; i < cont.size(); ++i) {
            cont.timestamps[i] = static_cast<double>(i);
        }
        const AgeNormalizer cnorm = make_normalizer(0.0, static_cast<double>(cont.size() - 1));
        ImportanceModel model = make_importance(WeightScheme::mix_exp, make_basis(2.0, 4));
        model.z = {1.0, 0.1, 0.0, 2.0};
        const auto profile = weight_profile(model, cont, cnorm, n_buckets);
        for (std::size_t b = 1; b < profile.size(); ++b) {
            REQUIRE(profile[b].mean >= profile[b - 1].mean);
            REQUIRE(profile[b].std_dev > 0.0);
        }
    }
}

TEST_CASE("compare_methods determinism and report shape") {
    SyntheticParams params;
    params.n = 900;
    params.omega_fast = 1.0;
    params.time_span = 4.0;
    const auto ds = generate_synthetic(SyntheticKind::two_timescale, params, 12);
    const auto split = temporal_split(ds, 0.6, 0.2);

    CompareConfig cfg;
    cfg.bilevel.epochs = 3;
    cfg.bilevel.seed = 9;
    cfg.bilevel.beta = 0.05;
    cfg.basis_K = 4;
    cfg.curve_windows = 4;
    cfg.model_hidden = {8};
    cfg.scorer_hidden = {8};
    cfg.lambda_grid = {0.0, 2.0};

    SECTION("duplicate methods give identical results") {
        const auto report =
            compare_methods(split, {WeightScheme::uniform, WeightScheme::uniform}, cfg);
        REQUIRE(report.methods.size() == 2);
        REQUIRE(report.methods[0].mean_test_metric == report.methods[1].mean_test_metric);
        REQUIRE(report.methods[0].runs[0].val_loss == report.methods[1].runs[0].val_loss);
        REQUIRE(report.baseline == "uniform");
        REQUIRE(report.methods[1].gain_vs_baseline == 0.0);
    }
    SECTION("full method list runs and reports tuned scalars") {
        const auto report = compare_methods(
            split,
            {WeightScheme::uniform, WeightScheme::single_exp, WeightScheme::mix_exp,
             WeightScheme::inst_mix_exp},
            cfg);
        REQUIRE(report.methods.size() == 4);
        for (const auto& m : report.methods) {
            REQUIRE_FALSE(m.any_failed);
            REQUIRE(m.runs.size() == 1);
            REQUIRE(m.runs[0].curve.windows.size() == 4);
        }
        REQUIRE(report.split_fingerprint.size() == 16);
        REQUIRE(report.metric_name == "accuracy");
    }
    SECTION("fewer than two methods is a configuration error") {
        REQUIRE_THROWS_AS(compare_methods(split, {WeightScheme::uniform}, cfg), ConfigError);
    }
}

TEST_CASE("emit_report") {
    ComparisonReport report;
    report.baseline = "uniform";
    report.metric_name = "accuracy";
    report.split_fingerprint = "00ff";
    report.config_fingerprint = "abcd";
    report.n_train = 10;
    report.n_val = 2;
    report.n_test = 5;
    MethodResult m;
    m.name = "uniform";
    MethodSeedRun run;
    run.seed = 3;
    run.test_metric = 0.75;
    run.curve.metric_name = "accuracy";
    for (int i = 0; i < 5; ++i) {
        run.curve.windows.push_back({i, static_cast<double>(i), static_cast<double>(i + 1),
                                     0.7 - 0.01 * i, 11});
    }
    m.runs.push_back(run);
    m.mean_test_metric = 0.75;
    report.methods.push_back(m);

    SECTION("json round-trips to an equal report") {
        const std::string path = "/tmp/driftweight_report_test.json";
        emit_report(report, path, "json");
        std::ifstream in(path);
        nlohmann::json j;
        in >> j;
        const auto parsed = j.get<ComparisonReport>();
        REQUIRE(parsed.methods.size() == 1);
        REQUIRE(parsed.methods[0].runs[0].test_metric == 0.75);
        REQUIRE(parsed.methods[0].runs[0].curve.windows.size() == 5);
        REQUIRE(parsed.split_fingerprint == report.split_fingerprint);
        REQUIRE(parsed.n_test == 5);
        std::remove(path.c_str());
    }
    SECTION("json emission is byte-stable") {
        const std::string p1 = "/tmp/driftweight_report_a.json";
        const std::string p2 = "/tmp/driftweight_report_b.json";
        emit_report(report, p1, "json");
        emit_report(report, p2, "json");
        std::ifstream a(p1), b(p2);
        std::stringstream sa, sb;
        sa << a.rdbuf();
        sb << b.rdbuf();
        REQUIRE(sa.str() == sb.str());
        std::remove(p1.c_str());
        std::remove(p2.c_str());
    }
    SECTION("csv has one row per window plus a header") {
        const auto files = emit_report(report, "/tmp/driftweight_curves.csv", "csv");
        REQUIRE(files.size() == 1);
        std::ifstream in(files[0]);
        std::string line;
        int lines = 0;
        while (std::getline(in, line)) ++lines;
        REQUIRE(lines == 6);
        std::remove(files[0].c_str());
    }
    SECTION("empty method list still emits valid json") {
        ComparisonReport empty;
        const std::string path = "/tmp/driftweight_empty.json";
        emit_report(empty, path, "json");
        std::ifstream in(path);
        nlohmann::json j;
        in >> j;
        REQUIRE(j.at("methods").is_array());
        REQUIRE(j.at("methods").empty());
        std::remove(path.c_str());
    }
    SECTION("unknown format rejected") {
        REQUIRE_THROWS_AS(emit_report(report, "/tmp/x", "xml"), ConfigError);
    }
}

TEST_CASE("checkpoint round-trip") {
    dwtest::Rng rng(15);
    Checkpoint ckpt;
    ckpt.theta = dwtest::random_params({3, 8, 2}, rng);
    ckpt.model = make_importance(WeightScheme::inst_mix_exp, make_basis(2.0, 4));
    ckpt.model.scorer = scorer_init(3, 4, {8}, 2);
    ckpt.normalizer = make_normalizer(2.0, 11.0);
    ckpt.task = Task::classification;
    ckpt.config = {{"note", "test"}};

    const std::string path = "/tmp/driftweight_ckpt_test.json";
    save_checkpoint(ckpt, path);
    const Checkpoint loaded = load_checkpoint(path);
    REQUIRE(loaded.theta.values == ckpt.theta.values);
    REQUIRE(loaded.theta.layer_sizes == ckpt.theta.layer_sizes);
    REQUIRE(loaded.model.scheme == WeightScheme::inst_mix_exp);
    REQUIRE(loaded.model.scorer.net.values == ckpt.model.scorer.net.values);
    REQUIRE(loaded.model.basis.rates == ckpt.model.basis.rates);
    REQUIRE(loaded.normalizer.t_end == 11.0);
    REQUIRE(loaded.task == Task::classification);
    std::remove(path.c_str());
}
