#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "driftweight/bilevel.hpp"
#include "driftweight/data.hpp"
#include "driftweight/errors.hpp"
#include "driftweight/nn.hpp"
#include "driftweight/timescale.hpp"

namespace driftweight {

// Classification accuracy in [0, 1] (argmax over logits) or regression RMSE.
inline double evaluate_metric(const ModelParams& params, const TemporalDataset& ds) {
    ds.validate();
    const Matrix out = forward(params, ds.features);
    if (ds.task == Task::classification) {
        std::size_t correct = 0;
        for (std::size_t r = 0; r < out.rows; ++r) {
            const auto row = out.row(r);
            std::size_t arg = 0;
            for (std::size_t c = 1; c < row.size(); ++c) {
                if (row[c] > row[arg]) arg = c;
            }
            if (arg == static_cast<std::size_t>(ds.labels[r])) ++correct;
        }
        return static_cast<double>(correct) / static_cast<double>(out.rows);
    }
    double se = 0.0;
    for (std::size_t r = 0; r < out.rows; ++r) {
        const double d = out.at(r, 0) - ds.labels[r];
        se += d * d;
    }
    return std::sqrt(se / static_cast<double>(out.rows));
}

struct DecayWindow {
    int index = 0;
    double start_ts = 0.0;
    double end_ts = 0.0;
    double metric = 0.0;
    std::size_t n = 0;
};

// Forward-transfer decay curve: the metric on successive future windows with
// frozen parameters.
struct DecayCurve {
    std::string metric_name;  // "accuracy" or "rmse"
    std::vector<DecayWindow> windows;
};

inline DecayCurve decay_curve(const ModelParams& params, const TemporalDataset& test,
                              std::size_t n_windows) {
    DecayCurve curve;
    curve.metric_name = test.task == Task::classification ? "accuracy" : "rmse";
    const auto buckets = bucketize(test, n_windows);
    for (std::size_t b = 0; b < buckets.size(); ++b) {
        DecayWindow w;
        w.index = static_cast<int>(b);
        w.start_ts = buckets[b].t_begin();
        w.end_ts = buckets[b].t_end();
        w.metric = evaluate_metric(params, buckets[b]);
        w.n = buckets[b].size();
        curve.windows.push_back(w);
    }
    return curve;
}

struct WeightBucket {
    int index = 0;
    double mean_age = 0.0;
    double mean = 0.0;
    double std_dev = 0.0;
    std::size_t n = 0;
};

// Per-age-bucket mean and standard deviation of the importance weights a
// finalized model assigns to the training instances.
inline std::vector<WeightBucket> weight_profile(const ImportanceModel& model,
                                                const TemporalDataset& train,
                                                const AgeNormalizer& normalizer,
                                                std::size_t n_buckets) {
    model.validate();
    const auto buckets = bucketize(train, n_buckets);
    std::vector<WeightBucket> profile;
    profile.reserve(buckets.size());
    for (std::size_t b = 0; b < buckets.size(); ++b) {
        std::vector<double> ages(buckets[b].size());
        for (std::size_t i = 0; i < ages.size(); ++i) {
            ages[i] = normalizer.age(buckets[b].timestamps[i]);
        }
        const auto w = importance_weights(model, buckets[b].features, ages);
        WeightBucket rec;
        rec.index = static_cast<int>(b);
        double age_sum = 0.0;
        for (const double a : ages) age_sum += a;
        rec.mean_age = age_sum / static_cast<double>(ages.size());
        std::tie(rec.mean, rec.std_dev) = detail::mean_std(w);
        rec.n = buckets[b].size();
        profile.push_back(rec);
    }
    return profile;
}

struct CompareConfig {
    BilevelConfig bilevel;
    std::vector<int> model_hidden = {32, 32};
    std::vector<int> scorer_hidden = {32, 32};
    double basis_a0 = 2.0;
    int basis_K = 16;
    bool normalize_ages = true;
    std::vector<double> lambda_grid = {0.0, 0.5, 1.0, 2.0, 4.0, 8.0};
    std::vector<double> slope_grid = {0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<std::uint64_t> seeds;  // empty: use bilevel.seed
    std::size_t curve_windows = 10;
    std::string baseline = "uniform";
};

struct MethodSeedRun {
    std::uint64_t seed = 0;
    double test_metric = 0.0;
    double val_loss = 0.0;
    double tuned_scalar = 0.0;  // chosen lambda or slope where applicable
    int best_epoch = 0;
    int epochs_run = 0;
    DecayCurve curve;
    bool failed = false;
    std::string error;
};

struct MethodResult {
    std::string name;
    std::vector<MethodSeedRun> runs;
    double mean_test_metric = 0.0;
    double gain_vs_baseline = 0.0;
    bool any_failed = false;
};

// Cross-method comparison on one fixed split. gain_definition spells out the
// reported convention explicitly.
struct ComparisonReport {
    std::vector<MethodResult> methods;
    std::string baseline;
    std::string gain_definition = "(method_metric - baseline_metric) / baseline_metric";
    std::string metric_name;
    std::string split_fingerprint;
    std::string config_fingerprint;
    std::size_t n_train = 0, n_val = 0, n_test = 0;
};

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(16) << h;
    return os.str();
}

inline std::string split_fingerprint(const TemporalSplit& split) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix_ds = [&](const TemporalDataset& ds) {
        const std::size_t n = ds.size();
        h = fnv1a(h, &n, sizeof(n));
        const double t0 = ds.t_begin(), t1 = ds.t_end();
        h = fnv1a(h, &t0, sizeof(t0));
        h = fnv1a(h, &t1, sizeof(t1));
        double label_sum = 0.0, feat_sum = 0.0;
        for (const double l : ds.labels) label_sum += l;
        for (const double f : ds.features.data) feat_sum += f;
        h = fnv1a(h, &label_sum, sizeof(label_sum));
        h = fnv1a(h, &feat_sum, sizeof(feat_sum));
    };
    mix_ds(split.train);
    mix_ds(split.val);
    mix_ds(split.test);
    return hex64(h);
}

inline int n_classes(const TemporalSplit& split) {
    double mx = 0.0;
    for (const auto* ds : {&split.train, &split.val, &split.test}) {
        for (const double l : ds->labels) mx = std::max(mx, l);
    }
    return static_cast<int>(mx) + 1;
}

struct PreparedMethod {
    ImportanceModel model;
    double tuned_scalar = 0.0;
};

}  // namespace detail

// Trains every requested weighting scheme on identical splits, model inits,
// and batch orders; grid-searched scalars (lambda, slope) are tuned on the
// validation loss. A method that throws is marked failed and the others
// continue.
inline ComparisonReport compare_methods(const TemporalSplit& split,
                                        const std::vector<WeightScheme>& methods,
                                        const CompareConfig& cfg) {
    if (methods.size() < 2) throw ConfigError("compare_methods: need at least two methods");
    const Task task = split.train.task;
    const TimescaleBasis basis = make_basis(cfg.basis_a0, cfg.basis_K);
    const AgeNormalizer normalizer =
        make_normalizer(split.train.t_begin(), split.train.t_end(), cfg.normalize_ages);

    std::vector<std::uint64_t> seeds = cfg.seeds;
    if (seeds.empty()) seeds.push_back(cfg.bilevel.seed);

    const int out_dim = task == Task::classification ? detail::n_classes(split) : 1;
    const int feat_dim = static_cast<int>(split.train.dim());

    ComparisonReport report;
    report.baseline = cfg.baseline;
    report.metric_name = task == Task::classification ? "accuracy" : "rmse";
    report.split_fingerprint = detail::split_fingerprint(split);
    report.n_train = split.train.size();
    report.n_val = split.val.size();
    report.n_test = split.test.size();

    for (const WeightScheme scheme : methods) {
        MethodResult mres;
        mres.name = scheme_name(scheme);
        double metric_sum = 0.0;
        std::size_t ok_runs = 0;

        for (const std::uint64_t seed : seeds) {
            MethodSeedRun run;
            run.seed = seed;
            try {
                std::vector<int> arch;
                arch.push_back(feat_dim);
                for (const int h : cfg.model_hidden) arch.push_back(h);
                arch.push_back(out_dim);
                const ModelParams theta0 = mlp_init(arch, split_seed(seed, "theta-init"));

                BilevelConfig bcfg = cfg.bilevel;
                bcfg.seed = seed;

                auto train_once = [&](const ImportanceModel& m) {
                    return train_bilevel(theta0, m, split.train, split.val, normalizer, bcfg);
                };

                ImportanceModel model = make_importance(scheme, basis);
                if (scheme == WeightScheme::linear || scheme == WeightScheme::single_exp) {
                    // grid-search the scalar against validation loss
                    const auto& grid = scheme == WeightScheme::linear ? cfg.slope_grid
                                                                      : cfg.lambda_grid;
                    double best_val = std::numeric_limits<double>::infinity();
                    double best_scalar = grid.front();
                    for (const double s : grid) {
                        ImportanceModel cand = model;
                        if (scheme == WeightScheme::linear) {
                            cand.slope = s;
                        } else {
                            cand.lambda = s;
                        }
                        const auto r = train_once(cand);
                        const double v =
                            r.history.epochs[static_cast<std::size_t>(r.history.best_epoch)]
                                .val_loss;
                        if (v < best_val) {
                            best_val = v;
                            best_scalar = s;
                        }
                    }
                    if (scheme == WeightScheme::linear) {
                        model.slope = best_scalar;
                    } else {
                        model.lambda = best_scalar;
                    }
                    run.tuned_scalar = best_scalar;
                } else if (scheme == WeightScheme::mix_exp) {
                    model.z.assign(static_cast<std::size_t>(cfg.basis_K),
                                   1.0 / static_cast<double>(cfg.basis_K));
                } else if (scheme_uses_scorer(scheme)) {
                    const int in_dim =
                        scheme == WeightScheme::inst_time ? feat_dim + 1 : feat_dim;
                    const int k = scheme == WeightScheme::inst_mix_exp ? cfg.basis_K : 1;
                    model.scorer =
                        scorer_init(in_dim, k, cfg.scorer_hidden, split_seed(seed, "scorer"));
                }

                const BilevelResult result = train_once(model);
                run.test_metric = evaluate_metric(result.theta, split.test);
                run.val_loss =
                    result.history.epochs[static_cast<std::size_t>(result.history.best_epoch)]
                        .val_loss;
                run.best_epoch = result.history.best_epoch;
                run.epochs_run = static_cast<int>(result.history.epochs.size());
                run.curve = decay_curve(result.theta, split.test, cfg.curve_windows);
                metric_sum += run.test_metric;
                ++ok_runs;
            } catch (const std::exception& err) {
                run.failed = true;
                run.error = err.what();
                mres.any_failed = true;
            }
            mres.runs.push_back(std::move(run));
        }
        mres.mean_test_metric = ok_runs > 0 ? metric_sum / static_cast<double>(ok_runs) : 0.0;
        report.methods.push_back(std::move(mres));
    }

    const auto baseline_it =
        std::find_if(report.methods.begin(), report.methods.end(),
                     [&](const MethodResult& m) { return m.name == report.baseline; });
    const double base = baseline_it != report.methods.end() && !baseline_it->any_failed
                            ? baseline_it->mean_test_metric
                            : 0.0;
    for (auto& m : report.methods) {
        m.gain_vs_baseline = base != 0.0 ? (m.mean_test_metric - base) / base : 0.0;
    }
    return report;
}

// ---- JSON serialization -------------------------------------------------

inline void to_json(nlohmann::json& j, const DecayWindow& w) {
    j = {{"window_index", w.index}, {"start_ts", w.start_ts}, {"end_ts", w.end_ts},
         {"metric", w.metric},      {"n", w.n}};
}

inline void from_json(const nlohmann::json& j, DecayWindow& w) {
    j.at("window_index").get_to(w.index);
    j.at("start_ts").get_to(w.start_ts);
    j.at("end_ts").get_to(w.end_ts);
    j.at("metric").get_to(w.metric);
    j.at("n").get_to(w.n);
}

inline void to_json(nlohmann::json& j, const DecayCurve& c) {
    j = {{"metric_name", c.metric_name}, {"windows", c.windows}};
}

inline void from_json(const nlohmann::json& j, DecayCurve& c) {
    j.at("metric_name").get_to(c.metric_name);
    j.at("windows").get_to(c.windows);
}

inline void to_json(nlohmann::json& j, const WeightBucket& b) {
    j = {{"bucket", b.index}, {"mean_age", b.mean_age}, {"mean", b.mean},
         {"std", b.std_dev},  {"n", b.n}};
}

inline void from_json(const nlohmann::json& j, WeightBucket& b) {
    j.at("bucket").get_to(b.index);
    j.at("mean_age").get_to(b.mean_age);
    j.at("mean").get_to(b.mean);
    j.at("std").get_to(b.std_dev);
    j.at("n").get_to(b.n);
}

inline void to_json(nlohmann::json& j, const MethodSeedRun& r) {
    j = {{"seed", r.seed},
         {"test_metric", r.test_metric},
         {"val_loss", r.val_loss},
         {"tuned_scalar", r.tuned_scalar},
         {"best_epoch", r.best_epoch},
         {"epochs_run", r.epochs_run},
         {"curve", r.curve},
         {"failed", r.failed},
         {"error", r.error}};
}

inline void from_json(const nlohmann::json& j, MethodSeedRun& r) {
    j.at("seed").get_to(r.seed);
    j.at("test_metric").get_to(r.test_metric);
    j.at("val_loss").get_to(r.val_loss);
    j.at("tuned_scalar").get_to(r.tuned_scalar);
    j.at("best_epoch").get_to(r.best_epoch);
    j.at("epochs_run").get_to(r.epochs_run);
    j.at("curve").get_to(r.curve);
    j.at("failed").get_to(r.failed);
    j.at("error").get_to(r.error);
}

inline void to_json(nlohmann::json& j, const MethodResult& m) {
    j = {{"name", m.name},
         {"runs", m.runs},
         {"mean_test_metric", m.mean_test_metric},
         {"gain_vs_baseline", m.gain_vs_baseline},
         {"any_failed", m.any_failed}};
}

inline void from_json(const nlohmann::json& j, MethodResult& m) {
    j.at("name").get_to(m.name);
    j.at("runs").get_to(m.runs);
    j.at("mean_test_metric").get_to(m.mean_test_metric);
    j.at("gain_vs_baseline").get_to(m.gain_vs_baseline);
    j.at("any_failed").get_to(m.any_failed);
}

inline void to_json(nlohmann::json& j, const ComparisonReport& r) {
    j = {{"methods", r.methods},
         {"baseline", r.baseline},
         {"gain_definition", r.gain_definition},
         {"metric_name", r.metric_name},
         {"split_fingerprint", r.split_fingerprint},
         {"config_fingerprint", r.config_fingerprint},
         {"n_train", r.n_train},
         {"n_val", r.n_val},
         {"n_test", r.n_test}};
}

inline void from_json(const nlohmann::json& j, ComparisonReport& r) {
    j.at("methods").get_to(r.methods);
    j.at("baseline").get_to(r.baseline);
    j.at("gain_definition").get_to(r.gain_definition);
    j.at("metric_name").get_to(r.metric_name);
    j.at("split_fingerprint").get_to(r.split_fingerprint);
    j.at("config_fingerprint").get_to(r.config_fingerprint);
    j.at("n_train").get_to(r.n_train);
    j.at("n_val").get_to(r.n_val);
    j.at("n_test").get_to(r.n_test);
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << content;
    if (!out) throw DataError("write failed for '" + path + "'");
}

inline std::string curve_to_csv(const DecayCurve& curve) {
    std::ostringstream os;
    os << "window_index,start_ts,end_ts,metric,n\n";
    os << std::setprecision(17);
    for (const auto& w : curve.windows) {
        os << w.index << ',' << w.start_ts << ',' << w.end_ts << ',' << w.metric << ',' << w.n
           << '\n';
    }
    return os.str();
}

// Writes the report. "json": one file at `path`. "csv": one file per
// method/seed curve next to `path` (stem_method_seedN.csv). Byte-stable for
// identical reports. Returns the written paths.
inline std::vector<std::string> emit_report(const ComparisonReport& report,
                                            const std::string& path, const std::string& format) {
    std::vector<std::string> written;
    if (format == "json") {
        const nlohmann::json j = report;
        write_text_file(path, j.dump(2) + "\n");
        written.push_back(path);
    } else if (format == "csv") {
        std::string stem = path;
        const auto dot = stem.rfind(".csv");
        if (dot != std::string::npos && dot == stem.size() - 4) stem = stem.substr(0, dot);
        for (const auto& m : report.methods) {
            for (const auto& run : m.runs) {
                if (run.failed) continue;
                const std::string file =
                    stem + "_" + m.name + "_seed" + std::to_string(run.seed) + ".csv";
                write_text_file(file, curve_to_csv(run.curve));
                written.push_back(file);
            }
        }
    } else {
        throw ConfigError("emit_report: format must be 'json' or 'csv'");
    }
    return written;
}

}  // namespace driftweight
