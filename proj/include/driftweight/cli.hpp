#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "driftweight/checkpoint.hpp"
#include "driftweight/config.hpp"
#include "driftweight/driftweight.hpp"

namespace driftweight {

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
    j = {{"epoch", r.epoch},
         {"train_weighted_risk", r.train_weighted_risk},
         {"train_loss", r.train_loss},
         {"val_loss", r.val_loss},
         {"weight_mean", r.weight_mean},
         {"weight_std", r.weight_std},
         {"meta_steps", r.meta_steps}};
}

inline void to_json(nlohmann::json& j, const TrainHistory& h) {
    j = {{"epochs", h.epochs},
         {"best_epoch", h.best_epoch},
         {"total_meta_steps", h.total_meta_steps},
         {"stopped_early", h.stopped_early}};
}

namespace cli {

inline std::string dataset_to_csv(const TemporalDataset& ds) {
    std::ostringstream os;
    os << "timestamp,label";
    for (std::size_t c = 0; c < ds.dim(); ++c) os << ",x" << c;
    os << '\n';
    os << std::setprecision(17);
    for (std::size_t r = 0; r < ds.size(); ++r) {
        os << ds.timestamps[r] << ',' << ds.labels[r];
        for (const double v : ds.features.row(r)) os << ',' << v;
        os << '\n';
    }
    return os.str();
}

inline std::string profile_to_csv(const std::vector<WeightBucket>& profile) {
    std::ostringstream os;
    os << "bucket,mean_age,mean,std,n\n";
    os << std::setprecision(17);
    for (const auto& b : profile) {
        os << b.index << ',' << b.mean_age << ',' << b.mean << ',' << b.std_dev << ',' << b.n
           << '\n';
    }
    return os.str();
}

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    std::optional<std::string> variant;
    std::optional<std::string> bilevel_variant;
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<std::string> out_dir;
    std::optional<std::string> data_path;
};

// Flag > file > default: overrides are written into the raw document before
// resolution so fingerprints and embedded configs reflect them.
inline RunConfig resolve_config(const std::string& config_path, const Overrides& ov) {
    nlohmann::json doc = nlohmann::json::object();
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("cannot open config '" + config_path + "'");
        try {
            in >> doc;
        } catch (const nlohmann::json::exception& err) {
            throw ConfigError("config '" + config_path + "' is not valid JSON: " + err.what());
        }
    }
    if (ov.seed) doc["bilevel"]["seed"] = *ov.seed;
    if (ov.epochs) doc["bilevel"]["epochs"] = *ov.epochs;
    if (ov.variant) doc["importance"]["variant"] = *ov.variant;
    if (ov.bilevel_variant) doc["bilevel"]["variant"] = *ov.bilevel_variant;
    if (ov.alpha) doc["bilevel"]["alpha"] = *ov.alpha;
    if (ov.beta) doc["bilevel"]["beta"] = *ov.beta;
    if (ov.out_dir) doc["run"]["out_dir"] = *ov.out_dir;
    if (ov.data_path) {
        doc["data"]["source"] = "csv";
        doc["data"]["path"] = *ov.data_path;
    }
    return config_from_json(std::move(doc));
}

inline void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
}

inline int cmd_gen_data(const std::string& kind, std::uint64_t seed, const SyntheticParams& params,
                        const std::string& out) {
    const TemporalDataset ds = generate_synthetic(synthetic_kind_from_name(kind), params, seed);
    write_text_file(out, dataset_to_csv(ds));
    std::cout << "wrote " << ds.size() << " instances to " << out << "\n";
    return 0;
}

inline int cmd_train(const RunConfig& cfg) {
    const TemporalDataset ds = load_dataset(cfg);
    const TemporalSplit split = temporal_split(ds, cfg.train_frac, cfg.val_frac);
    const AgeNormalizer normalizer =
        make_normalizer(split.train.t_begin(), split.train.t_end(), cfg.normalize_ages);

    std::vector<int> arch;
    arch.push_back(static_cast<int>(split.train.dim()));
    for (const int h : cfg.model_hidden) arch.push_back(h);
    arch.push_back(cfg.task == Task::classification ? detail::n_classes(split) : 1);
    const ModelParams theta0 = mlp_init(arch, split_seed(cfg.root_seed(), "theta-init"));

    const ImportanceModel model0 =
        build_importance_model(cfg, static_cast<int>(split.train.dim()));
    const BilevelResult result =
        train_bilevel(theta0, model0, split.train, split.val, normalizer, cfg.bilevel);

    ensure_out_dir(cfg.out_dir);
    Checkpoint ckpt;
    ckpt.theta = result.theta;
    ckpt.model = result.model;
    ckpt.normalizer = normalizer;
    ckpt.task = cfg.task;
    ckpt.config = cfg.resolved;
    const std::string ckpt_path = cfg.out_dir + "/checkpoint.json";
    save_checkpoint(ckpt, ckpt_path);

    nlohmann::json hist = result.history;
    hist["config_fingerprint"] = config_fingerprint(cfg);
    hist["test_metric"] = evaluate_metric(result.theta, split.test);
    hist["config"] = cfg.resolved;
    write_text_file(cfg.out_dir + "/history.json", hist.dump(2) + "\n");

    std::cout << "trained " << scheme_name(cfg.variant) << ": best epoch "
              << result.history.best_epoch << ", val loss "
              << result.history.epochs[static_cast<std::size_t>(result.history.best_epoch)].val_loss
              << ", test " << (cfg.task == Task::classification ? "accuracy " : "rmse ")
              << hist["test_metric"].get<double>() << "\n"
              << "checkpoint: " << ckpt_path << "\n";
    return 0;
}

inline int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
                    std::size_t n_windows, const std::string& out) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    CsvSchema schema;
    if (ckpt.config.contains("data")) {
        const auto& d = ckpt.config.at("data");
        schema.timestamp_col = d.value("timestamp_col", schema.timestamp_col);
        schema.label_col = d.value("label_col", schema.label_col);
        if (d.contains("feature_cols")) {
            schema.feature_cols = d.at("feature_cols").get<std::vector<std::string>>();
        }
    }
    const TemporalDataset ds = load_timestamped_csv(data_path, schema, ckpt.task);
    const DecayCurve curve = decay_curve(ckpt.theta, ds, n_windows);
    write_text_file(out, curve_to_csv(curve));
    std::cout << "overall " << curve.metric_name << " " << evaluate_metric(ckpt.theta, ds)
              << "; wrote " << curve.windows.size() << "-window curve to " << out << "\n";
    return 0;
}

inline int cmd_compare(const RunConfig& cfg, bool emit_csv) {
    const TemporalDataset ds = load_dataset(cfg);
    const TemporalSplit split = temporal_split(ds, cfg.train_frac, cfg.val_frac);

    std::vector<WeightScheme> methods;
    methods.reserve(cfg.compare_methods_list.size());
    for (const auto& name : cfg.compare_methods_list) methods.push_back(scheme_from_name(name));

    CompareConfig ccfg;
    ccfg.bilevel = cfg.bilevel;
    ccfg.model_hidden = cfg.model_hidden;
    ccfg.scorer_hidden = cfg.scorer_hidden;
    ccfg.basis_a0 = cfg.basis_a0;
    ccfg.basis_K = cfg.basis_K;
    ccfg.normalize_ages = cfg.normalize_ages;
    ccfg.seeds = cfg.compare_seeds;
    ccfg.curve_windows = cfg.curve_windows;
    ccfg.baseline = cfg.baseline;

    ComparisonReport report = compare_methods(split, methods, ccfg);
    report.config_fingerprint = config_fingerprint(cfg);

    ensure_out_dir(cfg.out_dir);
    nlohmann::json j = report;
    j["config"] = cfg.resolved;
    const std::string report_path = cfg.out_dir + "/report.json";
    write_text_file(report_path, j.dump(2) + "\n");
    if (emit_csv) emit_report(report, cfg.out_dir + "/curves.csv", "csv");

    for (const auto& m : report.methods) {
        std::cout << m.name << ": mean " << report.metric_name << " " << m.mean_test_metric
                  << " (gain vs " << report.baseline << ": " << m.gain_vs_baseline << ")"
                  << (m.any_failed ? " [FAILED RUNS]" : "") << "\n";
    }
    std::cout << "report: " << report_path << "\n";
    return 0;
}

inline int cmd_stream(const RunConfig& cfg) {
    const TemporalDataset ds = load_dataset(cfg);

    std::vector<int> arch;
    arch.push_back(static_cast<int>(ds.dim()));
    for (const int h : cfg.model_hidden) arch.push_back(h);
    double mx = 0.0;
    for (const double l : ds.labels) mx = std::max(mx, l);
    arch.push_back(cfg.task == Task::classification ? static_cast<int>(mx) + 1 : 1);
    const ModelParams theta0 = mlp_init(arch, split_seed(cfg.root_seed(), "theta-init"));
    const ImportanceModel model0 = build_importance_model(cfg, static_cast<int>(ds.dim()));

    StreamConfig scfg = cfg.stream;
    scfg.bilevel = cfg.bilevel;
    const StreamResult result = stream_train(ds, model0, theta0, scfg);

    ensure_out_dir(cfg.out_dir);
    nlohmann::json j = {{"records", result.records},
                        {"mean_forward_transfer", mean_forward_transfer(result)},
                        {"config_fingerprint", config_fingerprint(cfg)},
                        {"config", cfg.resolved}};
    const std::string path = cfg.out_dir + "/stream.json";
    write_text_file(path, j.dump(2) + "\n");
    std::cout << "mean next-bucket metric " << mean_forward_transfer(result) << " over "
              << result.records.size() << " buckets; wrote " << path << "\n";
    return 0;
}

inline int cmd_weights(const std::string& ckpt_path, const std::string& data_path,
                       std::size_t n_buckets, const std::string& out) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    CsvSchema schema;
    if (ckpt.config.contains("data")) {
        const auto& d = ckpt.config.at("data");
        schema.timestamp_col = d.value("timestamp_col", schema.timestamp_col);
        schema.label_col = d.value("label_col", schema.label_col);
        if (d.contains("feature_cols")) {
            schema.feature_cols = d.at("feature_cols").get<std::vector<std::string>>();
        }
    }
    const TemporalDataset ds = load_timestamped_csv(data_path, schema, ckpt.task);
    const auto profile = weight_profile(ckpt.model, ds, ckpt.normalizer, n_buckets);
    write_text_file(out, profile_to_csv(profile));
    std::cout << "wrote " << profile.size() << "-bucket weight profile to " << out << "\n";
    return 0;
}

// Library entry point for the CLI; returns the process exit code.
// 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
inline int run(const std::vector<std::string>& args) {
    CLI::App app{"instance-conditional temporal importance weighting for drifting data"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic drifting dataset as CSV");
    std::string gen_kind = "two_timescale";
    std::uint64_t gen_seed = 0;
    SyntheticParams gen_params;
    std::string gen_out;
    gen->add_option("--kind", gen_kind, "rotating_boundary | label_drift | two_timescale");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--n", gen_params.n, "instance count");
    gen->add_option("--span", gen_params.time_span, "total time span");
    gen->add_option("--omega", gen_params.omega_fast, "rotation rate (rad per time unit)");
    gen->add_option("--omega-slow", gen_params.omega_slow, "slow subpopulation rotation rate");
    gen->add_option("--sigma", gen_params.sigma, "feature noise");
    gen->add_option("--marker-offset", gen_params.marker_offset, "subpopulation center offset");
    gen->add_option("--prior-start", gen_params.prior_start, "P(y=1) at t=0 (label_drift)");
    gen->add_option("--prior-end", gen_params.prior_end, "P(y=1) at t=span (label_drift)");
    gen->add_option("--out", gen_out, "output CSV path")->required();

    // shared config/override flags
    auto add_config_flags = [](CLI::App* sub, std::string& config_path, Overrides& ov) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option_function<std::uint64_t>(
            "--seed", [&ov](const std::uint64_t& v) { ov.seed = v; }, "root seed override");
        sub->add_option_function<int>(
            "--epochs", [&ov](const int& v) { ov.epochs = v; }, "epoch count override");
        sub->add_option_function<std::string>(
            "--variant", [&ov](const std::string& v) { ov.variant = v; },
            "importance variant override");
        sub->add_option_function<std::string>(
            "--bilevel-variant", [&ov](const std::string& v) { ov.bilevel_variant = v; },
            "alternating | implicit");
        sub->add_option_function<double>(
            "--alpha", [&ov](const double& v) { ov.alpha = v; }, "scorer learning rate override");
        sub->add_option_function<double>(
            "--beta", [&ov](const double& v) { ov.beta = v; }, "model learning rate override");
        sub->add_option_function<std::string>(
            "--out-dir", [&ov](const std::string& v) { ov.out_dir = v; },
            "output directory override");
        sub->add_option_function<std::string>(
            "--data", [&ov](const std::string& v) { ov.data_path = v; },
            "train on this CSV instead of the configured source");
    };

    auto* train = app.add_subcommand("train", "train one weighting variant, write checkpoint");
    std::string train_config;
    Overrides train_ov;
    add_config_flags(train, train_config, train_ov);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint's decay curve on a CSV");
    std::string eval_ckpt, eval_data, eval_out = "curve.csv";
    std::size_t eval_windows = 10;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint JSON")->required();
    eval->add_option("--data", eval_data, "timestamped CSV")->required();
    eval->add_option("--windows", eval_windows, "number of test windows");
    eval->add_option("--out", eval_out, "curve CSV output path");

    auto* compare = app.add_subcommand("compare", "train and compare weighting variants");
    std::string compare_config;
    Overrides compare_ov;
    add_config_flags(compare, compare_config, compare_ov);
    std::vector<std::string> compare_methods_flag;
    std::vector<std::uint64_t> compare_seeds_flag;
    bool emit_csv = false;
    compare->add_option("--methods", compare_methods_flag, "comma-separated variant list")
        ->delimiter(',');
    compare->add_option("--seeds", compare_seeds_flag, "comma-separated seed list")
        ->delimiter(',');
    compare->add_flag("--emit-csv", emit_csv, "also write per-curve CSV files");

    auto* stream = app.add_subcommand("stream", "sequential bucket training (continual mode)");
    std::string stream_config;
    Overrides stream_ov;
    add_config_flags(stream, stream_config, stream_ov);
    std::optional<std::size_t> stream_buckets;
    stream->add_option_function<std::size_t>(
        "--buckets", [&stream_buckets](const std::size_t& v) { stream_buckets = v; },
        "bucket count override");

    auto* weights = app.add_subcommand("weights", "weight profile of a trained importance model");
    std::string w_ckpt, w_data, w_out = "weights.csv";
    std::size_t w_buckets = 10;
    weights->add_option("--checkpoint", w_ckpt, "checkpoint JSON")->required();
    weights->add_option("--data", w_data, "timestamped CSV")->required();
    weights->add_option("--buckets", w_buckets, "number of age buckets");
    weights->add_option("--out", w_out, "profile CSV output path");

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("driftweight");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());

        if (gen->parsed()) return cmd_gen_data(gen_kind, gen_seed, gen_params, gen_out);
        if (train->parsed()) return cmd_train(resolve_config(train_config, train_ov));
        if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_windows, eval_out);
        if (compare->parsed()) {
            RunConfig cfg = resolve_config(compare_config, compare_ov);
            if (!compare_methods_flag.empty()) {
                cfg.compare_methods_list = compare_methods_flag;
                cfg.resolved["compare"]["methods"] = compare_methods_flag;
            }
            if (!compare_seeds_flag.empty()) {
                cfg.compare_seeds = compare_seeds_flag;
                cfg.resolved["compare"]["seeds"] = compare_seeds_flag;
            }
            return cmd_compare(cfg, emit_csv);
        }
        if (stream->parsed()) {
            RunConfig cfg = resolve_config(stream_config, stream_ov);
            if (stream_buckets) {
                cfg.stream.n_buckets = *stream_buckets;
                cfg.resolved["stream"]["n_buckets"] = *stream_buckets;
            }
            return cmd_stream(cfg);
        }
        if (weights->parsed()) return cmd_weights(w_ckpt, w_data, w_buckets, w_out);
        std::cerr << app.help() << "\n";
        return 1;
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 1;
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return 1;
    } catch (const DataError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return 2;
    } catch (const NumericError& err) {
        std::cerr << "numerical failure: " << err.what() << "\n";
        return 3;
    }
}

}  // namespace cli
}  // namespace driftweight
