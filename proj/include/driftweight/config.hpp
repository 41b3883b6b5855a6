#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "driftweight/bilevel.hpp"
#include "driftweight/data.hpp"
#include "driftweight/errors.hpp"
#include "driftweight/harness.hpp"
#include "driftweight/stream.hpp"
#include "driftweight/timescale.hpp"

namespace driftweight {

// One JSON config drives every subcommand. Resolution order is
// defaults < file < command-line overrides; unknown keys are rejected and the
// fully resolved document is embedded in every artifact.
struct RunConfig {
    nlohmann::json resolved;  // canonical resolved document

    std::string run_name = "run";
    std::string out_dir = ".";

    // data
    std::string data_source = "synthetic";  // "synthetic" | "csv"
    std::string data_path;
    CsvSchema csv_schema;
    Task task = Task::classification;
    double train_frac = 0.45;
    double val_frac = 0.05;
    SyntheticKind synthetic_kind = SyntheticKind::two_timescale;
    SyntheticParams synthetic;
    std::optional<std::uint64_t> data_seed;

    // model / importance / scorer
    std::vector<int> model_hidden = {32, 32};
    WeightScheme variant = WeightScheme::inst_mix_exp;
    double basis_a0 = 2.0;
    int basis_K = 16;
    double lambda = 0.0;
    double slope = 0.0;
    bool normalize_ages = true;
    bool renormalize = false;
    std::vector<int> scorer_hidden = {32, 32};
    std::optional<std::uint64_t> scorer_seed;

    BilevelConfig bilevel;
    StreamConfig stream;

    // compare / eval
    std::vector<std::string> compare_methods_list = {"uniform", "exp", "mixexp", "instmixexp"};
    std::vector<std::uint64_t> compare_seeds;
    std::size_t curve_windows = 10;
    std::string baseline = "uniform";

    std::uint64_t root_seed() const { return bilevel.seed; }
    std::uint64_t effective_data_seed() const {
        return data_seed ? *data_seed : split_seed(root_seed(), "data");
    }
    std::uint64_t effective_scorer_seed() const {
        return scorer_seed ? *scorer_seed : split_seed(root_seed(), "scorer");
    }
};

namespace detail {

inline nlohmann::json config_defaults() {
    return nlohmann::json{
        {"run", {{"name", "run"}, {"out_dir", "."}}},
        {"data",
         {{"source", "synthetic"},
          {"path", ""},
          {"timestamp_col", "timestamp"},
          {"label_col", "label"},
          {"feature_cols", nlohmann::json::array({"x*"})},
          {"task", "classification"},
          {"train_frac", 0.45},
          {"val_frac", 0.05},
          {"synthetic",
           {{"kind", "two_timescale"},
            {"n", 32000},
            {"time_span", 8.0},
            {"omega_fast", 1.0},
            {"omega_slow", 0.0},
            {"sigma", 0.0},
            {"marker_offset", 3.0},
            {"prior_start", 0.5},
            {"prior_end", 0.5}}}}},
        {"model", {{"hidden", nlohmann::json::array({32, 32})}}},
        {"importance",
         {{"variant", "instmixexp"},
          {"a0", 2.0},
          {"K", 16},
          {"lambda", 0.0},
          {"slope", 0.0},
          {"normalize_ages", true},
          {"renormalize", false}}},
        {"scorer", {{"hidden", nlohmann::json::array({32, 32})}}},
        {"bilevel",
         {{"variant", "alternating"},
          {"L", 5},
          {"alpha", 1e-3},
          {"beta", 1e-2},
          {"neumann_terms", 50},
          {"epochs", 20},
          {"batch_size", 128},
          {"meta_batch_size", 64},
          {"seed", 0},
          {"early_stop_patience", 10}}},
        {"stream",
         {{"n_buckets", 12},
          {"passes_per_bucket", 5},
          {"val_fraction", 0.10},
          {"carry_params", true}}},
        {"compare",
         {{"methods", nlohmann::json::array({"uniform", "exp", "mixexp", "instmixexp"})},
          {"seeds", nlohmann::json::array()},
          {"n_windows", 10},
          {"baseline", "uniform"}}},
        {"eval", {{"n_windows", 10}}}};
}

// Optional keys that are valid but absent from the defaults document.
inline const std::vector<std::string>& optional_config_keys() {
    static const std::vector<std::string> keys = {"data.synthetic.seed", "scorer.seed"};
    return keys;
}

inline void check_known_keys(const nlohmann::json& doc, const nlohmann::json& schema,
                             const std::string& prefix) {
    for (const auto& [key, value] : doc.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!schema.contains(key)) {
            const auto& extras = optional_config_keys();
            if (std::find(extras.begin(), extras.end(), path) == extras.end()) {
                throw ConfigError("unknown config key '" + path + "'");
            }
            continue;
        }
        if (value.is_object() && schema.at(key).is_object()) {
            check_known_keys(value, schema.at(key), path);
        }
    }
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& overlay) {
    for (const auto& [key, value] : overlay.items()) {
        if (value.is_object() && base.contains(key) && base.at(key).is_object()) {
            merge_into(base.at(key), value);
        } else {
            base[key] = value;
        }
    }
}

}  // namespace detail

inline Task task_from_name(const std::string& name) {
    if (name == "classification") return Task::classification;
    if (name == "regression") return Task::regression;
    throw ConfigError("unknown task '" + name + "'");
}

inline std::string task_name(Task task) {
    return task == Task::classification ? "classification" : "regression";
}

// Builds the typed config from a resolved JSON document.
inline RunConfig config_from_json(nlohmann::json resolved) {
    detail::check_known_keys(resolved, detail::config_defaults(), "");
    nlohmann::json doc = detail::config_defaults();
    detail::merge_into(doc, resolved);

    RunConfig cfg;
    try {
        const auto& run = doc.at("run");
        cfg.run_name = run.at("name").get<std::string>();
        cfg.out_dir = run.at("out_dir").get<std::string>();

        const auto& data = doc.at("data");
        cfg.data_source = data.at("source").get<std::string>();
        if (cfg.data_source != "synthetic" && cfg.data_source != "csv") {
            throw ConfigError("data.source must be 'synthetic' or 'csv'");
        }
        cfg.data_path = data.at("path").get<std::string>();
        cfg.csv_schema.timestamp_col = data.at("timestamp_col").get<std::string>();
        cfg.csv_schema.label_col = data.at("label_col").get<std::string>();
        cfg.csv_schema.feature_cols = data.at("feature_cols").get<std::vector<std::string>>();
        cfg.task = task_from_name(data.at("task").get<std::string>());
        cfg.train_frac = data.at("train_frac").get<double>();
        cfg.val_frac = data.at("val_frac").get<double>();

        const auto& syn = data.at("synthetic");
        cfg.synthetic_kind = synthetic_kind_from_name(syn.at("kind").get<std::string>());
        cfg.synthetic.n = syn.at("n").get<int>();
        cfg.synthetic.time_span = syn.at("time_span").get<double>();
        cfg.synthetic.omega_fast = syn.at("omega_fast").get<double>();
        cfg.synthetic.omega_slow = syn.at("omega_slow").get<double>();
        cfg.synthetic.sigma = syn.at("sigma").get<double>();
        cfg.synthetic.marker_offset = syn.at("marker_offset").get<double>();
        cfg.synthetic.prior_start = syn.at("prior_start").get<double>();
        cfg.synthetic.prior_end = syn.at("prior_end").get<double>();
        if (syn.contains("seed")) cfg.data_seed = syn.at("seed").get<std::uint64_t>();

        cfg.model_hidden = doc.at("model").at("hidden").get<std::vector<int>>();

        const auto& imp = doc.at("importance");
        cfg.variant = scheme_from_name(imp.at("variant").get<std::string>());
        cfg.basis_a0 = imp.at("a0").get<double>();
        cfg.basis_K = imp.at("K").get<int>();
        cfg.lambda = imp.at("lambda").get<double>();
        cfg.slope = imp.at("slope").get<double>();
        cfg.normalize_ages = imp.at("normalize_ages").get<bool>();
        cfg.renormalize = imp.at("renormalize").get<bool>();

        cfg.scorer_hidden = doc.at("scorer").at("hidden").get<std::vector<int>>();
        if (doc.at("scorer").contains("seed")) {
            cfg.scorer_seed = doc.at("scorer").at("seed").get<std::uint64_t>();
        }

        const auto& bl = doc.at("bilevel");
        cfg.bilevel.variant = bilevel_variant_from_name(bl.at("variant").get<std::string>());
        cfg.bilevel.inner_steps = bl.at("L").get<int>();
        cfg.bilevel.alpha = bl.at("alpha").get<double>();
        cfg.bilevel.beta = bl.at("beta").get<double>();
        cfg.bilevel.neumann_terms = bl.at("neumann_terms").get<int>();
        cfg.bilevel.epochs = bl.at("epochs").get<int>();
        cfg.bilevel.batch_size = bl.at("batch_size").get<int>();
        cfg.bilevel.meta_batch_size = bl.at("meta_batch_size").get<int>();
        cfg.bilevel.seed = bl.at("seed").get<std::uint64_t>();
        cfg.bilevel.early_stop_patience = bl.at("early_stop_patience").get<int>();
        cfg.bilevel.renormalize_weights = cfg.renormalize;

        const auto& st = doc.at("stream");
        cfg.stream.n_buckets = st.at("n_buckets").get<std::size_t>();
        cfg.stream.passes_per_bucket = st.at("passes_per_bucket").get<int>();
        cfg.stream.val_fraction = st.at("val_fraction").get<double>();
        cfg.stream.carry_params = st.at("carry_params").get<bool>();
        cfg.stream.bilevel = cfg.bilevel;

        const auto& cmp = doc.at("compare");
        cfg.compare_methods_list = cmp.at("methods").get<std::vector<std::string>>();
        cfg.compare_seeds = cmp.at("seeds").get<std::vector<std::uint64_t>>();
        cfg.curve_windows = cmp.at("n_windows").get<std::size_t>();
        cfg.baseline = cmp.at("baseline").get<std::string>();
        if (doc.at("eval").contains("n_windows") && !doc.at("compare").contains("n_windows")) {
            cfg.curve_windows = doc.at("eval").at("n_windows").get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& err) {
        throw ConfigError(std::string("malformed config: ") + err.what());
    }

    cfg.resolved = std::move(doc);
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& err) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + err.what());
    }
    return config_from_json(std::move(doc));
}

inline std::string config_fingerprint(const RunConfig& cfg) {
    const std::string dump = cfg.resolved.dump();
    return detail::hex64(detail::fnv1a(0xcbf29ce484222325ULL, dump.data(), dump.size()));
}

// Loads or generates the dataset named by the config.
inline TemporalDataset load_dataset(const RunConfig& cfg) {
    if (cfg.data_source == "csv") {
        if (cfg.data_path.empty()) throw ConfigError("data.path required for csv source");
        return load_timestamped_csv(cfg.data_path, cfg.csv_schema, cfg.task);
    }
    TemporalDataset ds =
        generate_synthetic(cfg.synthetic_kind, cfg.synthetic, cfg.effective_data_seed());
    ds.task = cfg.task;
    return ds;
}

// Importance model as configured (scorer seeded and sized for the data).
inline ImportanceModel build_importance_model(const RunConfig& cfg, int feature_dim) {
    ImportanceModel model = make_importance(cfg.variant, make_basis(cfg.basis_a0, cfg.basis_K));
    model.lambda = cfg.lambda;
    model.slope = cfg.slope;
    if (cfg.variant == WeightScheme::mix_exp) {
        model.z.assign(static_cast<std::size_t>(cfg.basis_K),
                       1.0 / static_cast<double>(cfg.basis_K));
    }
    if (scheme_uses_scorer(cfg.variant)) {
        const int in_dim =
            cfg.variant == WeightScheme::inst_time ? feature_dim + 1 : feature_dim;
        const int out_dim = cfg.variant == WeightScheme::inst_mix_exp ? cfg.basis_K : 1;
        model.scorer = scorer_init(in_dim, out_dim, cfg.scorer_hidden, cfg.effective_scorer_seed());
    }
    model.validate();
    return model;
}

}  // namespace driftweight
