#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "driftweight/bilevel.hpp"
#include "driftweight/data.hpp"
#include "driftweight/errors.hpp"
#include "driftweight/harness.hpp"
#include "driftweight/timescale.hpp"

namespace driftweight {

struct StreamConfig {
    std::size_t n_buckets = 12;
    int passes_per_bucket = 5;
    double val_fraction = 0.10;
    bool carry_params = true;
    BilevelConfig bilevel;

    void validate() const {
        if (n_buckets < 2) throw ConfigError("stream.n_buckets must be >= 2");
        if (passes_per_bucket < 1) throw ConfigError("stream.passes_per_bucket must be >= 1");
        if (!(val_fraction > 0.0) || val_fraction >= 0.5) {
            throw ConfigError("stream.val_fraction must lie in (0, 0.5)");
        }
    }
};

struct BucketRecord {
    int bucket = 0;
    double t_start = 0.0;
    double t_end = 0.0;
    std::size_t n = 0;
    // Metric on this bucket before training touched it (forward transfer).
    double pre_metric = 0.0;
    // Metric on this bucket after its k training passes.
    double post_metric = 0.0;
    double final_val_loss = 0.0;
    double weight_mean = 0.0;
    double weight_std = 0.0;
};

struct StreamResult {
    std::vector<BucketRecord> records;
    ModelParams theta;
    ImportanceModel model;
};

// Sequential continual-learning pass over equal-count time buckets.
//
// For each bucket: evaluate the incoming parameters on it first, then train
// for `passes_per_bucket` epochs with the newest `val_fraction` slice as the
// meta/validation set, ages normalized to the bucket's own span. Scorer
// parameters always persist across buckets; model parameters are carried or
// reinitialized per `carry_params`. Uniform weighting trains on the whole
// bucket, mirroring the baseline protocol that gives non-meta methods the
// validation slice as extra training data.
inline StreamResult stream_train(const TemporalDataset& dataset, const ImportanceModel& model0,
                                 ModelParams theta0, const StreamConfig& cfg) {
    cfg.validate();
    cfg.bilevel.validate();
    model0.validate();
    dataset.validate();
    const Task task = dataset.task;

    const auto buckets = bucketize(dataset, cfg.n_buckets);
    for (const auto& b : buckets) {
        const auto n_val = static_cast<std::size_t>(
            std::floor(cfg.val_fraction * static_cast<double>(b.size())));
        if (n_val == 0 || n_val >= b.size()) {
            throw ConfigError("stream: bucket of size " + std::to_string(b.size()) +
                              " is too small to split off a validation slice");
        }
    }

    StreamResult out;
    out.theta = theta0;
    out.model = model0;

    for (std::size_t bi = 0; bi < buckets.size(); ++bi) {
        const TemporalDataset& bucket = buckets[bi];
        BucketRecord rec;
        rec.bucket = static_cast<int>(bi);
        rec.t_start = bucket.t_begin();
        rec.t_end = bucket.t_end();
        rec.n = bucket.size();
        // Forward transfer: the parameters in hand when this bucket arrives.
        rec.pre_metric = evaluate_metric(out.theta, bucket);

        const auto n_val = static_cast<std::size_t>(
            std::floor(cfg.val_fraction * static_cast<double>(bucket.size())));
        const std::size_t n_train = bucket.size() - n_val;
        const TemporalDataset val = bucket.slice(n_train, bucket.size());
        const bool uniform = model0.scheme == WeightScheme::uniform;
        const TemporalDataset train = uniform ? bucket : bucket.slice(0, n_train);

        // Ages are normalized within the bucket span, so reweighting only
        // operates over the bucket's own time range.
        const AgeNormalizer normalizer = make_normalizer(bucket.t_begin(), bucket.t_end());

        BilevelConfig bcfg = cfg.bilevel;
        bcfg.epochs = cfg.passes_per_bucket;
        bcfg.early_stop_patience = cfg.passes_per_bucket + 1;  // fixed pass count, no early stop
        bcfg.seed = split_seed(cfg.bilevel.seed, "bucket", bi);
        // Baseline parity: uniform trains on 100% of the bucket while meta
        // methods train on the oldest 90% and use the rest as the meta-set.
        bcfg.allow_train_val_overlap = uniform;

        ModelParams start = cfg.carry_params ? out.theta : theta0;
        BilevelResult result = train_bilevel(std::move(start), out.model, train, val, normalizer, bcfg);

        out.theta = result.theta;
        out.model = result.model;  // scorer persists across buckets

        rec.post_metric = evaluate_metric(out.theta, bucket);
        rec.final_val_loss = result.history.epochs.back().val_loss;
        rec.weight_mean = result.history.epochs.back().weight_mean;
        rec.weight_std = result.history.epochs.back().weight_std;
        out.records.push_back(rec);
    }
    return out;
}

// Mean of the pre-training (forward transfer) metric over buckets 1..B-1;
// bucket 0 is excluded because its incoming parameters are untrained.
inline double mean_forward_transfer(const StreamResult& result) {
    if (result.records.size() < 2) throw ConfigError("need at least two bucket records");
    double s = 0.0;
    for (std::size_t i = 1; i < result.records.size(); ++i) s += result.records[i].pre_metric;
    return s / static_cast<double>(result.records.size() - 1);
}

inline void to_json(nlohmann::json& j, const BucketRecord& r) {
    j = {{"bucket", r.bucket},        {"t_start", r.t_start},
         {"t_end", r.t_end},          {"n", r.n},
         {"pre_metric", r.pre_metric}, {"post_metric", r.post_metric},
         {"final_val_loss", r.final_val_loss}, {"weight_mean", r.weight_mean},
         {"weight_std", r.weight_std}};
}

inline void from_json(const nlohmann::json& j, BucketRecord& r) {
    j.at("bucket").get_to(r.bucket);
    j.at("t_start").get_to(r.t_start);
    j.at("t_end").get_to(r.t_end);
    j.at("n").get_to(r.n);
    j.at("pre_metric").get_to(r.pre_metric);
    j.at("post_metric").get_to(r.post_metric);
    j.at("final_val_loss").get_to(r.final_val_loss);
    j.at("weight_mean").get_to(r.weight_mean);
    j.at("weight_std").get_to(r.weight_std);
}

}  // namespace driftweight
