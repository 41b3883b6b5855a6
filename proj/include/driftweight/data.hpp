#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "driftweight/errors.hpp"
#include "driftweight/matrix.hpp"
#include "driftweight/nn.hpp"

namespace driftweight {

// Timestamped instances, sorted non-decreasing by timestamp. Column layout
// mirrors Batch so slices convert cheaply.
struct TemporalDataset {
    Matrix features;
    std::vector<double> labels;
    std::vector<double> timestamps;
    Task task = Task::classification;

    std::size_t size() const { return features.rows; }
    std::size_t dim() const { return features.cols; }
    double t_begin() const { return timestamps.front(); }
    double t_end() const { return timestamps.back(); }

    TemporalDataset slice(std::size_t begin, std::size_t end) const {
        TemporalDataset out;
        out.task = task;
        out.features = features.take_rows(begin, end);
        out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                          labels.begin() + static_cast<std::ptrdiff_t>(end));
        out.timestamps.assign(timestamps.begin() + static_cast<std::ptrdiff_t>(begin),
                              timestamps.begin() + static_cast<std::ptrdiff_t>(end));
        return out;
    }

    void validate() const {
        if (size() == 0) throw DataError("dataset is empty");
        if (labels.size() != size() || timestamps.size() != size()) {
            throw DataError("dataset columns have inconsistent lengths");
        }
        for (const double t : timestamps) {
            if (!std::isfinite(t)) throw DataError("non-finite timestamp");
        }
        if (!std::is_sorted(timestamps.begin(), timestamps.end())) {
            throw DataError("dataset is not sorted by timestamp");
        }
        if (!features.all_finite()) throw DataError("non-finite feature value");
    }

    // Stable sort by timestamp keeping file order within ties.
    void sort_by_time() {
        std::vector<std::size_t> order(size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return timestamps[a] < timestamps[b];
        });
        Matrix f(features.rows, features.cols);
        std::vector<double> l(size()), t(size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            const auto src = features.row(order[i]);
            std::copy(src.begin(), src.end(), f.row(i).begin());
            l[i] = labels[order[i]];
            t[i] = timestamps[order[i]];
        }
        features = std::move(f);
        labels = std::move(l);
        timestamps = std::move(t);
    }
};

enum class SyntheticKind { rotating_boundary, label_drift, two_timescale };

inline SyntheticKind synthetic_kind_from_name(const std::string& name) {
    if (name == "rotating_boundary") return SyntheticKind::rotating_boundary;
    if (name == "label_drift") return SyntheticKind::label_drift;
    if (name == "two_timescale") return SyntheticKind::two_timescale;
    throw ConfigError("unknown synthetic kind '" + name + "'");
}

inline std::string synthetic_kind_name(SyntheticKind k) {
    switch (k) {
        case SyntheticKind::rotating_boundary: return "rotating_boundary";
        case SyntheticKind::label_drift: return "label_drift";
        case SyntheticKind::two_timescale: return "two_timescale";
    }
    throw ConfigError("unknown synthetic kind");
}

struct SyntheticParams {
    int n = 32000;
    double time_span = 8.0;      // timestamps are index/n scaled to [0, time_span)
    double omega_fast = 1.0;     // boundary rotation, rad per time unit
    double omega_slow = 0.0;     // second subpopulation (two_timescale only)
    double sigma = 0.0;          // Gaussian feature noise
    double marker_offset = 3.0;  // subpopulation center offset (two_timescale)
    double prior_start = 0.5;    // P(y=1) at t=0 (label_drift)
    double prior_end = 0.5;      // P(y=1) at t=time_span (label_drift)

    void validate() const {
        if (n < 1) throw ConfigError("synthetic: n must be >= 1");
        if (!(time_span > 0.0)) throw ConfigError("synthetic: time_span must be positive");
        if (sigma < 0.0) throw ConfigError("synthetic: sigma must be >= 0");
        if (prior_start < 0.0 || prior_start > 1.0 || prior_end < 0.0 || prior_end > 1.0) {
            throw ConfigError("synthetic: class priors must lie in [0, 1]");
        }
    }
};

namespace detail {

// Label from a halfplane whose normal points at `angle`: the offset-free
// point decides, feature noise is added only to the observed coordinates.
inline double rotating_label(double angle, double px, double py) {
    return std::cos(angle) * px + std::sin(angle) * py > 0.0 ? 1.0 : 0.0;
}

}  // namespace detail

// Deterministic synthetic concept-drift streams; timestamps are the instance
// index scaled to [0, time_span).
inline TemporalDataset generate_synthetic(SyntheticKind kind, const SyntheticParams& params,
                                          std::uint64_t seed) {
    params.validate();
    Rng rng(split_seed(seed, "synthetic"));
    const std::size_t n = static_cast<std::size_t>(params.n);

    TemporalDataset ds;
    ds.task = Task::classification;
    ds.features = Matrix(n, 2);
    ds.labels.resize(n);
    ds.timestamps.resize(n);

    for (std::size_t i = 0; i < n; ++i) {
        const double t = params.time_span * static_cast<double>(i) / static_cast<double>(n);
        ds.timestamps[i] = t;
        switch (kind) {
            case SyntheticKind::rotating_boundary: {
                const double px = rng.normal();
                const double py = rng.normal();
                ds.labels[i] = detail::rotating_label(params.omega_fast * t, px, py);
                ds.features.at(i, 0) = px + params.sigma * rng.normal();
                ds.features.at(i, 1) = py + params.sigma * rng.normal();
                break;
            }
            case SyntheticKind::two_timescale: {
                const bool fast = rng.bernoulli(0.5);
                const double center = fast ? params.marker_offset : -params.marker_offset;
                const double omega = fast ? params.omega_fast : params.omega_slow;
                const double px = rng.normal();
                const double py = rng.normal();
                ds.labels[i] = detail::rotating_label(omega * t, px, py);
                ds.features.at(i, 0) = center + px + params.sigma * rng.normal();
                ds.features.at(i, 1) = py + params.sigma * rng.normal();
                break;
            }
            case SyntheticKind::label_drift: {
                const double frac = t / params.time_span;
                const double p1 = params.prior_start + (params.prior_end - params.prior_start) * frac;
                const double y = rng.bernoulli(p1) ? 1.0 : 0.0;
                const double mu = y > 0.5 ? 1.0 : -1.0;
                ds.features.at(i, 0) = mu + (1.0 + params.sigma) * rng.normal();
                ds.features.at(i, 1) = rng.normal();
                ds.labels[i] = y;
                break;
            }
        }
    }
    ds.validate();
    return ds;
}

// Column binding for timestamped CSV ingestion. A feature column entry
// ending in '*' matches every header with that prefix, in file order.
struct CsvSchema {
    std::string timestamp_col = "timestamp";
    std::string label_col = "label";
    std::vector<std::string> feature_cols = {"x*"};
};

namespace detail {

inline double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
    double value = 0.0;
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
    while (end > begin && (*(end - 1) == ' ' || *(end - 1) == '\t' || *(end - 1) == '\r')) --end;
    const auto res = std::from_chars(begin, end, value);
    if (res.ec != std::errc{} || res.ptr != end) {
        throw DataError("row " + std::to_string(row) + ": non-numeric value '" + cell +
                        "' in column '" + col + "'");
    }
    return value;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace detail

// Reads a header-first CSV, validates against the schema, and returns the
// dataset sorted by timestamp. Rows are numbered from 1 (first data row).
inline TemporalDataset load_timestamped_csv(const std::string& path, const CsvSchema& schema,
                                            Task task = Task::classification) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
    const auto header = detail::split_csv_line(line);

    auto find_col = [&](const std::string& name) -> std::size_t {
        for (std::size_t i = 0; i < header.size(); ++i) {
            std::string h = header[i];
            if (!h.empty() && h.back() == '\r') h.pop_back();
            if (h == name) return i;
        }
        throw DataError("'" + path + "': missing column '" + name + "'");
    };

    const std::size_t ts_col = find_col(schema.timestamp_col);
    const std::size_t label_col = find_col(schema.label_col);
    std::vector<std::size_t> feat_idx;
    std::vector<std::string> feat_names;
    for (const auto& spec : schema.feature_cols) {
        if (!spec.empty() && spec.back() == '*') {
            const std::string prefix = spec.substr(0, spec.size() - 1);
            bool any = false;
            for (std::size_t i = 0; i < header.size(); ++i) {
                std::string h = header[i];
                if (!h.empty() && h.back() == '\r') h.pop_back();
                if (h.rfind(prefix, 0) == 0 && i != ts_col && i != label_col) {
                    feat_idx.push_back(i);
                    feat_names.push_back(h);
                    any = true;
                }
            }
            if (!any) throw DataError("'" + path + "': no columns match '" + spec + "'");
        } else {
            feat_idx.push_back(find_col(spec));
            feat_names.push_back(spec);
        }
    }
    if (feat_idx.empty()) throw DataError("'" + path + "': schema names no feature columns");

    std::vector<double> ts, labels, feats;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw DataError("row " + std::to_string(row) + ": expected " +
                            std::to_string(header.size()) + " cells, got " +
                            std::to_string(cells.size()));
        }
        ts.push_back(detail::parse_cell(cells[ts_col], row, schema.timestamp_col));
        labels.push_back(detail::parse_cell(cells[label_col], row, schema.label_col));
        for (std::size_t f = 0; f < feat_idx.size(); ++f) {
            feats.push_back(detail::parse_cell(cells[feat_idx[f]], row, feat_names[f]));
        }
    }
    if (row == 0) throw DataError("'" + path + "' has a header but no data rows");

    TemporalDataset ds;
    ds.task = task;
    ds.features = Matrix(row, feat_idx.size());
    ds.features.data = std::move(feats);
    ds.labels = std::move(labels);
    ds.timestamps = std::move(ts);
    ds.sort_by_time();
    ds.validate();
    return ds;
}

// Contiguous time-ordered partition of one dataset.
struct TemporalSplit {
    TemporalDataset train;
    TemporalDataset val;
    TemporalDataset test;
    double t_train_end = 0.0;
    double t_val_end = 0.0;
};

inline TemporalSplit temporal_split(const TemporalDataset& ds, double train_frac,
                                    double val_frac) {
    if (!(train_frac > 0.0) || !(val_frac > 0.0) || train_frac + val_frac >= 1.0) {
        throw ConfigError("split fractions must be positive and sum below 1");
    }
    const std::size_t n = ds.size();
    const auto n_train = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::floor(val_frac * static_cast<double>(n)));
    if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
        throw ConfigError("split produces an empty part (n = " + std::to_string(n) + ")");
    }
    TemporalSplit split;
    split.train = ds.slice(0, n_train);
    split.val = ds.slice(n_train, n_train + n_val);
    split.test = ds.slice(n_train + n_val, n);
    split.t_train_end = split.train.t_end();
    split.t_val_end = split.val.t_end();
    return split;
}

// Contiguous equal-count buckets in time order; the last takes the remainder.
inline std::vector<TemporalDataset> bucketize(const TemporalDataset& ds, std::size_t n_buckets) {
    if (n_buckets < 1) throw ConfigError("bucketize: need at least one bucket");
    if (n_buckets > ds.size()) {
        throw ConfigError("bucketize: more buckets than instances (" +
                          std::to_string(n_buckets) + " > " + std::to_string(ds.size()) + ")");
    }
    const std::size_t base = ds.size() / n_buckets;
    std::vector<TemporalDataset> buckets;
    buckets.reserve(n_buckets);
    for (std::size_t b = 0; b < n_buckets; ++b) {
        const std::size_t begin = b * base;
        const std::size_t end = (b + 1 == n_buckets) ? ds.size() : begin + base;
        buckets.push_back(ds.slice(begin, end));
    }
    return buckets;
}

// Batch view of a dataset with precomputed ages.
inline Batch to_batch(const TemporalDataset& ds, const std::vector<double>& ages = {}) {
    Batch batch;
    batch.features = ds.features;
    batch.labels = ds.labels;
    batch.ages = ages;
    return batch;
}

}  // namespace driftweight
