#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "driftweight/errors.hpp"
#include "driftweight/matrix.hpp"
#include "driftweight/nn.hpp"
#include "driftweight/scorer.hpp"

namespace driftweight {

// Every importance weight is clamped to at least this floor so that no
// weighting scheme can silently zero out the whole training signal.
inline constexpr double kWeightFloor = 1e-6;

// Fixed exponential decay rates a_k = a0^k, k = 1..K, spanning timescales
// from slow (a0) to fast (a0^K).
struct TimescaleBasis {
    double a0 = 2.0;
    int K = 16;
    std::vector<double> rates;
};

inline TimescaleBasis make_basis(double a0, int K) {
    if (a0 <= 1.0) throw ConfigError("basis a0 must be > 1");
    if (K < 1) throw ConfigError("basis K must be >= 1");
    TimescaleBasis basis;
    basis.a0 = a0;
    basis.K = K;
    basis.rates.resize(static_cast<std::size_t>(K));
    double r = 1.0;
    for (int k = 0; k < K; ++k) {
        r *= a0;
        if (!std::isfinite(r)) throw ConfigError("basis rates overflow; reduce K or a0");
        basis.rates[static_cast<std::size_t>(k)] = r;
    }
    return basis;
}

// [exp(-a_1 age), ..., exp(-a_K age)]; underflow clamps to zero.
inline std::vector<double> basis_eval(const TimescaleBasis& basis, double age) {
    if (!(age >= 0.0) || !std::isfinite(age)) {
        throw ConfigError("basis_eval: age must be finite and non-negative");
    }
    std::vector<double> out(basis.rates.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::exp(-basis.rates[k] * age);
    return out;
}

// Maps a raw timestamp to an age in [0, 1]: (t_end - t) / window. A window of
// 1 with t_end equal to the training-window end gives raw, unnormalized ages.
struct AgeNormalizer {
    double t_end = 0.0;
    double window = 1.0;

    double age(double t) const { return std::max(0.0, (t_end - t) / window); }
};

inline AgeNormalizer make_normalizer(double t_start, double t_end, bool normalize = true) {
    if (!(t_end >= t_start)) throw ConfigError("age normalizer: end before start");
    AgeNormalizer norm;
    norm.t_end = t_end;
    norm.window = normalize ? std::max(t_end - t_start, 1e-30) : 1.0;
    return norm;
}

enum class WeightScheme {
    uniform,
    linear,
    single_exp,
    mix_exp,
    inst,
    inst_time,
    inst_mix_exp,
};

inline bool scheme_uses_scorer(WeightScheme s) {
    return s == WeightScheme::inst || s == WeightScheme::inst_time ||
           s == WeightScheme::inst_mix_exp;
}

inline bool scheme_uses_basis(WeightScheme s) {
    return s == WeightScheme::single_exp || s == WeightScheme::mix_exp ||
           s == WeightScheme::inst_mix_exp;
}

inline std::string scheme_name(WeightScheme s) {
    switch (s) {
        case WeightScheme::uniform: return "uniform";
        case WeightScheme::linear: return "linear";
        case WeightScheme::single_exp: return "exp";
        case WeightScheme::mix_exp: return "mixexp";
        case WeightScheme::inst: return "inst";
        case WeightScheme::inst_time: return "insttime";
        case WeightScheme::inst_mix_exp: return "instmixexp";
    }
    throw ConfigError("unknown weight scheme");
}

inline WeightScheme scheme_from_name(const std::string& name) {
    if (name == "uniform") return WeightScheme::uniform;
    if (name == "linear") return WeightScheme::linear;
    if (name == "exp" || name == "single_exp") return WeightScheme::single_exp;
    if (name == "mixexp" || name == "mix_exp") return WeightScheme::mix_exp;
    if (name == "inst") return WeightScheme::inst;
    if (name == "insttime" || name == "inst_time") return WeightScheme::inst_time;
    if (name == "instmixexp" || name == "inst_mix_exp") return WeightScheme::inst_mix_exp;
    throw ConfigError("unknown importance variant '" + name + "'");
}

// Tagged union over the seven weighting schemes. Only the fields of the
// active variant are meaningful; the scorer is empty for the fixed schemes.
struct ImportanceModel {
    WeightScheme scheme = WeightScheme::uniform;
    TimescaleBasis basis;
    double slope = 0.0;    // linear
    double lambda = 0.0;   // single_exp
    std::vector<double> z; // mix_exp mixing weights, elementwise >= 0
    ScorerParams scorer;   // inst / inst_time / inst_mix_exp

    void validate() const {
        if (scheme == WeightScheme::mix_exp) {
            if (z.size() != basis.rates.size()) {
                throw ConfigError("mix_exp: z length must equal basis size");
            }
            bool any_positive = false;
            for (const double v : z) {
                if (v < 0.0) throw ConfigError("mix_exp: z must be elementwise non-negative");
                if (v > 0.0) any_positive = true;
            }
            if (!any_positive) throw ConfigError("mix_exp: z must have a positive entry");
        }
        if (scheme_uses_scorer(scheme) && scorer.empty()) {
            throw ConfigError(scheme_name(scheme) + ": scorer parameters missing");
        }
        if (scheme == WeightScheme::inst_mix_exp && !scorer.empty() &&
            scorer.output_dim() != static_cast<int>(basis.rates.size())) {
            throw ConfigError("inst_mix_exp: scorer output dim must equal basis size");
        }
    }
};

inline ImportanceModel make_importance(WeightScheme scheme, TimescaleBasis basis = {}) {
    ImportanceModel model;
    model.scheme = scheme;
    model.basis = std::move(basis);
    return model;
}

namespace detail {

inline void check_age(double age) {
    if (!std::isfinite(age) || age < -1e-12) {
        throw ConfigError("importance weight: age must be finite and non-negative");
    }
}

// Scorer input matrix for a batch: raw features, or features with the
// normalized age appended for the inst_time variant.
inline Matrix scorer_inputs(WeightScheme scheme, const Matrix& features,
                            std::span<const double> ages) {
    if (scheme != WeightScheme::inst_time) return features;
    Matrix out(features.rows, features.cols + 1);
    for (std::size_t r = 0; r < features.rows; ++r) {
        const auto src = features.row(r);
        auto dst = out.row(r);
        std::copy(src.begin(), src.end(), dst.begin());
        dst[features.cols] = ages[r];
    }
    return out;
}

}  // namespace detail

// Importance weights for a whole batch; every output is >= kWeightFloor.
inline std::vector<double> importance_weights(const ImportanceModel& model,
                                              const Matrix& features,
                                              std::span<const double> ages) {
    const std::size_t n = features.rows;
    if (ages.size() != n) throw ConfigError("importance weights: ages length mismatch");
    for (const double a : ages) detail::check_age(a);

    std::vector<double> w(n, 1.0);
    switch (model.scheme) {
        case WeightScheme::uniform:
            break;
        case WeightScheme::linear:
            for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 - model.slope * ages[i];
            break;
        case WeightScheme::single_exp:
            for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(-model.lambda * ages[i]);
            break;
        case WeightScheme::mix_exp:
            for (std::size_t i = 0; i < n; ++i) {
                w[i] = dot(model.z, basis_eval(model.basis, ages[i]));
            }
            break;
        case WeightScheme::inst:
        case WeightScheme::inst_time: {
            const Matrix in = detail::scorer_inputs(model.scheme, features, ages);
            const Matrix g = scorer_forward(model.scorer, in);
            for (std::size_t i = 0; i < n; ++i) w[i] = g.at(i, 0);
            break;
        }
        case WeightScheme::inst_mix_exp: {
            const Matrix g = scorer_forward(model.scorer, features);
            for (std::size_t i = 0; i < n; ++i) {
                w[i] = dot(g.row(i), basis_eval(model.basis, ages[i]));
            }
            break;
        }
    }
    for (double& v : w) {
        if (!std::isfinite(v)) throw NumericError("non-finite importance weight");
        v = std::max(v, kWeightFloor);
    }
    return w;
}

// Single-instance weight.
inline double importance_weight(const ImportanceModel& model, std::span<const double> features,
                                double age) {
    Matrix f(1, features.size());
    std::copy(features.begin(), features.end(), f.data.begin());
    const double ages[1] = {age};
    return importance_weights(model, f, ages)[0];
}

// (1/N) sum_i Imp(x_i, age_i) * loss_i. Uniform weights reduce this to the
// plain mean training loss.
inline double weighted_risk(const ModelParams& params, const ImportanceModel& model,
                            const Batch& batch, Task task) {
    if (batch.size() == 0) throw DataError("weighted_risk: empty batch");
    const auto w = importance_weights(model, batch.features, batch.ages);
    const auto losses = per_example_losses(params, batch, task);
    double s = 0.0;
    for (std::size_t i = 0; i < losses.size(); ++i) s += w[i] * losses[i];
    return s / static_cast<double>(losses.size());
}

}  // namespace driftweight
