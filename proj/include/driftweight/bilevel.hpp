#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <tuple>
#include <vector>

#include "driftweight/data.hpp"
#include "driftweight/errors.hpp"
#include "driftweight/matrix.hpp"
#include "driftweight/nn.hpp"
#include "driftweight/rng.hpp"
#include "driftweight/scorer.hpp"
#include "driftweight/timescale.hpp"

namespace driftweight {

enum class BilevelVariant { alternating, implicit };

inline BilevelVariant bilevel_variant_from_name(const std::string& name) {
    if (name == "alternating") return BilevelVariant::alternating;
    if (name == "implicit") return BilevelVariant::implicit;
    throw ConfigError("unknown bilevel variant '" + name + "'");
}

struct BilevelConfig {
    BilevelVariant variant = BilevelVariant::alternating;
    int inner_steps = 5;        // L: model updates per meta update
    double alpha = 1e-3;        // scorer learning rate
    double beta = 1e-2;         // model learning rate
    int neumann_terms = 50;
    int epochs = 20;
    int batch_size = 128;
    int meta_batch_size = 64;
    std::uint64_t seed = 0;
    int early_stop_patience = 10;
    // Keeps the scorer's output-layer weights pinned at their zero init, so
    // only the output bias trains: the instance-conditional scorer collapses
    // to a learned global mixture.
    bool freeze_scorer_output_weights = false;
    // Ablation: rescale each batch's weights to mean 1 before the model step.
    bool renormalize_weights = false;
    // Stream mode only: lets the uniform baseline train on the full bucket
    // even though the validation slice overlaps it.
    bool allow_train_val_overlap = false;

    void validate() const {
        if (inner_steps < 1) throw ConfigError("bilevel.L must be >= 1");
        if (!(alpha >= 0.0)) throw ConfigError("bilevel.alpha must be >= 0");
        if (!(beta > 0.0)) throw ConfigError("bilevel.beta must be > 0");
        if (neumann_terms < 1) throw ConfigError("bilevel.neumann_terms must be >= 1");
        if (epochs < 1) throw ConfigError("bilevel.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("bilevel.batch_size must be >= 1");
        if (meta_batch_size < 1) throw ConfigError("bilevel.meta_batch_size must be >= 1");
        if (early_stop_patience < 1) throw ConfigError("bilevel.early_stop_patience must be >= 1");
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_weighted_risk = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double weight_mean = 0.0;
    double weight_std = 0.0;
    int meta_steps = 0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    int total_meta_steps = 0;
    bool stopped_early = false;
};

namespace detail {

inline void apply_output_weight_mask(const ScorerParams& phi, std::vector<double>& phi_grad) {
    const auto [begin, end] = scorer_output_weight_span(phi);
    std::fill(phi_grad.begin() + static_cast<std::ptrdiff_t>(begin),
              phi_grad.begin() + static_cast<std::ptrdiff_t>(end), 0.0);
}

// Per-instance scorer out-gradients for d w_i / d g: the basis vector for
// mixture schemes, the scalar 1 otherwise; each row scaled by `scale[i]`.
inline Matrix scorer_out_grads(const ImportanceModel& model, std::span<const double> ages,
                               std::span<const double> scale) {
    const std::size_t n = ages.size();
    const std::size_t k = static_cast<std::size_t>(model.scorer.output_dim());
    Matrix out(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        if (model.scheme == WeightScheme::inst_mix_exp) {
            const auto b = basis_eval(model.basis, ages[i]);
            for (std::size_t c = 0; c < k; ++c) out.at(i, c) = scale[i] * b[c];
        } else {
            out.at(i, 0) = scale[i];
        }
    }
    return out;
}

}  // namespace detail

// Hypergradient of the one-step-unrolled validation loss with respect to the
// scorer parameters:
//   d/dphi [ val_loss(theta - beta * grad_theta weighted_risk(train; phi)) ]
// evaluated by the factored form: virtual step, validation gradient at the
// stepped parameters, then per-instance alignment scores fed back through the
// scorer.
inline std::vector<double> alternating_phi_grad(const ModelParams& theta,
                                                const ImportanceModel& model, const Batch& train,
                                                const Batch& val, Task task,
                                                const BilevelConfig& cfg) {
    if (val.size() == 0) throw ConfigError("empty meta-set");
    if (!scheme_uses_scorer(model.scheme)) {
        return std::vector<double>();  // fixed schemes have no scorer parameters
    }

    const auto w = importance_weights(model, train.features, train.ages);
    const auto [train_risk, g_w] = loss_and_grad_weighted(theta, train, task, w);
    (void)train_risk;
    const ModelParams theta_hat = sgd_step(theta, g_w, cfg.beta);

    const std::vector<double> v = grad_mean(theta_hat, val, task);

    const auto per_example = grads_per_example(theta, train, task);
    const std::size_t n = train.size();
    std::vector<double> align(n);
    for (std::size_t i = 0; i < n; ++i) align[i] = dot(v, per_example[i]);

    const Matrix out_grads = detail::scorer_out_grads(model, train.ages, align);
    const Matrix inputs = detail::scorer_inputs(model.scheme, train.features, train.ages);
    std::vector<double> phi_grad = scorer_vjp(model.scorer, inputs, out_grads);

    const double scale = -cfg.beta / static_cast<double>(n);
    for (double& g : phi_grad) g *= scale;
    if (cfg.freeze_scorer_output_weights) detail::apply_output_weight_mask(model.scorer, phi_grad);
    return phi_grad;
}

// One alternating meta update: phi' = phi - alpha * hypergradient.
inline ScorerParams meta_step_alternating(const ModelParams& theta, const ImportanceModel& model,
                                          const Batch& train, const Batch& val, Task task,
                                          const BilevelConfig& cfg) {
    const auto phi_grad = alternating_phi_grad(theta, model, train, val, task, cfg);
    ScorerParams next = model.scorer;
    for (std::size_t i = 0; i < phi_grad.size(); ++i) {
        if (!std::isfinite(phi_grad[i])) throw NumericError("non-finite scorer gradient");
        next.net.values[i] -= cfg.alpha * phi_grad[i];
    }
    return next;
}

// Truncated Neumann series sum_{j<terms} (I - beta H)^j v for an arbitrary
// Hessian-vector product. beta * result approximates H^{-1} v when
// beta * lambda_max(H) < 2. A term norm growing for 5 consecutive iterations
// raises NumericError.
template <typename HvpFn>
std::vector<double> neumann_series_apply(HvpFn&& hvp, std::span<const double> v, double beta,
                                         int terms) {
    if (v.empty()) throw ConfigError("neumann series: empty vector");
    if (terms < 1) throw ConfigError("neumann series: need at least one term");
    std::vector<double> sum(v.begin(), v.end());
    std::vector<double> term(v.begin(), v.end());
    const double initial_norm = norm2(term);
    if (initial_norm == 0.0) return sum;
    double prev_norm = initial_norm;

    int growth_streak = 0;
    for (int j = 1; j < terms; ++j) {
        const std::vector<double> hv = hvp(term);
        for (std::size_t i = 0; i < term.size(); ++i) term[i] -= beta * hv[i];
        const double nrm = norm2(term);
        if (!std::isfinite(nrm)) {
            throw NumericError("neumann series diverged (non-finite term at j=" +
                               std::to_string(j) + "); use a smaller beta");
        }
        growth_streak = nrm > prev_norm ? growth_streak + 1 : 0;
        if (growth_streak >= 5 && nrm > initial_norm) {
            throw NumericError("neumann series diverging (term norm grew for 5 consecutive "
                               "iterations at j=" + std::to_string(j) + "); use a smaller beta");
        }
        prev_norm = nrm;
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += term[i];
        // converged: later terms are numerically irrelevant
        if (nrm <= 1e-9 * initial_norm) break;
    }
    return sum;
}

// Neumann-series inverse-Hessian-vector product against the weighted
// training risk at fixed scorer parameters; Hessian products come from
// central finite differences of the analytic gradient.
inline std::vector<double> neumann_ihvp(const ModelParams& theta, const ImportanceModel& model,
                                        const Batch& train, Task task, std::span<const double> v,
                                        const BilevelConfig& cfg) {
    const auto w = importance_weights(model, train.features, train.ages);
    auto hvp = [&](std::span<const double> u) {
        return hvp_fd(
            [&](const ModelParams& p) { return loss_and_grad_weighted(p, train, task, w).second; },
            theta, u);
    };
    return neumann_series_apply(hvp, v, cfg.beta, cfg.neumann_terms);
}

// Implicit-function-theorem hypergradient at an (approximate) inner optimum:
//   d val / d phi = - g_val^T H^{-1} (d^2 L_tr / d theta d phi^T)
// with H^{-1} g_val approximated by beta * Neumann sum and the mixed partial
// expanded into per-instance gradient/scorer-jacobian products.
inline std::vector<double> meta_grad_implicit(const ModelParams& theta_star,
                                              const ImportanceModel& model, const Batch& train,
                                              const Batch& val, Task task,
                                              const BilevelConfig& cfg) {
    if (val.size() == 0) throw ConfigError("empty meta-set");
    if (!scheme_uses_scorer(model.scheme)) return std::vector<double>();

    const std::vector<double> g_val = grad_mean(theta_star, val, task);
    const std::vector<double> p = neumann_ihvp(theta_star, model, train, task, g_val, cfg);

    const auto per_example = grads_per_example(theta_star, train, task);
    const std::size_t n = train.size();
    std::vector<double> align(n);
    for (std::size_t i = 0; i < n; ++i) align[i] = dot(p, per_example[i]);

    const Matrix out_grads = detail::scorer_out_grads(model, train.ages, align);
    const Matrix inputs = detail::scorer_inputs(model.scheme, train.features, train.ages);
    std::vector<double> phi_grad = scorer_vjp(model.scorer, inputs, out_grads);

    const double scale = -cfg.beta / static_cast<double>(n);
    for (double& g : phi_grad) g *= scale;
    if (cfg.freeze_scorer_output_weights) detail::apply_output_weight_mask(model.scorer, phi_grad);
    return phi_grad;
}

struct BilevelResult {
    ModelParams theta;
    ImportanceModel model;
    TrainHistory history;
};

namespace detail {

// Working copy of the importance model used inside the training loop. A
// trainable mix_exp is reparameterized as a bias-only scorer with frozen
// zero output weights: z = softplus(output bias).
struct TrainingModel {
    ImportanceModel working;
    bool trainable = false;
    bool from_mix_exp = false;
};

inline TrainingModel prepare_training_model(const ImportanceModel& model, int feature_dim,
                                            const BilevelConfig& cfg) {
    TrainingModel tm;
    tm.working = model;
    if (cfg.alpha <= 0.0) return tm;

    if (scheme_uses_scorer(model.scheme)) {
        tm.trainable = true;
        return tm;
    }
    if (model.scheme == WeightScheme::mix_exp) {
        const int k = static_cast<int>(model.basis.rates.size());
        ScorerParams phi = scorer_init(feature_dim, k, {}, /*seed=*/0);
        const auto [w_begin, w_end] = scorer_output_weight_span(phi);
        for (std::size_t i = w_begin; i < w_end; ++i) phi.net.values[i] = 0.0;
        for (int c = 0; c < k; ++c) {
            const double zc = std::max(model.z[static_cast<std::size_t>(c)], kWeightFloor);
            phi.net.values[w_end + static_cast<std::size_t>(c)] = softplus_inv(zc);
        }
        tm.working.scheme = WeightScheme::inst_mix_exp;
        tm.working.scorer = std::move(phi);
        tm.working.z.clear();
        tm.trainable = true;
        tm.from_mix_exp = true;
    }
    return tm;
}

inline ImportanceModel finalize_training_model(const TrainingModel& tm,
                                               const ImportanceModel& original) {
    if (!tm.from_mix_exp) return tm.working;
    ImportanceModel out = original;
    const auto [w_begin, w_end] = scorer_output_weight_span(tm.working.scorer);
    (void)w_begin;
    const int k = tm.working.scorer.output_dim();
    out.z.resize(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
        out.z[static_cast<std::size_t>(c)] =
            softplus(tm.working.scorer.net.values[w_end + static_cast<std::size_t>(c)]);
    }
    return out;
}

inline Batch gather_batch(const TemporalDataset& ds, std::span<const std::size_t> idx,
                          std::span<const double> ages) {
    Batch batch;
    batch.features = Matrix(idx.size(), ds.dim());
    batch.labels.resize(idx.size());
    batch.ages.resize(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto src = ds.features.row(idx[r]);
        std::copy(src.begin(), src.end(), batch.features.row(r).begin());
        batch.labels[r] = ds.labels[idx[r]];
        batch.ages[r] = ages.empty() ? 0.0 : ages[idx[r]];
    }
    return batch;
}

inline std::pair<double, double> mean_std(std::span<const double> v) {
    double mean = 0.0;
    for (const double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (const double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    return {mean, std::sqrt(var)};
}

}  // namespace detail

// Nested (theta, phi) training: SGD on the weighted risk, one meta update to
// the scorer every `inner_steps` model updates. Deterministic per seed; with
// a non-trainable scheme the loop degrades to plain weighted SGD. Returns the
// parameters from the best-validation epoch.
inline BilevelResult train_bilevel(ModelParams theta, const ImportanceModel& model0,
                                   const TemporalDataset& train, const TemporalDataset& val,
                                   const AgeNormalizer& normalizer, const BilevelConfig& cfg) {
    cfg.validate();
    model0.validate();
    train.validate();
    val.validate();
    if (!cfg.allow_train_val_overlap && train.t_end() > val.t_begin()) {
        throw ConfigError("validation data must be strictly newer than training data");
    }
    const Task task = train.task;

    const std::size_t n = train.size();
    std::vector<double> train_ages(n);
    for (std::size_t i = 0; i < n; ++i) train_ages[i] = normalizer.age(train.timestamps[i]);

    detail::TrainingModel tm = detail::prepare_training_model(model0, static_cast<int>(train.dim()), cfg);
    BilevelConfig run_cfg = cfg;
    if (tm.from_mix_exp) run_cfg.freeze_scorer_output_weights = true;

    Rng rng_batch(split_seed(cfg.seed, "batch-order"));
    Rng rng_meta(split_seed(cfg.seed, "meta-batch"));
    Rng rng_meta_train(split_seed(cfg.seed, "meta-train-batch"));

    const Batch full_train = to_batch(train, train_ages);
    const Batch full_val = to_batch(val);

    BilevelResult best;
    best.theta = theta;
    best.model = detail::finalize_training_model(tm, model0);
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;

    TrainHistory history;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    long long step_counter = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng_batch.shuffle(order);
        double risk_sum = 0.0;
        int meta_steps = 0;

        for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg.batch_size));
            const Batch batch = detail::gather_batch(
                train, std::span(order).subspan(begin, end - begin), train_ages);

            if (tm.trainable && step_counter % cfg.inner_steps == 0) {
                const auto val_idx = rng_meta.sample_indices(
                    val.size(), static_cast<std::size_t>(cfg.meta_batch_size));
                const Batch meta_val = detail::gather_batch(val, val_idx, {});
                if (run_cfg.variant == BilevelVariant::alternating) {
                    tm.working.scorer =
                        meta_step_alternating(theta, tm.working, batch, meta_val, task, run_cfg);
                } else {
                    const auto train_idx = rng_meta_train.sample_indices(
                        n, static_cast<std::size_t>(cfg.batch_size));
                    const Batch meta_train = detail::gather_batch(train, train_idx, train_ages);
                    const auto phi_grad =
                        meta_grad_implicit(theta, tm.working, meta_train, meta_val, task, run_cfg);
                    for (std::size_t i = 0; i < phi_grad.size(); ++i) {
                        if (!std::isfinite(phi_grad[i])) {
                            throw NumericError("non-finite scorer gradient (implicit)");
                        }
                        tm.working.scorer.net.values[i] -= cfg.alpha * phi_grad[i];
                    }
                }
                ++meta_steps;
            }

            auto w = importance_weights(tm.working, batch.features, batch.ages);
            if (cfg.renormalize_weights) {
                double mean = 0.0;
                for (const double x : w) mean += x;
                mean /= static_cast<double>(w.size());
                for (double& x : w) x /= mean;
            }
            try {
                const auto [wl, grad] = loss_and_grad_weighted(theta, batch, task, w);
                risk_sum += wl * static_cast<double>(batch.size());
                theta = sgd_step(theta, grad, cfg.beta);
            } catch (const NumericError& err) {
                throw NumericError("epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(begin / cfg.batch_size) + ": " + err.what());
            }
            ++step_counter;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_weighted_risk = risk_sum / static_cast<double>(n);
        rec.train_loss = loss_eval(theta, full_train, task);
        rec.val_loss = loss_eval(theta, full_val, task);
        const auto w_all = importance_weights(tm.working, full_train.features, full_train.ages);
        std::tie(rec.weight_mean, rec.weight_std) = detail::mean_std(w_all);
        rec.meta_steps = meta_steps;
        if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss)) {
            throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
        }
        history.epochs.push_back(rec);
        history.total_meta_steps += meta_steps;

        if (rec.val_loss < best_val) {
            best_val = rec.val_loss;
            best.theta = theta;
            best.model = detail::finalize_training_model(tm, model0);
            history.best_epoch = epoch;
            epochs_since_best = 0;
        } else if (++epochs_since_best >= cfg.early_stop_patience) {
            history.stopped_early = true;
            break;
        }
    }

    best.history = std::move(history);
    return best;
}

}  // namespace driftweight
