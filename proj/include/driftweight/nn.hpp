#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "driftweight/errors.hpp"
#include "driftweight/matrix.hpp"
#include "driftweight/rng.hpp"

namespace driftweight {

enum class Task { classification, regression };

enum class HiddenActivation { relu, tanh };

// Dense feed-forward network parameters as one flat vector.
//
// Layout, layer-major: for each layer l = 0..L-2 the weight matrix
// W_l [size_{l+1} x size_l] in row-major order, immediately followed by the
// bias b_l [size_{l+1}]. Hidden layers use the configured activation; the
// output layer is always linear (softmax lives inside the classification
// loss).
struct ModelParams {
    std::vector<int> layer_sizes;
    HiddenActivation activation = HiddenActivation::relu;
    std::vector<double> values;

    int input_dim() const { return layer_sizes.front(); }
    int output_dim() const { return layer_sizes.back(); }
    std::size_t n_layers() const { return layer_sizes.size() - 1; }

    bool all_finite() const {
        return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
    }
};

inline std::size_t param_count(const std::vector<int>& layer_sizes) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
        n += static_cast<std::size_t>(layer_sizes[l]) * layer_sizes[l + 1] + layer_sizes[l + 1];
    }
    return n;
}

// Offset of layer l's weight block in the flat vector.
inline std::size_t layer_offset(const std::vector<int>& layer_sizes, std::size_t l) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < l; ++k) {
        off += static_cast<std::size_t>(layer_sizes[k]) * layer_sizes[k + 1] + layer_sizes[k + 1];
    }
    return off;
}

// A batch of instances. `ages` is the training-window-relative age of each
// instance (newest ~ 0); it may be empty for batches that are only evaluated.
struct Batch {
    Matrix features;
    std::vector<double> labels;
    std::vector<double> ages;

    std::size_t size() const { return features.rows; }
};

inline void validate_net_input(const ModelParams& params, const Matrix& features) {
    if (features.cols != static_cast<std::size_t>(params.input_dim())) {
        throw ConfigError("feature dimension " + std::to_string(features.cols) +
                          " does not match network input dimension " +
                          std::to_string(params.input_dim()));
    }
    if (!features.all_finite()) throw NumericError("non-finite feature value");
}

// Seeded initialization: W ~ uniform(-scale/sqrt(fan_in), +scale/sqrt(fan_in)),
// biases zero. Identical (sizes, seed, scale) give bit-identical parameters.
inline ModelParams mlp_init(const std::vector<int>& layer_sizes, std::uint64_t seed,
                            double scale = 1.0,
                            HiddenActivation activation = HiddenActivation::relu) {
    if (layer_sizes.size() < 2) throw ConfigError("network needs at least two layer sizes");
    for (const int s : layer_sizes) {
        if (s <= 0) throw ConfigError("layer sizes must be positive");
    }
    if (scale <= 0.0) throw ConfigError("init scale must be positive");

    ModelParams params;
    params.layer_sizes = layer_sizes;
    params.activation = activation;
    params.values.assign(param_count(layer_sizes), 0.0);

    Rng rng(split_seed(seed, "mlp-init"));
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
        const int fan_in = layer_sizes[l];
        const int fan_out = layer_sizes[l + 1];
        const double bound = scale / std::sqrt(static_cast<double>(fan_in));
        for (int i = 0; i < fan_out * fan_in; ++i) {
            params.values[off++] = rng.uniform(-bound, bound);
        }
        off += static_cast<std::size_t>(fan_out);  // biases stay zero
    }
    return params;
}

namespace detail {

inline double activate(double x, HiddenActivation a) {
    return a == HiddenActivation::relu ? (x > 0.0 ? x : 0.0) : std::tanh(x);
}

inline double activate_grad(double pre, HiddenActivation a) {
    if (a == HiddenActivation::relu) return pre > 0.0 ? 1.0 : 0.0;
    const double t = std::tanh(pre);
    return 1.0 - t * t;
}

// Activations of every layer; acts[0] is the input, acts.back() the logits.
// pre[l] holds pre-activations of layer l+1 (needed for hidden derivatives).
struct ForwardTrace {
    std::vector<Matrix> acts;
    std::vector<Matrix> pre;
};

inline ForwardTrace forward_trace(const ModelParams& params, const Matrix& features) {
    validate_net_input(params, features);
    const auto& sizes = params.layer_sizes;
    const std::size_t n = features.rows;

    ForwardTrace trace;
    trace.acts.reserve(sizes.size());
    trace.pre.reserve(sizes.size() - 1);
    trace.acts.push_back(features);

    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const int in_dim = sizes[l];
        const int out_dim = sizes[l + 1];
        const double* w = params.values.data() + off;
        const double* b = w + static_cast<std::size_t>(out_dim) * in_dim;

        Matrix z(n, static_cast<std::size_t>(out_dim));
        const Matrix& a = trace.acts.back();
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = a.data.data() + r * a.cols;
            double* zr = z.data.data() + r * z.cols;
            for (int o = 0; o < out_dim; ++o) {
                const double* wo = w + static_cast<std::size_t>(o) * in_dim;
                double s = b[o];
                for (int i = 0; i < in_dim; ++i) s += wo[i] * x[i];
                zr[o] = s;
            }
        }

        const bool last = (l + 2 == sizes.size());
        Matrix a_next = z;
        if (!last) {
            for (double& v : a_next.data) v = activate(v, params.activation);
        }
        trace.pre.push_back(std::move(z));
        trace.acts.push_back(std::move(a_next));
        off += static_cast<std::size_t>(out_dim) * in_dim + out_dim;
    }
    return trace;
}

// Accumulates the parameter gradient given output-layer deltas (one row per
// example, any caller-chosen scaling already applied).
inline std::vector<double> backprop_from_deltas(const ModelParams& params,
                                                const ForwardTrace& trace, Matrix delta) {
    const auto& sizes = params.layer_sizes;
    std::vector<double> grad(params.values.size(), 0.0);
    const std::size_t n = delta.rows;

    for (std::size_t l = sizes.size() - 1; l-- > 0;) {
        const int in_dim = sizes[l];
        const int out_dim = sizes[l + 1];
        const std::size_t off = layer_offset(sizes, l);
        double* gw = grad.data() + off;
        double* gb = gw + static_cast<std::size_t>(out_dim) * in_dim;
        const Matrix& a = trace.acts[l];

        for (std::size_t r = 0; r < n; ++r) {
            const double* d = delta.data.data() + r * delta.cols;
            const double* x = a.data.data() + r * a.cols;
            for (int o = 0; o < out_dim; ++o) {
                const double dv = d[o];
                if (dv == 0.0) continue;
                double* gwo = gw + static_cast<std::size_t>(o) * in_dim;
                for (int i = 0; i < in_dim; ++i) gwo[i] += dv * x[i];
                gb[o] += dv;
            }
        }

        if (l == 0) break;

        const double* w = params.values.data() + off;
        Matrix prev(n, static_cast<std::size_t>(in_dim));
        const Matrix& pre_prev = trace.pre[l - 1];
        for (std::size_t r = 0; r < n; ++r) {
            const double* d = delta.data.data() + r * delta.cols;
            double* p = prev.data.data() + r * prev.cols;
            for (int o = 0; o < out_dim; ++o) {
                const double dv = d[o];
                if (dv == 0.0) continue;
                const double* wo = w + static_cast<std::size_t>(o) * in_dim;
                for (int i = 0; i < in_dim; ++i) p[i] += dv * wo[i];
            }
            const double* z = pre_prev.data.data() + r * pre_prev.cols;
            for (int i = 0; i < in_dim; ++i) p[i] *= activate_grad(z[i], params.activation);
        }
        delta = std::move(prev);
    }
    return grad;
}

inline void validate_labels(const Matrix& outputs, const std::vector<double>& labels, Task task) {
    if (labels.size() != outputs.rows) throw DataError("label count does not match batch size");
    if (!outputs.all_finite()) throw NumericError("non-finite network output");
    if (task == Task::classification) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const double y = labels[i];
            if (!(y >= 0.0) || y >= static_cast<double>(outputs.cols) || y != std::floor(y)) {
                throw DataError("label " + std::to_string(y) + " out of class range [0, " +
                                std::to_string(outputs.cols) + ") at row " + std::to_string(i));
            }
        }
    } else if (outputs.cols != 1) {
        throw ConfigError("regression network must have a single output");
    }
}

// Per-example loss and d(loss_i)/d(logits) for one row of outputs.
inline double example_loss_and_delta(std::span<const double> out, double label, Task task,
                                     std::span<double> delta) {
    if (task == Task::regression) {
        const double r = out[0] - label;
        delta[0] = 2.0 * r;
        return r * r;
    }
    // stable softmax cross-entropy
    const std::size_t k = out.size();
    double mx = out[0];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, out[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(out[c] - mx);
    const auto y = static_cast<std::size_t>(label);
    for (std::size_t c = 0; c < k; ++c) delta[c] = std::exp(out[c] - mx) / z;
    delta[y] -= 1.0;
    return std::log(z) - (out[y] - mx);
}

}  // namespace detail

// Logits (or regression outputs) for every row of `features`. Pure.
inline Matrix forward(const ModelParams& params, const Matrix& features) {
    return detail::forward_trace(params, features).acts.back();
}

inline std::vector<double> per_example_losses(const ModelParams& params, const Batch& batch,
                                              Task task) {
    const Matrix out = forward(params, batch.features);
    detail::validate_labels(out, batch.labels, task);
    std::vector<double> losses(out.rows);
    std::vector<double> scratch(out.cols);
    for (std::size_t r = 0; r < out.rows; ++r) {
        losses[r] = detail::example_loss_and_delta(out.row(r), batch.labels[r], task, scratch);
    }
    return losses;
}

// Mean loss over the batch: softmax cross-entropy for classification,
// squared error for regression.
inline double loss_eval(const ModelParams& params, const Batch& batch, Task task) {
    if (batch.size() == 0) throw DataError("empty batch");
    const auto losses = per_example_losses(params, batch, task);
    double s = 0.0;
    for (const double l : losses) s += l;
    return s / static_cast<double>(losses.size());
}

// Gradient of (1/n) sum_i w_i * loss_i. Returns {weighted mean loss, gradient}.
inline std::pair<double, std::vector<double>> loss_and_grad_weighted(
    const ModelParams& params, const Batch& batch, Task task, std::span<const double> weights) {
    if (batch.size() == 0) throw DataError("empty batch");
    if (!weights.empty() && weights.size() != batch.size()) {
        throw ConfigError("weight count does not match batch size");
    }
    const auto trace = detail::forward_trace(params, batch.features);
    const Matrix& out = trace.acts.back();
    detail::validate_labels(out, batch.labels, task);

    const std::size_t n = out.rows;
    const double inv_n = 1.0 / static_cast<double>(n);
    Matrix delta(n, out.cols);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double l = detail::example_loss_and_delta(out.row(r), batch.labels[r], task,
                                                        delta.row(r));
        const double w = weights.empty() ? 1.0 : weights[r];
        loss += w * l;
        const double scale = w * inv_n;
        for (double& d : delta.row(r)) d *= scale;
    }
    return {loss * inv_n, detail::backprop_from_deltas(params, trace, std::move(delta))};
}

// Gradient of the mean loss.
inline std::vector<double> grad_mean(const ModelParams& params, const Batch& batch, Task task) {
    return loss_and_grad_weighted(params, batch, task, {}).second;
}

// One gradient vector per example: grads[i] = d loss_i / d params.
// Executed as an order-independent map over examples (see map_width()).
inline std::vector<std::vector<double>> grads_per_example(const ModelParams& params,
                                                          const Batch& batch, Task task) {
    if (batch.size() == 0) throw DataError("empty batch");
    const std::size_t n = batch.size();
    std::vector<std::vector<double>> grads(n);
    parallel_for(n, [&](std::size_t i) {
        Batch one;
        one.features = batch.features.take_rows(i, i + 1);
        one.labels = {batch.labels[i]};
        const auto trace = detail::forward_trace(params, one.features);
        const Matrix& out = trace.acts.back();
        detail::validate_labels(out, one.labels, task);
        Matrix delta(1, out.cols);
        detail::example_loss_and_delta(out.row(0), one.labels[0], task, delta.row(0));
        grads[i] = detail::backprop_from_deltas(params, trace, std::move(delta));
    });
    return grads;
}

// Central-difference Hessian-vector product of an arbitrary gradient
// function: (grad(theta + eps v) - grad(theta - eps v)) / (2 eps) with
// eps = step / (||v|| + tiny).
template <typename GradFn>
std::vector<double> hvp_fd(GradFn&& grad_fn, const ModelParams& params,
                           std::span<const double> v, double step = 1e-4) {
    if (v.empty()) throw ConfigError("hvp_fd: empty direction vector");
    if (v.size() != params.values.size()) throw ConfigError("hvp_fd: direction length mismatch");
    if (step <= 0.0) throw ConfigError("hvp_fd: step must be positive");

    const double eps = step / (norm2(v) + 1e-30);
    ModelParams shifted = params;
    for (std::size_t i = 0; i < v.size(); ++i) shifted.values[i] = params.values[i] + eps * v[i];
    std::vector<double> g_plus = grad_fn(shifted);
    for (std::size_t i = 0; i < v.size(); ++i) shifted.values[i] = params.values[i] - eps * v[i];
    const std::vector<double> g_minus = grad_fn(shifted);

    for (std::size_t i = 0; i < g_plus.size(); ++i) {
        g_plus[i] = (g_plus[i] - g_minus[i]) / (2.0 * eps);
    }
    return g_plus;
}

inline std::vector<double> hvp_fd(const ModelParams& params, const Batch& batch, Task task,
                                  std::span<const double> v, double step = 1e-4) {
    return hvp_fd([&](const ModelParams& p) { return grad_mean(p, batch, task); }, params, v,
                  step);
}

inline ModelParams sgd_step(const ModelParams& params, std::span<const double> gradient,
                            double lr) {
    if (gradient.size() != params.values.size()) throw ConfigError("gradient length mismatch");
    if (lr <= 0.0) throw ConfigError("learning rate must be positive");
    for (const double g : gradient) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient entry in sgd_step");
    }
    ModelParams next = params;
    for (std::size_t i = 0; i < gradient.size(); ++i) next.values[i] -= lr * gradient[i];
    return next;
}

}  // namespace driftweight
