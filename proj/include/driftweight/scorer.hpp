#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "driftweight/errors.hpp"
#include "driftweight/matrix.hpp"
#include "driftweight/nn.hpp"

namespace driftweight {

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double softplus_inv(double y) { return std::log(std::expm1(y)); }

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// The auxiliary scorer network g_phi. Wraps a plain MLP with a softplus on
// the outputs so mixing weights are strictly positive.
struct ScorerParams {
    ModelParams net;

    bool empty() const { return net.layer_sizes.empty(); }
    int input_dim() const { return net.input_dim(); }
    int output_dim() const { return net.output_dim(); }
};

// Seeded scorer init. The output layer starts at exactly zero weights with
// bias softplus^{-1}(1/K), so the initial scorer is the constant uniform
// mixture 1/K regardless of input: training starts from MIX-EXP with uniform
// mixing weights.
inline ScorerParams scorer_init(int input_dim, int output_dim, const std::vector<int>& hidden,
                                std::uint64_t seed) {
    if (input_dim <= 0 || output_dim <= 0) throw ConfigError("scorer dimensions must be positive");
    std::vector<int> sizes;
    sizes.push_back(input_dim);
    for (const int h : hidden) sizes.push_back(h);
    sizes.push_back(output_dim);

    ScorerParams phi;
    phi.net = mlp_init(sizes, seed);

    const std::size_t last = sizes.size() - 2;
    const std::size_t off = layer_offset(sizes, last);
    const std::size_t n_w = static_cast<std::size_t>(sizes[last]) * sizes[last + 1];
    for (std::size_t i = 0; i < n_w; ++i) phi.net.values[off + i] = 0.0;
    const double bias = softplus_inv(1.0 / static_cast<double>(output_dim));
    for (int o = 0; o < output_dim; ++o) phi.net.values[off + n_w + o] = bias;
    return phi;
}

// softplus(net(x)) for every row; strictly positive. Pure.
inline Matrix scorer_forward(const ScorerParams& phi, const Matrix& features) {
    Matrix out = forward(phi.net, features);
    for (double& v : out.data) v = softplus(v);
    return out;
}

// Gradient of sum_i <g_phi(x_i), out_grads_i> with respect to phi.
inline std::vector<double> scorer_vjp(const ScorerParams& phi, const Matrix& features,
                                      const Matrix& out_grads) {
    if (out_grads.rows != features.rows ||
        out_grads.cols != static_cast<std::size_t>(phi.output_dim())) {
        throw ConfigError("scorer_vjp: out_grads shape mismatch");
    }
    const auto trace = detail::forward_trace(phi.net, features);
    const Matrix& pre_out = trace.pre.back();
    Matrix delta = out_grads;
    for (std::size_t i = 0; i < delta.data.size(); ++i) {
        delta.data[i] *= sigmoid(pre_out.data[i]);  // d softplus = sigmoid
    }
    return detail::backprop_from_deltas(phi.net, trace, std::move(delta));
}

// Single-instance convenience overload.
inline std::vector<double> scorer_vjp(const ScorerParams& phi, std::span<const double> x,
                                      std::span<const double> out_grad) {
    Matrix features(1, x.size());
    std::copy(x.begin(), x.end(), features.data.begin());
    Matrix grads(1, out_grad.size());
    std::copy(out_grad.begin(), out_grad.end(), grads.data.begin());
    return scorer_vjp(phi, features, grads);
}

// Flat index range of the output-layer weight block (excluding its bias).
// Used to freeze those weights at zero, which reduces an instance-conditional
// scorer to a bias-only mixture model.
inline std::pair<std::size_t, std::size_t> scorer_output_weight_span(const ScorerParams& phi) {
    const auto& sizes = phi.net.layer_sizes;
    const std::size_t last = sizes.size() - 2;
    const std::size_t off = layer_offset(sizes, last);
    return {off, off + static_cast<std::size_t>(sizes[last]) * sizes[last + 1]};
}

}  // namespace driftweight
