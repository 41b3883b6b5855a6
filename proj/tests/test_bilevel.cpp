#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "driftweight/driftweight.hpp"
#include "test_utils.hpp"

using namespace driftweight;
using dwtest::rel_error;

namespace {

// Weighted least squares on [x0, x1, 1]: the exact inner optimum of the
// weighted squared risk for a linear single-output network.
std::vector<double> weighted_lsq(const Batch& batch, const std::vector<double>& w) {
    const std::size_t n = batch.size();
    std::vector<double> a(9, 0.0), b(3, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double row[3] = {batch.features.at(i, 0), batch.features.at(i, 1), 1.0};
        for (int p = 0; p < 3; ++p) {
            for (int q = 0; q < 3; ++q) a[p * 3 + q] += w[i] * row[p] * row[q];
            b[p] += w[i] * batch.labels[i] * row[p];
        }
    }
    return dwtest::solve_dense(a, b);
}

ModelParams linear_net(const std::vector<double>& values) {
    ModelParams p = mlp_init({2, 1}, 0);
    p.values = values;
    return p;
}

struct TinyProblem {
    Batch train;
    Batch val;
    ImportanceModel model;
    ModelParams theta;
};

TinyProblem make_tiny_problem(std::uint64_t seed, std::size_t n_train = 8) {
    dwtest::Rng rng(seed);
    TinyProblem prob;
    prob.train = dwtest::random_batch(rng, n_train, 2, 2, Task::regression);
    for (std::size_t i = 0; i < n_train; ++i) {
        prob.train.labels[i] = prob.train.features.at(i, 0) - 0.5 * prob.train.features.at(i, 1) +
                               0.3 * rng.normal();
    }
    prob.val = dwtest::random_batch(rng, 6, 2, 2, Task::regression);
    for (std::size_t i = 0; i < 6; ++i) {
        prob.val.labels[i] = prob.val.features.at(i, 0) - 0.5 * prob.val.features.at(i, 1);
    }
    prob.model = make_importance(WeightScheme::inst_mix_exp, make_basis(2.0, 2));
    prob.model.scorer = scorer_init(2, 2, {4}, rng.next_u64());
    for (double& v : prob.model.scorer.net.values) v += 0.3 * rng.normal();
    prob.theta = dwtest::random_params({2, 4, 1}, rng);
    return prob;
}

double unrolled_val_loss(const TinyProblem& prob, const std::vector<double>& phi_values,
                         const BilevelConfig& cfg) {
    ImportanceModel model = prob.model;
    model.scorer.net.values = phi_values;
    const auto w = importance_weights(model, prob.train.features, prob.train.ages);
    const auto [risk, grad] = loss_and_grad_weighted(prob.theta, prob.train, Task::regression, w);
    (void)risk;
    const ModelParams theta_hat = sgd_step(prob.theta, grad, cfg.beta);
    return loss_eval(theta_hat, prob.val, Task::regression);
}

}  // namespace

TEST_CASE("alternating meta gradient") {
    BilevelConfig cfg;
    cfg.beta = 0.05;

    SECTION("matches finite differences of the one-step-unrolled validation loss") {
        for (std::uint64_t seed = 1; seed <= 6; ++seed) {
            const TinyProblem prob = make_tiny_problem(seed);
            const auto analytic =
                alternating_phi_grad(prob.theta, prob.model, prob.train, prob.val,
                                     Task::regression, cfg);
            const auto numeric = dwtest::fd_gradient(
                [&](const std::vector<double>& phi) { return unrolled_val_loss(prob, phi, cfg); },
                prob.model.scorer.net.values, 1e-6);
            REQUIRE(rel_error(analytic, numeric) < 1e-3);
        }
    }

    SECTION("an already-optimal validation set leaves the scorer unchanged") {
        TinyProblem prob = make_tiny_problem(3);
        // theta: exact fit of the validation labels and zero training
        // gradient is not needed -- force the virtual step to land on the
        // val-optimal parameters by making train labels consistent with val
        prob.theta = linear_net({1.0, -0.5, 0.0});
        for (std::size_t i = 0; i < prob.train.size(); ++i) {
            prob.train.labels[i] =
                prob.train.features.at(i, 0) - 0.5 * prob.train.features.at(i, 1);
        }
        const auto next =
            meta_step_alternating(prob.theta, prob.model, prob.train, prob.val, Task::regression,
                                  cfg);
        REQUIRE(next.net.values == prob.model.scorer.net.values);
    }

    SECTION("opposite-aligned twin instances cancel exactly") {
        TinyProblem prob = make_tiny_problem(4, 2);
        // duplicate instance 0 into slot 1 with a mirrored residual
        for (std::size_t c = 0; c < 2; ++c) {
            prob.train.features.at(1, c) = prob.train.features.at(0, c);
        }
        prob.train.ages[1] = prob.train.ages[0];
        const Matrix pred = forward(prob.theta, prob.train.features);
        prob.train.labels[1] = 2.0 * pred.at(0, 0) - prob.train.labels[0];
        const auto grad = alternating_phi_grad(prob.theta, prob.model, prob.train, prob.val,
                                               Task::regression, cfg);
        for (const double g : grad) REQUIRE(g == 0.0);
    }

    SECTION("empty meta-set is a configuration error") {
        const TinyProblem prob = make_tiny_problem(5);
        Batch empty;
        REQUIRE_THROWS_WITH(
            alternating_phi_grad(prob.theta, prob.model, prob.train, empty, Task::regression, cfg),
            Catch::Matchers::ContainsSubstring("meta-set"));
    }
}

TEST_CASE("neumann series") {
    SECTION("identity Hessian at beta=1 truncates to v") {
        const std::vector<double> v = {1.0, -2.0, 3.0};
        const auto out = neumann_series_apply(
            [](std::span<const double> u) { return std::vector<double>(u.begin(), u.end()); }, v,
            1.0, 50);
        REQUIRE(out == v);
    }
    SECTION("zero vector maps to zero") {
        const std::vector<double> v(4, 0.0);
        int calls = 0;
        const auto out = neumann_series_apply(
            [&](std::span<const double> u) {
                ++calls;
                return std::vector<double>(u.begin(), u.end());
            },
            v, 0.5, 50);
        REQUIRE(out == v);
        REQUIRE(calls == 0);
    }
    SECTION("beta * sum approximates the inverse on random SPD quadratics") {
        dwtest::Rng rng(6);
        for (int trial = 0; trial < 3; ++trial) {
            const std::size_t n = 6;
            const auto a = dwtest::random_spd(n, rng);
            const double lmax = dwtest::power_iteration_lambda_max(
                [&](const std::vector<double>& u) { return dwtest::matvec(a, u); }, n);
            const double beta = 0.5 / lmax;
            std::vector<double> v(n);
            for (double& x : v) x = rng.normal();
            auto sum = neumann_series_apply(
                [&](std::span<const double> u) {
                    return dwtest::matvec(a, std::vector<double>(u.begin(), u.end()));
                },
                v, beta, 1500);
            for (double& x : sum) x *= beta;
            const auto exact = dwtest::solve_dense(a, v);
            REQUIRE(rel_error(sum, exact) < 1e-3);
        }
    }
    SECTION("series terms shrink when beta is inside the stable range") {
        dwtest::Rng rng(7);
        const auto a = dwtest::random_spd(5, rng);
        const double lmax = dwtest::power_iteration_lambda_max(
            [&](const std::vector<double>& u) { return dwtest::matvec(a, u); }, 5);
        std::vector<double> term(5);
        for (double& x : term) x = rng.normal();
        const double beta = 0.9 / lmax;
        const double initial = norm2(term);
        for (int j = 0; j < 200; ++j) {
            const auto hv = dwtest::matvec(a, term);
            for (std::size_t i = 0; i < term.size(); ++i) term[i] -= beta * hv[i];
        }
        REQUIRE(norm2(term) < 1e-3 * initial);
    }
    SECTION("divergence raises with a diagnostic") {
        const std::vector<double> v = {1.0, 1.0};
        REQUIRE_THROWS_WITH(
            neumann_series_apply(
                [](std::span<const double> u) { return std::vector<double>(u.begin(), u.end()); },
                v, 3.0, 100),
            Catch::Matchers::ContainsSubstring("smaller beta"));
    }
}

TEST_CASE("neumann_ihvp against the weighted linear-regression Hessian") {
    dwtest::Rng rng(8);
    Batch train = dwtest::random_batch(rng, 30, 2, 2, Task::regression);
    ImportanceModel model = make_importance(WeightScheme::single_exp);
    model.lambda = 1.5;
    const auto w = importance_weights(model, train.features, train.ages);

    // H = (2/n) sum_i w_i x~ x~^T
    std::vector<double> h(9, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const double row[3] = {train.features.at(i, 0), train.features.at(i, 1), 1.0};
        for (int p = 0; p < 3; ++p) {
            for (int q = 0; q < 3; ++q) {
                h[p * 3 + q] += 2.0 * w[i] * row[p] * row[q] / static_cast<double>(train.size());
            }
        }
    }
    const double lmax = dwtest::power_iteration_lambda_max(
        [&](const std::vector<double>& u) { return dwtest::matvec(h, u); }, 3);

    const ModelParams theta = linear_net({0.4, -0.2, 0.1});
    BilevelConfig cfg;
    cfg.beta = 0.5 / lmax;
    cfg.neumann_terms = 2000;
    std::vector<double> v = {0.7, 0.1, -0.4};
    auto p = neumann_ihvp(theta, model, train, Task::regression, v, cfg);
    for (double& x : p) x *= cfg.beta;
    const auto exact = dwtest::solve_dense(h, v);
    REQUIRE(rel_error(p, exact) < 1e-3);
}

TEST_CASE("implicit meta gradient") {
    dwtest::Rng rng(9);
    Batch train = dwtest::random_batch(rng, 40, 2, 2, Task::regression);
    for (std::size_t i = 0; i < train.size(); ++i) {
        train.labels[i] = 0.8 * train.features.at(i, 0) + 0.1 * rng.normal();
    }
    Batch val = dwtest::random_batch(rng, 12, 2, 2, Task::regression);
    for (std::size_t i = 0; i < val.size(); ++i) {
        val.labels[i] = 0.8 * val.features.at(i, 0);
    }
    ImportanceModel model = make_importance(WeightScheme::inst_mix_exp, make_basis(2.0, 2));
    model.scorer = scorer_init(2, 2, {4}, 123);
    for (double& v : model.scorer.net.values) v += 0.3 * rng.normal();

    auto exact_inner = [&](const std::vector<double>& phi_values) {
        ImportanceModel m = model;
        m.scorer.net.values = phi_values;
        const auto w = importance_weights(m, train.features, train.ages);
        return weighted_lsq(train, w);
    };

    const auto theta_star_values = exact_inner(model.scorer.net.values);
    const ModelParams theta_star = linear_net(theta_star_values);

    // beta from the Hessian at theta*
    const auto w0 = importance_weights(model, train.features, train.ages);
    std::vector<double> h(9, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const double row[3] = {train.features.at(i, 0), train.features.at(i, 1), 1.0};
        for (int p = 0; p < 3; ++p) {
            for (int q = 0; q < 3; ++q) {
                h[p * 3 + q] += 2.0 * w0[i] * row[p] * row[q] / static_cast<double>(train.size());
            }
        }
    }
    const double lmax = dwtest::power_iteration_lambda_max(
        [&](const std::vector<double>& u) { return dwtest::matvec(h, u); }, 3);

    BilevelConfig cfg;
    cfg.beta = 0.5 / lmax;
    cfg.neumann_terms = 3000;

    SECTION("zero validation gradient gives a zero hypergradient") {
        Batch fit_val = val;
        const Matrix pred = forward(theta_star, fit_val.features);
        for (std::size_t i = 0; i < fit_val.size(); ++i) fit_val.labels[i] = pred.at(i, 0);
        const auto grad =
            meta_grad_implicit(theta_star, model, train, fit_val, Task::regression, cfg);
        for (const double g : grad) REQUIRE(g == 0.0);
    }

    SECTION("matches finite differences through the exact inner solution") {
        const auto analytic =
            meta_grad_implicit(theta_star, model, train, val, Task::regression, cfg);
        const auto numeric = dwtest::fd_gradient(
            [&](const std::vector<double>& phi) {
                const ModelParams t = linear_net(exact_inner(phi));
                return loss_eval(t, val, Task::regression);
            },
            model.scorer.net.values, 1e-5);
        REQUIRE(rel_error(analytic, numeric) < 1e-2);
    }

    SECTION("agrees in direction with the alternating gradient") {
        const auto implicit_grad =
            meta_grad_implicit(theta_star, model, train, val, Task::regression, cfg);
        const auto alternating =
            alternating_phi_grad(theta_star, model, train, val, Task::regression, cfg);
        const double cos = dot(implicit_grad, alternating) /
                           (norm2(implicit_grad) * norm2(alternating) + 1e-300);
        REQUIRE(cos > 0.9);
    }
}

namespace {

// Drifting 1-D regression stream: labels flip sign between the stale and
// fresh halves, validation follows the fresh rule.
TemporalDataset drifting_regression(std::size_t n, std::uint64_t seed) {
    dwtest::Rng rng(seed);
    TemporalDataset ds;
    ds.task = Task::regression;
    ds.features = Matrix(n, 1);
    ds.labels.resize(n);
    ds.timestamps.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = rng.normal();
        const double t = static_cast<double>(i) / static_cast<double>(n);
        ds.features.at(i, 0) = x;
        ds.labels[i] = (t < 0.5 ? -1.0 : 1.0) * x;
        ds.timestamps[i] = t;
    }
    return ds;
}

TemporalDataset classification_stream(std::size_t n, double omega, std::uint64_t seed) {
    SyntheticParams params;
    params.n = static_cast<int>(n);
    params.omega_fast = omega;
    params.time_span = 4.0;
    params.sigma = 0.1;
    return generate_synthetic(SyntheticKind::rotating_boundary, params, seed);
}

}  // namespace

TEST_CASE("train_bilevel reductions and determinism") {
    const TemporalDataset ds = classification_stream(800, 1.0, 21);
    const auto split = temporal_split(ds, 0.7, 0.15);
    const AgeNormalizer norm = make_normalizer(split.train.t_begin(), split.train.t_end());
    const ModelParams theta0 = mlp_init({2, 8, 2}, split_seed(77, "theta-init"));

    BilevelConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 64;
    cfg.beta = 0.05;
    cfg.seed = 77;
    cfg.early_stop_patience = 99;

    SECTION("uniform weighting is bit-compatible with plain SGD") {
        const auto result = train_bilevel(theta0, make_importance(WeightScheme::uniform),
                                          split.train, split.val, norm, cfg);

        // independent reference loop sharing only the seed and batch helpers
        ModelParams theta = theta0;
        Rng shuffle_rng(split_seed(cfg.seed, "batch-order"));
        std::vector<std::size_t> order(split.train.size());
        std::iota(order.begin(), order.end(), 0);
        std::vector<double> ages(split.train.size());
        for (std::size_t i = 0; i < ages.size(); ++i) {
            ages[i] = norm.age(split.train.timestamps[i]);
        }
        const Batch full_val = to_batch(split.val);
        ModelParams best_theta = theta;
        double best_val = std::numeric_limits<double>::infinity();
        std::vector<double> val_losses;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            shuffle_rng.shuffle(order);
            for (std::size_t begin = 0; begin < order.size();
                 begin += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t end =
                    std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
                const Batch batch = detail::gather_batch(
                    split.train, std::span(order).subspan(begin, end - begin), ages);
                const auto [loss, grad] =
                    loss_and_grad_weighted(theta, batch, Task::classification, {});
                (void)loss;
                theta = sgd_step(theta, grad, cfg.beta);
            }
            const double vl = loss_eval(theta, full_val, Task::classification);
            val_losses.push_back(vl);
            if (vl < best_val) {
                best_val = vl;
                best_theta = theta;
            }
        }

        REQUIRE(result.theta.values == best_theta.values);
        REQUIRE(result.history.epochs.size() == val_losses.size());
        for (std::size_t e = 0; e < val_losses.size(); ++e) {
            REQUIRE(result.history.epochs[e].val_loss == val_losses[e]);
            REQUIRE(result.history.epochs[e].meta_steps == 0);
            REQUIRE(result.history.epochs[e].weight_mean == 1.0);
            REQUIRE(result.history.epochs[e].weight_std == 0.0);
        }
    }

    SECTION("frozen inst_mix_exp equals trainable mix_exp with uniform z") {
        const int K = 4;
        const TimescaleBasis basis = make_basis(2.0, K);

        ImportanceModel inst = make_importance(WeightScheme::inst_mix_exp, basis);
        inst.scorer = scorer_init(2, K, {16, 16}, split_seed(5, "scorer"));
        BilevelConfig frozen_cfg = cfg;
        frozen_cfg.alpha = 0.05;
        frozen_cfg.freeze_scorer_output_weights = true;
        const auto a = train_bilevel(theta0, inst, split.train, split.val, norm, frozen_cfg);

        ImportanceModel mix = make_importance(WeightScheme::mix_exp, basis);
        mix.z.assign(K, 1.0 / static_cast<double>(K));
        BilevelConfig mix_cfg = cfg;
        mix_cfg.alpha = 0.05;
        const auto b = train_bilevel(theta0, mix, split.train, split.val, norm, mix_cfg);

        REQUIRE(a.theta.values == b.theta.values);
        REQUIRE(b.model.scheme == WeightScheme::mix_exp);
        const auto [wb, we] = scorer_output_weight_span(a.model.scorer);
        (void)wb;
        for (int k = 0; k < K; ++k) {
            const double bias = a.model.scorer.net.values[we + static_cast<std::size_t>(k)];
            REQUIRE(b.model.z[static_cast<std::size_t>(k)] == softplus(bias));
        }
        REQUIRE(a.history.epochs.size() == b.history.epochs.size());
        for (std::size_t e = 0; e < a.history.epochs.size(); ++e) {
            REQUIRE(a.history.epochs[e].val_loss == b.history.epochs[e].val_loss);
            REQUIRE(a.history.epochs[e].train_weighted_risk ==
                    b.history.epochs[e].train_weighted_risk);
            REQUIRE(a.history.epochs[e].weight_mean == b.history.epochs[e].weight_mean);
        }
    }

    SECTION("identical config and seed reproduce the history exactly") {
        ImportanceModel model = make_importance(WeightScheme::inst_mix_exp, make_basis(2.0, 4));
        model.scorer = scorer_init(2, 4, {8}, split_seed(3, "scorer"));
        BilevelConfig mcfg = cfg;
        mcfg.alpha = 1e-2;
        const auto a = train_bilevel(theta0, model, split.train, split.val, norm, mcfg);
        const auto b = train_bilevel(theta0, model, split.train, split.val, norm, mcfg);
        REQUIRE(a.theta.values == b.theta.values);
        REQUIRE(a.model.scorer.net.values == b.model.scorer.net.values);
        REQUIRE(a.history.epochs.size() == b.history.epochs.size());
        for (std::size_t e = 0; e < a.history.epochs.size(); ++e) {
            REQUIRE(a.history.epochs[e].val_loss == b.history.epochs[e].val_loss);
        }
        REQUIRE(a.history.total_meta_steps > 0);
    }

    SECTION("implicit variant runs deterministically") {
        ImportanceModel model = make_importance(WeightScheme::inst_mix_exp, make_basis(2.0, 4));
        model.scorer = scorer_init(2, 4, {8}, split_seed(3, "scorer"));
        BilevelConfig icfg = cfg;
        icfg.variant = BilevelVariant::implicit;
        icfg.alpha = 1e-2;
        icfg.beta = 0.02;
        icfg.epochs = 2;
        icfg.neumann_terms = 5;
        const auto a = train_bilevel(theta0, model, split.train, split.val, norm, icfg);
        const auto b = train_bilevel(theta0, model, split.train, split.val, norm, icfg);
        REQUIRE(a.theta.values == b.theta.values);
        REQUIRE(a.history.total_meta_steps > 0);
    }

    SECTION("validation must be newer than training") {
        BilevelConfig c = cfg;
        REQUIRE_THROWS_AS(train_bilevel(theta0, make_importance(WeightScheme::uniform), split.val,
                                        split.train, norm, c),
                          ConfigError);
    }
}

TEST_CASE("meta learning lowers validation loss on a convex drifted problem") {
    const TemporalDataset ds = drifting_regression(400, 31);
    const auto split = temporal_split(ds, 0.8, 0.1);
    const AgeNormalizer norm = make_normalizer(split.train.t_begin(), split.train.t_end());
    ModelParams theta0 = mlp_init({1, 1}, 1);

    ImportanceModel model = make_importance(WeightScheme::inst_mix_exp, make_basis(2.0, 4));
    model.scorer = scorer_init(1, 4, {}, 2);

    BilevelConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 1 << 20;       // full batch: deterministic convex steps
    cfg.meta_batch_size = 1 << 20;  // full validation set
    cfg.inner_steps = 1;
    cfg.alpha = 0.02;
    cfg.beta = 0.2;
    cfg.seed = 5;
    cfg.early_stop_patience = 99;

    const auto result = train_bilevel(theta0, model, split.train, split.val, norm, cfg);
    const auto& epochs = result.history.epochs;
    REQUIRE(epochs.size() == 40);
    for (std::size_t e = 1; e < epochs.size(); ++e) {
        REQUIRE(epochs[e].val_loss <= epochs[e - 1].val_loss + 1e-9);
    }
    REQUIRE(epochs.back().val_loss < 0.5 * epochs.front().val_loss);
}
