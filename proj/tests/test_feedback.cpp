#include <catch2/catch_amalgamated.hpp>

#include "esnfb/feedback.hpp"
#include "esnfb/tasks.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace esnfb;
using esnfb::testing::fd_gradient_fixed_readout;
using esnfb::testing::fd_gradient_retrained;
using esnfb::testing::make_random_esn;
using esnfb::testing::random_inputs;

namespace {

struct Fit {
    Trajectory traj;
    ReadoutSolution sol;
};

Fit fit_esn(const EsnParams& params, const FeedbackVector& v,
            const VectorXd& inputs, const VectorXd& targets, const Windows& w) {
    Fit fit;
    fit.traj = run(params, v, inputs.head(w.total()), initial_state(params), w);
    fit.sol = solve(accumulate(fit.traj.train_states(), targets.segment(w.warmup, w.train)));
    sensitivities(params, v, fit.traj);
    return fit;
}

}  // namespace

TEST_CASE("gradient: zero input weights kill every source term", "[feedback]") {
    EsnParams params = make_random_esn(4, 3);
    params.B.setZero();
    const Windows w{20, 30, 0};
    const TaskDataset ds = mackey_glass(w);
    const Fit fit = fit_esn(params, zero_feedback(params), ds.inputs, ds.targets, w);
    const VectorXd grad = gradient(fit.traj, fit.sol, ds.train_targets());
    CHECK(grad.isZero(0.0));
}

TEST_CASE("gradient: zero residuals give a zero gradient", "[feedback]") {
    const EsnParams params = make_random_esn(3, 7);
    const Windows w{10, 40, 0};
    const VectorXd inputs = random_inputs(w.total(), 9);
    Trajectory traj =
        run(params, zero_feedback(params), inputs, initial_state(params), w);
    sensitivities(params, zero_feedback(params), traj);
    // Make the targets exactly affine in the states: residuals vanish.
    VectorXd wvec(3);
    wvec << 0.2, -0.4, 1.0;
    const VectorXd targets = (traj.train_states().transpose() * wvec).array() + 0.1;
    const ReadoutSolution sol = solve(accumulate(traj.train_states(), targets));
    REQUIRE(sol.s_min < 1e-15);
    const VectorXd grad = gradient(traj, sol, targets);
    CHECK(grad.norm() < 1e-10);
}

TEST_CASE("gradient: missing sensitivities is a usage error", "[feedback]") {
    const EsnParams params = make_random_esn(3, 11);
    const Windows w{5, 10, 0};
    const VectorXd inputs = random_inputs(w.total(), 13);
    const Trajectory traj =
        run(params, zero_feedback(params), inputs, initial_state(params), w);
    const ReadoutSolution sol =
        solve(accumulate(traj.train_states(), inputs.head(10)));
    CHECK_THROWS_AS(gradient(traj, sol, inputs.head(10)), UsageError);
}

TEST_CASE("gradient: matches both finite-difference oracles", "[feedback]") {
    const Windows w{100, 200, 0};
    const TaskDataset ds = mackey_glass(w);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const EsnParams params = make_random_esn(5, 500 + seed, 0.5 + 0.1 * seed);
        Rng rng(600 + seed);
        FeedbackVector v(5);
        for (int i = 0; i < 5; ++i) v(i) = rng.uniform(-0.03, 0.03);
        REQUIRE(is_convergent(params, v));

        const Fit fit = fit_esn(params, v, ds.inputs, ds.targets, w);
        const VectorXd analytic = gradient(fit.traj, fit.sol, ds.train_targets());

        const VectorXd fd_fixed = fd_gradient_fixed_readout(
            params, v, fit.traj, ds.inputs, ds.train_targets(), fit.sol);
        CHECK((analytic - fd_fixed).norm() <= 1e-6 * fd_fixed.norm());

        const VectorXd fd_full = fd_gradient_retrained(params, v, fit.traj,
                                                       ds.inputs, ds.train_targets());
        CHECK((analytic - fd_full).norm() <= 1e-2 * fd_full.norm());
    }
}

TEST_CASE("project_step: inactive constraint returns the step unchanged",
          "[feedback]") {
    const EsnParams params = make_random_esn(4, 21, 0.4);
    const VectorXd delta = 0.01 * random_inputs(4, 23, -1.0, 1.0);
    const VectorXd out = project_step(params, zero_feedback(params), delta, 1e-5);
    CHECK((out - delta).norm() == 0.0);
}

TEST_CASE("project_step: scalar closed form lands at sqrt(a^2 - eps)", "[feedback]") {
    EsnParams params;
    params.A = MatrixXd::Constant(1, 1, 3.9);
    params.B = VectorXd::Constant(1, 1.0);
    VectorXd delta = VectorXd::Constant(1, 0.2);
    const VectorXd out = project_step(params, zero_feedback(params), delta, 1e-5);
    const double abar = 3.9 + out(0);
    CHECK(std::abs(abar) < 4.0);
    CHECK(abar == Catch::Approx(std::sqrt(16.0 - 1e-5)).epsilon(1e-6));
}

TEST_CASE("project_step: at most one singular value can violate per step",
          "[feedback]") {
    // B dV' is rank one, so Weyl's inequality gives
    // sigma_2(Abar') <= sigma_1(Abar) < a from any convergent iterate:
    // even a reservoir near the bound in two directions hit by a large
    // step produces exactly one violation, and the sweep corrects it.
    EsnParams params;
    params.A = MatrixXd::Zero(3, 3);
    params.A.diagonal() << 3.9, 3.85, 1.0;
    params.B.resize(3);
    params.B << 1.0, 1.0, 0.5;
    VectorXd delta(3);
    delta << 0.5, 0.5, 0.0;
    const MatrixXd abar_raw =
        feedback_matrix(params, zero_feedback(params) + delta);
    Eigen::JacobiSVD<MatrixXd> raw_svd(abar_raw);
    REQUIRE(raw_svd.singularValues()(0) > 4.0);
    CHECK(raw_svd.singularValues()(1) <= spectral_norm_svd(params.A) + 1e-12);

    std::vector<VectorXd> applied;
    const VectorXd out =
        project_step(params, zero_feedback(params), delta, 1e-5, &applied);
    REQUIRE_FALSE(applied.empty());
    const double sigma_max =
        spectral_norm_svd(feedback_matrix(params, zero_feedback(params) + out));
    CHECK(sigma_max < 4.0);
}

TEST_CASE("project_step: correction stays in the span of the applied directions",
          "[feedback]") {
    EsnParams params = make_random_esn(5, 31, 0.97);
    Rng rng(32);
    VectorXd delta(5);
    for (int i = 0; i < 5; ++i) delta(i) = rng.uniform(-1.0, 1.0);
    delta *= 2.0;  // large enough to violate the constraint
    REQUIRE_FALSE(is_convergent(params, delta));

    std::vector<VectorXd> applied;
    const VectorXd out =
        project_step(params, zero_feedback(params), delta, 1e-5, &applied);
    REQUIRE_FALSE(applied.empty());

    VectorXd residual = out - delta;
    MatrixXd basis(5, applied.size());
    for (std::size_t i = 0; i < applied.size(); ++i) basis.col(i) = applied[i];
    // Remove the span of the applied u's; nothing else may change.
    const VectorXd coeffs = basis.colPivHouseholderQr().solve(residual);
    CHECK((residual - basis * coeffs).norm() < 1e-10 * delta.norm());
}

TEST_CASE("project_step: uncontrollable direction raises projection-singular",
          "[feedback]") {
    EsnParams params;
    params.A = 0.5 * MatrixXd::Identity(2, 2);
    params.B = VectorXd::Constant(2, 1e-14);
    VectorXd delta(2);
    delta << 1e15, 0.0;
    CHECK_THROWS_AS(project_step(params, zero_feedback(params), delta, 1e-5),
                    ProjectionSingularError);
}

TEST_CASE("optimize: zero steps returns the no-feedback solution", "[feedback]") {
    const Windows w{50, 100, 0};
    const TaskDataset ds = mackey_glass(w);
    const EsnParams params = make_random_esn(6, 41);
    GdConfig config;
    config.eta = 25.0;
    config.steps = 0;
    const OptimizeResult res = optimize(params, ds, config);
    CHECK(res.v.isZero(0.0));
    CHECK(res.best_index == 0);
    REQUIRE(res.history.size() == 1);

    const Fit base = fit_esn(params, zero_feedback(params), ds.inputs, ds.targets, w);
    CHECK(res.solution.s_min == Catch::Approx(base.sol.s_min));
}

TEST_CASE("optimize: improves the training cost and stays convergent",
          "[feedback]") {
    const Windows w{200, 400, 0};
    const TaskDataset ds = mackey_glass(w);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const EsnParams params = make_random_esn(6, 700 + seed, 0.6);
        GdConfig config;
        config.eta = 25.0;
        config.steps = 20;
        std::vector<FeedbackVector> iterates;
        const OptimizeResult res =
            optimize(params, ds, config,
                     [&](int, const FeedbackVector& v, const GdRecord&) {
                         iterates.push_back(v);
                     });

        const double base = res.history.front().s_min;
        CHECK(res.solution.s_min <= base);
        CHECK(res.solution.s_min < base * (1.0 - 1e-10));
        REQUIRE(iterates.size() >= 21);
        for (const auto& rec : res.history) {
            CHECK(rec.sigma_max < params.a);
            CHECK(std::isfinite(rec.grad_norm));
        }
        for (const auto& vi : iterates)
            CHECK(spectral_norm_svd(feedback_matrix(params, vi)) < params.a);
    }
}

TEST_CASE("optimize: keep_best never loses to an oscillating tail", "[feedback]") {
    const Windows w{100, 200, 0};
    const TaskDataset ds = mackey_glass(w);
    const EsnParams params = make_random_esn(5, 83, 0.9);
    GdConfig config;
    config.eta = 80.0;  // deliberately unstable learning rate
    config.steps = 30;
    const OptimizeResult res = optimize(params, ds, config);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& rec : res.history) best = std::min(best, rec.s_min);
    CHECK(res.solution.s_min == Catch::Approx(best));
    CHECK(res.solution.s_min <= res.history.front().s_min);
}

TEST_CASE("optimize: alpha-ansatz initializer never starts worse", "[feedback]") {
    const Windows w{30, 80, 0};
    const TaskDataset ds = mackey_glass(w);
    const EsnParams params = make_random_esn(3, 91, 0.5);
    GdConfig config;
    config.eta = 10.0;
    config.steps = 0;
    config.alpha_init = true;
    const OptimizeResult with_init = optimize(params, ds, config);
    config.alpha_init = false;
    const OptimizeResult without = optimize(params, ds, config);
    CHECK(with_init.solution.s_min <= without.solution.s_min * (1.0 + 1e-12));
    CHECK(is_convergent(params, with_init.v));
}

TEST_CASE("optimize: rejects invalid configurations", "[feedback]") {
    const Windows w{10, 20, 0};
    const TaskDataset ds = mackey_glass(w);
    const EsnParams params = make_random_esn(3, 99);
    GdConfig config;
    config.eta = -1.0;
    CHECK_THROWS_AS(optimize(params, ds, config), UsageError);
    config.eta = 1.0;
    config.steps = -2;
    CHECK_THROWS_AS(optimize(params, ds, config), UsageError);
    config.steps = 1;
    config.eps_a = 0.0;
    CHECK_THROWS_AS(optimize(params, ds, config), UsageError);
}
