#include <catch2/catch_amalgamated.hpp>

#include "esnfb/diagnostics.hpp"
#include "esnfb/tasks.hpp"
#include "test_util.hpp"

using namespace esnfb;
using esnfb::testing::make_random_esn;
using esnfb::testing::random_inputs;

namespace {

struct Fitted {
    Trajectory traj;
    ReadoutSolution sol;
    VectorXd targets;
};

Fitted fit(const EsnParams& params, const TaskDataset& ds) {
    Fitted f;
    f.traj = run(params, zero_feedback(params), ds.inputs.head(ds.windows.total()),
                 initial_state(params), ds.windows);
    f.targets = ds.train_targets();
    f.sol = solve(accumulate(f.traj.train_states(), f.targets));
    sensitivities(params, zero_feedback(params), f.traj);
    return f;
}

}  // namespace

TEST_CASE("centered_state_matrix: constant states vanish and rows sum to zero",
          "[diagnostics]") {
    const MatrixXd constant = MatrixXd::Constant(3, 8, 0.25);
    CHECK(centered_state_matrix(constant).isZero(0.0));

    Rng rng(3);
    MatrixXd states(4, 12);
    for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 12; ++k) states(i, k) = rng.uniform(0.0, 1.0);
    const MatrixXd x = centered_state_matrix(states);
    CHECK((x * VectorXd::Ones(12)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("centered_state_matrix: X X' reproduces the readout covariance",
          "[diagnostics]") {
    const TaskDataset ds = mackey_glass({50, 120, 0});
    const EsnParams params = make_random_esn(5, 17);
    const Trajectory traj = run(params, zero_feedback(params), ds.inputs,
                                initial_state(params), ds.windows);
    const MomentStats stats = accumulate(traj.train_states(), ds.train_targets());
    const MatrixXd x = centered_state_matrix(traj.train_states());
    CHECK((x * x.transpose() - stats.k_xx).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("certificate: zero input weights are degenerate with zero gradient",
          "[diagnostics]") {
    EsnParams params = make_random_esn(4, 23);
    params.B.setZero();
    const TaskDataset ds = mackey_glass({20, 40, 0});
    const Fitted f = fit(params, ds);
    const GradientCertificate cert = certificate(f.traj, f.sol, f.targets);
    CHECK(cert.trace_m_par == 0.0);
    CHECK(cert.grad_norm == 0.0);
    CHECK(cert.degenerate);
    CHECK(cert.m_par_rank == 0);
}

TEST_CASE("certificate: generic reservoirs are non-degenerate", "[diagnostics]") {
    const TaskDataset ds = mackey_glass({100, 200, 0});
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const EsnParams params = make_random_esn(5, 3000 + seed, 0.3 + 0.03 * seed);
        const Fitted f = fit(params, ds);
        const GradientCertificate cert = certificate(f.traj, f.sol, f.targets);
        CHECK(cert.trace_m_par > 0.0);
        CHECK(cert.grad_norm > 0.0);
        CHECK_FALSE(cert.degenerate);
        CHECK(cert.trace_m_par >= -1e-9);
        CHECK(cert.m_par_rank >= 1);
    }
}

TEST_CASE("certificate: explicit projector oracle at toy scale", "[diagnostics]") {
    // n = 2, N = 6: small enough to build Pi_x = X'(XX')^{-1}X directly.
    const int n = 2, N = 6;
    const EsnParams params = make_random_esn(n, 41, 0.7);
    const Windows w{10, N, 0};
    const VectorXd inputs = random_inputs(w.total(), 43);
    Rng rng(44);
    VectorXd targets(N);
    for (int k = 0; k < N; ++k) targets(k) = rng.normal();

    Trajectory traj =
        run(params, zero_feedback(params), inputs, initial_state(params), w);
    const ReadoutSolution sol = solve(accumulate(traj.train_states(), targets));
    sensitivities(params, zero_feedback(params), traj);
    const GradientCertificate cert = certificate(traj, sol, targets);

    const MatrixXd x = centered_state_matrix(traj.train_states());
    const MatrixXd pi =
        x.transpose() * (x * x.transpose()).inverse() * x;  // N x N projector
    CHECK((pi * pi - pi).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((pi - pi.transpose()).cwiseAbs().maxCoeff() < 1e-10);

    double trace = 0.0;
    const double sqrt_n = std::sqrt(static_cast<double>(N));
    for (int i = 0; i < n; ++i) {
        MatrixXd d_i(n, N);
        for (int k = 0; k < N; ++k) d_i.col(k) = traj.sensitivities[k].col(i);
        const VectorXd mean = d_i.rowwise().mean();
        d_i.colwise() -= mean;
        d_i /= sqrt_n;
        trace +=
            (d_i * (MatrixXd::Identity(N, N) - pi) * d_i.transpose()).trace();
    }
    CHECK(cert.trace_m_par == Catch::Approx(trace).margin(1e-10));
}

TEST_CASE("certificate: requires sensitivities", "[diagnostics]") {
    const EsnParams params = make_random_esn(3, 51);
    const TaskDataset ds = mackey_glass({10, 20, 0});
    Trajectory traj = run(params, zero_feedback(params), ds.inputs,
                          initial_state(params), ds.windows);
    const ReadoutSolution sol =
        solve(accumulate(traj.train_states(), ds.train_targets()));
    CHECK_THROWS_AS(certificate(traj, sol, ds.train_targets()), UsageError);
}

TEST_CASE("certificate: trace is non-negative for random data", "[diagnostics]") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const EsnParams params = make_random_esn(3, 5000 + seed, 0.9);
        const Windows w{20, 30, 0};
        const VectorXd inputs = random_inputs(w.total(), 6000 + seed);
        Rng rng(7000 + seed);
        VectorXd targets(w.train);
        for (int k = 0; k < w.train; ++k) targets(k) = rng.normal();
        Trajectory traj =
            run(params, zero_feedback(params), inputs, initial_state(params), w);
        const ReadoutSolution sol = solve(accumulate(traj.train_states(), targets));
        sensitivities(params, zero_feedback(params), traj);
        const GradientCertificate cert = certificate(traj, sol, targets);
        CHECK(cert.trace_m_par >= -1e-9);
    }
}
