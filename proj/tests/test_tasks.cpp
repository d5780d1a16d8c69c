#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <catch2/catch_amalgamated.hpp>

#include "esnfb/tasks.hpp"
#include "test_util.hpp"

using namespace esnfb;
using esnfb::testing::make_random_esn;
using esnfb::testing::write_synthetic_ced_file;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

TaskDataset synthetic_ced(std::uint64_t seed) {
    const auto path = temp_file("esnfb_synth_ced_" + std::to_string(seed) + ".csv");
    write_synthetic_ced_file(path.string(), seed);
    return load_ced(path.string());
}

}  // namespace

TEST_CASE("mackey-glass: constant unit history is the Euler fixed point",
          "[tasks]") {
    // beta * 1/(1+1) cancels gamma * 1 exactly in double precision.
    const VectorXd y = mackey_glass_series(50, 1.0, 1.0);
    CHECK(y(1) == 1.0);
    CHECK((y.array() == 1.0).all());
}

TEST_CASE("mackey-glass: default series is bounded and non-degenerate", "[tasks]") {
    const VectorXd y = mackey_glass_series(11000);
    CHECK(y.minCoeff() > 0.0);
    CHECK(y.maxCoeff() < 2.0);
    const auto tail = y.tail(10000);
    CHECK((tail.array() - tail.mean()).square().mean() > 1e-3);
}

TEST_CASE("mackey-glass: values are a pure function of the absolute index",
          "[tasks]") {
    const TaskDataset a = mackey_glass({500, 1000, 500});
    const TaskDataset b = mackey_glass({300, 1200, 500});
    REQUIRE(a.inputs.size() == b.inputs.size());
    CHECK(a.inputs == b.inputs);
    CHECK(a.targets == b.targets);
    // inputs lag the targets by exactly the prediction horizon
    CHECK(a.inputs.tail(1990) == a.targets.head(1990));
}

TEST_CASE("channel: zero symbols give zero output", "[tasks]") {
    const VectorXd q = ce_linear_channel(VectorXd::Zero(30));
    CHECK(q.isZero(0.0));
    CHECK(ce_nonlinearity(q).isZero(0.0));
}

TEST_CASE("channel: a unit impulse reads out the taps at the right lags",
          "[tasks]") {
    VectorXd padded = VectorXd::Zero(40);
    const int impulse = 20;  // symbol index m = impulse - 7
    padded(impulse) = 1.0;
    const VectorXd q = ce_linear_channel(padded);
    const int m = impulse - 7;  // q index where the d_k tap (coefficient 1) sits
    CHECK(q(m) == Catch::Approx(1.0));
    CHECK(q(m - 2) == Catch::Approx(0.08));   // d_{k+2}
    CHECK(q(m - 1) == Catch::Approx(-0.12));  // d_{k+1}
    CHECK(q(m + 1) == Catch::Approx(0.18));
    CHECK(q(m + 2) == Catch::Approx(-0.10));
    CHECK(q(m + 3) == Catch::Approx(0.091));
    CHECK(q(m + 4) == Catch::Approx(-0.05));
    CHECK(q(m + 5) == Catch::Approx(0.04));
    CHECK(q(m + 6) == Catch::Approx(0.03));
    CHECK(q(m + 7) == Catch::Approx(0.01));
}

TEST_CASE("channel: empirical SNR sits at 32 dB", "[tasks]") {
    const Windows w{0, 100000, 0};
    ChannelOptions noiseless;
    noiseless.add_noise = false;
    const TaskDataset clean = channel_equalization(w, 99, noiseless);
    const TaskDataset noisy = channel_equalization(w, 99);
    const VectorXd noise = noisy.inputs - clean.inputs;
    const double snr_db =
        10.0 * std::log10(clean.inputs.squaredNorm() / noise.squaredNorm());
    CHECK(snr_db == Catch::Approx(32.0).margin(0.5));
}

TEST_CASE("channel: deterministic given the seed and symbols are valid",
          "[tasks]") {
    const Windows w{10, 50, 10};
    const TaskDataset a = channel_equalization(w, 1234);
    const TaskDataset b = channel_equalization(w, 1234);
    CHECK(a.inputs == b.inputs);
    CHECK(a.targets == b.targets);
    for (int d : a.symbols) CHECK((d == -3 || d == -1 || d == 1 || d == 3));
}

TEST_CASE("channel: lag-0 tap dominates the input/digit covariance", "[tasks]") {
    ChannelOptions opts;
    opts.add_noise = false;
    opts.nonlinear = false;
    const TaskDataset ds = channel_equalization({0, 20000, 0}, 7, opts);
    const int N = 20000;
    auto cov_at_lag = [&](int lag) {
        double sum = 0.0;
        int count = 0;
        for (int k = 100; k < N - 100; ++k, ++count)
            sum += ds.inputs(k) * ds.targets(k + lag);
        return sum / count;
    };
    const double at_zero = cov_at_lag(0);
    CHECK(at_zero == Catch::Approx(5.0).margin(0.3));  // tap 1 x Var(d) = 5
    for (int lag : {-2, -1, 1, 2, 3, 4, 5, 6, 7})
        CHECK(std::abs(cov_at_lag(lag)) < 0.5 * at_zero);
}

TEST_CASE("symbol rounding: boundaries and double-step errors", "[tasks]") {
    CHECK(round_symbol(1.99) == 1);
    CHECK(round_symbol(2.01) == 3);
    CHECK(round_symbol(2.0) == 1);    // tie toward the smaller magnitude
    CHECK(round_symbol(-2.0) == -1);  // tie toward the smaller magnitude
    CHECK(round_symbol(0.0) == 1);
    CHECK(round_symbol(-0.3) == -1);
    CHECK(round_symbol(-5.0) == -3);

    VectorXd d(3), yhat(3);
    d << -1.0, -1.0, 3.0;
    yhat << -3.2, 3.4, 2.9;  // rounds to -3, 3, 3
    CHECK(symbol_errors(d, d) == 0);
    CHECK(symbol_errors(d, yhat) == 1 + 2 + 0);
}

TEST_CASE("load_ced: a 500-row file gets the benchmark windows", "[tasks]") {
    const auto path = temp_file("esnfb_ced_ok.csv");
    write_synthetic_ced_file(path.string(), 5);
    const TaskDataset ds = load_ced(path.string());
    CHECK(ds.kind == TaskKind::ced);
    CHECK(ds.windows.warmup == 19);
    CHECK(ds.windows.train == 280);
    CHECK(ds.windows.test == 200);
    CHECK(ds.inputs.size() == 500);
    CHECK(ds.windows.total() == 499);  // the trailing row is unused
}

TEST_CASE("load_ced: missing columns and short files are data errors", "[tasks]") {
    const auto path = temp_file("esnfb_ced_cols.csv");
    write_synthetic_ced_file(path.string(), 6);
    CHECK_THROWS_WITH(load_ced(path.string(), {"u9", "z2"}),
                      Catch::Matchers::ContainsSubstring("u9"));

    const auto short_path = temp_file("esnfb_ced_short.csv");
    {
        std::ofstream out(short_path);
        out << "u2,z2\n1.0,2.0\n1.5,2.5\n";
    }
    CHECK_THROWS_AS(load_ced(short_path.string()), DataError);
    // accepted with the explicit flag, but far too short to window
    CHECK_THROWS_AS(load_ced(short_path.string(), {}, true), UsageError);
}

TEST_CASE("load_ced: accepts whitespace delimiters and index addressing",
          "[tasks]") {
    const auto path = temp_file("esnfb_ced_ws.txt");
    {
        std::ofstream out(path);
        char buf[80];
        for (const auto& row : esnfb::testing::synthetic_drive_rows(8)) {
            std::snprintf(buf, sizeof buf, "%.17g\t%.17g\n", row[0], row[1]);
            out << buf;
        }
    }
    const TaskDataset ds = load_ced(path.string(), {"0", "1"});
    CHECK(ds.inputs.size() == 500);
}

TEST_CASE("load_ced: CSV round trip is bit exact", "[tasks]") {
    const TaskDataset original = synthetic_ced(11);
    const auto path = temp_file("esnfb_ced_roundtrip.csv");
    {
        std::ofstream out(path);
        write_dataset_csv(original, out);
    }
    // The generic CSV has columns k,u,y,window; address u and y by name.
    const TaskDataset reloaded = load_ced(path.string(), {"u", "y"});
    REQUIRE(reloaded.inputs.size() == original.inputs.size());
    CHECK(reloaded.inputs == original.inputs);
    CHECK(reloaded.targets == original.targets);
}

TEST_CASE("ced_input: mixing limits and arithmetic", "[tasks]") {
    TaskDataset ds;
    ds.kind = TaskKind::ced;
    ds.inputs = VectorXd::Constant(5, 1.5);
    ds.targets = VectorXd::Constant(5, 0.5);
    const VectorXd x = VectorXd::Zero(2);
    const FeedbackVector v = VectorXd::Zero(2);
    CHECK(ced_input(ds, 1.0, v, x, 2) == Catch::Approx(1.5));
    CHECK(ced_input(ds, 0.0, v, x, 2) == Catch::Approx(0.5));
    CHECK(ced_input(ds, 0.5, v, x, 2) == Catch::Approx(1.0));
    FeedbackVector v2(2);
    v2 << 1.0, -2.0;
    VectorXd x2(2);
    x2 << 0.25, 0.5;
    CHECK(ced_input(ds, 0.5, v2, x2, 2) == Catch::Approx(1.0 + 0.25 - 1.0));
}

TEST_CASE("ced: teacher forcing uses measured outputs only up to k-1", "[tasks]") {
    TaskDataset ds = synthetic_ced(21);
    const EsnParams params = make_random_esn(2, 22, 0.7);
    const FeedbackVector v = zero_feedback(params);
    const Trajectory base = ced_run(params, v, ds, 0.4);

    const int probe = 350;  // inside the test window
    ds.targets(probe) += 5.0;
    const Trajectory bumped = ced_run(params, v, ds, 0.4);
    // Columns up to `probe` consumed rows <= probe-1 only.
    CHECK(base.states.leftCols(probe + 1) == bumped.states.leftCols(probe + 1));
    CHECK(base.states.col(probe + 1) != bumped.states.col(probe + 1));
}

TEST_CASE("ced: mixing gradient vanishes when targets equal the input", "[tasks]") {
    TaskDataset ds = synthetic_ced(31);
    ds.targets = ds.inputs;  // drive becomes independent of s
    const EsnParams params = make_random_esn(2, 32, 0.5);
    const FeedbackVector v = zero_feedback(params);
    for (double s : {0.0, 0.3, 0.9}) {
        const Trajectory traj = ced_run(params, v, ds, s);
        const auto sens = mixing_sensitivities(params, v, traj, ds);
        for (const auto& d : sens) CHECK(d.isZero(0.0));
        const ReadoutSolution sol =
            solve(accumulate(traj.train_states(), ds.train_targets()));
        CHECK(mixing_gradient(traj, sol, ds.train_targets(), sens) == 0.0);
    }
}

TEST_CASE("ced: mixing sensitivities match finite differences", "[tasks]") {
    const TaskDataset ds = synthetic_ced(41);
    const EsnParams params = make_random_esn(2, 42, 0.8);
    Rng rng(43);
    FeedbackVector v(2);
    v << rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1);
    const double s = 0.35;

    const Trajectory base = ced_run(params, v, ds, s);
    const auto sens = mixing_sensitivities(params, v, base, ds);

    // Frozen first-training-state finite differences over s +- h.
    const double h = 1e-6;
    const int w = ds.windows.warmup;
    const int N = ds.windows.train;
    const MatrixXd abar = feedback_matrix(params, v);
    auto rerun = [&](double s_val) {
        MatrixXd states(2, N);
        states.col(0) = base.states.col(w);
        for (int k = 1; k < N; ++k) {
            const int col = w + k;
            const double drive =
                s_val * ds.inputs(col - 1) + (1.0 - s_val) * ds.targets(col - 1);
            VectorXd z = abar * states.col(k - 1) + params.B * drive;
            detail::apply_activation(params.activation, z);
            states.col(k) = z;
        }
        return states;
    };
    const MatrixXd up = rerun(s + h);
    const MatrixXd down = rerun(s - h);
    double max_scale = 0.0;
    for (const auto& d : sens) max_scale = std::max(max_scale, d.cwiseAbs().maxCoeff());
    for (int k = 1; k < N; ++k) {
        const VectorXd fd = (up.col(k) - down.col(k)) / (2.0 * h);
        CHECK((sens[k] - fd).norm() <= 1e-3 * fd.norm() + 1e-6 * max_scale);
    }
}

TEST_CASE("ced: optimize_mixing starts at zero and never returns worse",
          "[tasks]") {
    const TaskDataset ds = synthetic_ced(51);
    const EsnParams params = make_random_esn(2, 52, 0.6);
    const MixingParam mix =
        optimize_mixing(params, ds, zero_feedback(params), 0.0012, 40);
    REQUIRE_FALSE(mix.history.empty());
    CHECK(mix.history.front().first == 0.0);
    const double base_cost = mix.history.front().second;
    double best_cost = base_cost;
    for (const auto& [s, cost] : mix.history)
        if (s == mix.s) best_cost = std::min(best_cost, cost);
    CHECK(best_cost <= base_cost);
    CHECK(std::abs(mix.s) < 0.5);
}

TEST_CASE("ced: joint optimization improves on the mixing-only fit", "[tasks]") {
    const TaskDataset ds = synthetic_ced(61);
    const EsnParams params = make_random_esn(2, 62, 0.6);
    const MixingParam mix =
        optimize_mixing(params, ds, zero_feedback(params), 0.0012, 30);
    double mix_cost = std::numeric_limits<double>::infinity();
    for (const auto& [s, cost] : mix.history) mix_cost = std::min(mix_cost, cost);

    CedGdConfig config;
    config.steps = 30;
    config.lr_s = 0.0012;
    const CedFitResult fit = optimize_ced(params, ds, config);
    CHECK(fit.solution.s_min <= mix_cost * (1.0 + 1e-12));
    CHECK(is_convergent(params, fit.v));
    for (const auto& rec : fit.history) CHECK(rec.sigma_max < params.a);
}

TEST_CASE("dataset CSV: window tags follow the split", "[tasks]") {
    const TaskDataset ds = channel_equalization({2, 3, 2}, 71);
    std::ostringstream out;
    write_dataset_csv(ds, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "k,u,y,window");
    int k = 0;
    const char* expect[] = {"warmup", "warmup", "train", "train", "train",
                            "test", "test"};
    while (std::getline(in, line)) {
        CAPTURE(line);
        CHECK(line.find(expect[k]) != std::string::npos);
        ++k;
    }
    CHECK(k == 7);
}
