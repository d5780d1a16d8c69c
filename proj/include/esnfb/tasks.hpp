#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "esnfb/errors.hpp"
#include "esnfb/feedback.hpp"
#include "esnfb/random.hpp"
#include "esnfb/readout.hpp"
#include "esnfb/reservoir.hpp"

namespace esnfb {

enum class TaskKind { mackey_glass, channel_eq, ced };

inline std::string task_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::mackey_glass: return "mg";
        case TaskKind::channel_eq: return "ce";
        case TaskKind::ced: return "ced";
    }
    return "?";
}

/// Input/target sequences aligned index-for-index, with the window split
/// used by every downstream statistic.
struct TaskDataset {
    TaskKind kind = TaskKind::mackey_glass;
    VectorXd inputs;
    VectorXd targets;
    Windows windows;
    std::vector<int> symbols;  ///< channel task: raw digits d_k in {-3,-1,1,3}

    auto train_targets() const {
        return targets.segment(windows.warmup, windows.train);
    }
    auto test_targets() const {
        return targets.segment(windows.warmup + windows.train, windows.test);
    }

    void validate() const {
        windows.validate();
        if (inputs.size() != targets.size())
            throw UsageError("TaskDataset: inputs/targets length mismatch");
        if (inputs.size() < windows.total())
            throw UsageError("TaskDataset: sequences shorter than the windows");
    }
};

// ---------------------------------------------------------------------------
// Mackey-Glass
// ---------------------------------------------------------------------------

/// Euler integration (dt = 1) of
///   dy/dt = 0.2 y(t-17) / (1 + y(t-17)^10) - 0.1 y(t)
/// from y(0) = y0 with y(t) = history for t < 0.
///
/// Note: history = 1.0 sits exactly on the fixed point (0.2/(1+1) = 0.1
/// cancels the decay term in double precision), so the default pre-history
/// is 0, which drops onto the chaotic attractor within the burn-in.
inline VectorXd mackey_glass_series(int length, double y0 = 1.0,
                                    double history = 0.0) {
    if (length < 1) throw UsageError("mackey_glass_series: length must be >= 1");
    constexpr int tau = 17;
    constexpr double beta = 0.2;
    constexpr double gamma = 0.1;
    VectorXd y(length);
    y(0) = y0;
    for (int k = 0; k + 1 < length; ++k) {
        const double delayed = (k - tau >= 0) ? y(k - tau) : history;
        const double rhs = beta * delayed / (1.0 + std::pow(delayed, 10)) -
                           gamma * y(k);
        y(k + 1) = y(k) + rhs;
    }
    return y;
}

/// Ten-step-ahead prediction task: inputs u_k = y_{k-10}, targets y_k,
/// starting after a 1000-step burn-in of the integrator. Deterministic.
inline TaskDataset mackey_glass(const Windows& windows) {
    windows.validate();
    constexpr int burn_in = 1000;
    constexpr int horizon = 10;
    const int total = windows.total();
    const VectorXd series = mackey_glass_series(burn_in + total);

    TaskDataset ds;
    ds.kind = TaskKind::mackey_glass;
    ds.windows = windows;
    ds.inputs = series.segment(burn_in - horizon, total);
    ds.targets = series.segment(burn_in, total);
    return ds;
}

// ---------------------------------------------------------------------------
// Nonlinear channel equalization
// ---------------------------------------------------------------------------

/// Linear 10-tap channel. `padded` holds symbols d_{k-7}..d_{k+2} for each
/// output index k, i.e. padded[i] = d_{i-7}; the result has
/// padded.size() - 9 entries.
inline VectorXd ce_linear_channel(const VectorXd& padded) {
    if (padded.size() < 10) throw UsageError("ce_linear_channel: too few symbols");
    const Eigen::Index len = padded.size() - 9;
    VectorXd q(len);
    for (Eigen::Index k = 0; k < len; ++k) {
        q(k) = 0.08 * padded(k + 9) - 0.12 * padded(k + 8) + padded(k + 7) +
               0.18 * padded(k + 6) - 0.10 * padded(k + 5) +
               0.091 * padded(k + 4) - 0.05 * padded(k + 3) +
               0.04 * padded(k + 2) + 0.03 * padded(k + 1) + 0.01 * padded(k);
    }
    return q;
}

inline VectorXd ce_nonlinearity(const VectorXd& q) {
    return q.array() + 0.036 * q.array().square() - 0.011 * q.array().cube();
}

struct ChannelOptions {
    bool add_noise = true;  ///< Gaussian noise at 32 dB SNR
    bool nonlinear = true;  ///< polynomial distortion of the linear channel
};

/// Draws i.i.d. digits d_k in {-3,-1,1,3} (padded 7 past / 2 future so
/// every output has full tap support), passes them through the channel,
/// and adds noise with sigma_k = |u_k| / 39.81 computed from the noiseless
/// channel value. Targets are the digits themselves.
inline TaskDataset channel_equalization(const Windows& windows,
                                        std::uint64_t seed,
                                        const ChannelOptions& opts = {}) {
    windows.validate();
    const int total = windows.total();
    static constexpr double kSymbols[4] = {-3.0, -1.0, 1.0, 3.0};

    Rng rng(seed);
    VectorXd padded(total + 9);
    for (int i = 0; i < total + 9; ++i)
        padded(i) = kSymbols[rng.uniform_int(4)];

    const VectorXd q = ce_linear_channel(padded);
    VectorXd u = opts.nonlinear ? ce_nonlinearity(q) : q;
    if (opts.add_noise) {
        for (int k = 0; k < total; ++k) {
            const double sigma = std::abs(u(k)) / 39.81;
            u(k) += sigma * rng.normal();
        }
    }

    TaskDataset ds;
    ds.kind = TaskKind::channel_eq;
    ds.windows = windows;
    ds.inputs = std::move(u);
    ds.targets.resize(total);
    ds.symbols.resize(total);
    for (int k = 0; k < total; ++k) {
        ds.targets(k) = padded(k + 7);
        ds.symbols[k] = static_cast<int>(padded(k + 7));
    }
    return ds;
}

/// Nearest digit in {-3,-1,1,3}; boundary values round toward the smaller
/// magnitude (2 -> 1, -2 -> -1) and 0 rounds to 1.
inline int round_symbol(double yhat) {
    if (yhat < -2.0) return -3;
    if (yhat < 0.0) return -1;
    if (yhat <= 2.0) return 1;
    return 3;
}

/// Error count sum_k |d_k - round(yhat_k)| / 2: a neighboring digit counts
/// as one error, the opposite end of the alphabet as up to three.
inline long symbol_errors(const Eigen::Ref<const VectorXd>& digits,
                          const Eigen::Ref<const VectorXd>& yhat) {
    if (digits.size() != yhat.size()) throw UsageError("symbol_errors: length mismatch");
    long errors = 0;
    for (Eigen::Index k = 0; k < digits.size(); ++k)
        errors += std::lround(std::abs(digits(k) - round_symbol(yhat(k))) / 2.0);
    return errors;
}

// ---------------------------------------------------------------------------
// Coupled electric drives (system identification on a 500-row data file)
// ---------------------------------------------------------------------------

struct CedColumns {
    std::string input = "u2";
    std::string target = "z2";
};

namespace detail {

inline bool parse_double(const std::string& tok, double& out) {
    const char* first = tok.data();
    const char* last = tok.data() + tok.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
}

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',' || ch == ';' || ch == ' ' || ch == '\t' || ch == '\r') {
            if (!cur.empty()) fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) fields.push_back(std::move(cur));
    return fields;
}

inline int resolve_column(const std::string& name,
                          const std::vector<std::string>& header,
                          std::size_t width, const std::string& path) {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    int index = -1;
    if (auto [p, ec] = std::from_chars(name.data(), name.data() + name.size(), index);
        ec == std::errc() && p == name.data() + name.size() && index >= 0 &&
        static_cast<std::size_t>(index) < width)
        return index;
    throw DataError(path + ": column '" + name + "' not found");
}

}  // namespace detail

/// Loads the coupled-electric-drives benchmark file: delimited text
/// (comma, semicolon or whitespace), optional header, columns addressable
/// by name or 0-based index. A standard 500-row file gets windows
/// (19, 280, 200), which leaves the trailing row unused; any other length
/// needs `allow_nonstandard_length` and gets proportional windows.
inline TaskDataset load_ced(const std::string& path, const CedColumns& cols = {},
                            bool allow_nonstandard_length = false) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open file");

    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto fields = detail::split_fields(line);
        if (fields.empty()) continue;
        std::vector<double> row(fields.size());
        bool numeric = true;
        for (std::size_t i = 0; i < fields.size(); ++i)
            numeric = numeric && detail::parse_double(fields[i], row[i]);
        if (!numeric) {
            if (rows.empty() && header.empty()) {
                header = std::move(fields);
                continue;
            }
            throw DataError(path + ": line " + std::to_string(lineno) +
                            ": non-numeric field");
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw DataError(path + ": line " + std::to_string(lineno) +
                            ": inconsistent column count");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw DataError(path + ": no data rows");

    const std::size_t width = rows.front().size();
    const int u_col = detail::resolve_column(cols.input, header, width, path);
    const int y_col = detail::resolve_column(cols.target, header, width, path);

    const int count = static_cast<int>(rows.size());
    Windows windows{19, 280, 200};
    if (count != 500) {
        if (!allow_nonstandard_length)
            throw DataError(path + ": expected 500 rows, got " +
                            std::to_string(count) +
                            " (pass the nonstandard-length flag to accept)");
        std::cerr << "warning: " << path << " has " << count
                  << " rows; using proportional windows\n";
        windows.warmup = std::max(1, count * 19 / 500);
        windows.test = count * 200 / 500;
        windows.train = (count - 1) - windows.warmup - windows.test;
        windows.validate();
    }

    TaskDataset ds;
    ds.kind = TaskKind::ced;
    ds.windows = windows;
    ds.inputs.resize(count);
    ds.targets.resize(count);
    for (int k = 0; k < count; ++k) {
        ds.inputs(k) = rows[k][u_col];
        ds.targets(k) = rows[k][y_col];
    }
    return ds;
}

inline std::string window_tag(const Windows& w, int k) {
    if (k < w.warmup) return "warmup";
    if (k < w.warmup + w.train) return "train";
    if (k < w.total()) return "test";
    return "unused";
}

/// Writes a dataset as CSV (k, u, y, window tag) with round-trip-exact
/// floating point formatting.
inline void write_dataset_csv(const TaskDataset& ds, std::ostream& out) {
    char buf[64];
    out << "k,u,y,window\n";
    for (Eigen::Index k = 0; k < ds.inputs.size(); ++k) {
        out << k << ',';
        std::snprintf(buf, sizeof buf, "%.17g", ds.inputs(k));
        out << buf << ',';
        std::snprintf(buf, sizeof buf, "%.17g", ds.targets(k));
        out << buf << ',' << window_tag(ds.windows, static_cast<int>(k)) << '\n';
    }
}

// ---------------------------------------------------------------------------
// CED autoregressive evaluation (teacher forcing)
// ---------------------------------------------------------------------------

/// Reservoir drive at step k: s u2_k + (1-s) y_k + V'x_k, mixing the
/// excitation input with the measured output.
inline double ced_input(const TaskDataset& ds, double s, const FeedbackVector& v,
                        const VectorXd& x, int k) {
    return s * ds.inputs(k) + (1.0 - s) * ds.targets(k) + v.dot(x);
}

/// Drive sequence for the one-step-ahead model: the state that predicts
/// y_k consumed row k-1, so predictions depend on measured outputs only up
/// to k-1 (the feedback term V'x is applied inside run()).
inline VectorXd ced_drive(const TaskDataset& ds, double s) {
    const int total = ds.windows.total();
    VectorXd drive(total);
    drive(0) = s * ds.inputs(0) + (1.0 - s) * ds.targets(0);
    for (int k = 1; k < total; ++k)
        drive(k) = s * ds.inputs(k - 1) + (1.0 - s) * ds.targets(k - 1);
    return drive;
}

inline Trajectory ced_run(const EsnParams& params, const FeedbackVector& v,
                          const TaskDataset& ds, double s) {
    if (ds.kind != TaskKind::ced) throw UsageError("ced_run: not a CED dataset");
    return run(params, v, ced_drive(ds, s), initial_state(params), ds.windows);
}

/// Sensitivities of the training-window states w.r.t. the mixing weight:
///   dx_k/ds = Sigma_k (B (u2_{k-1} - y_{k-1}) + Abar dx_{k-1}/ds),
/// zero at the first training step like the feedback sensitivities.
inline std::vector<VectorXd> mixing_sensitivities(const EsnParams& params,
                                                  const FeedbackVector& v,
                                                  const Trajectory& traj,
                                                  const TaskDataset& ds) {
    const int n = params.n();
    const int w = traj.windows.warmup;
    const int N = traj.windows.train;
    const MatrixXd abar = feedback_matrix(params, v);

    std::vector<VectorXd> sens(N, VectorXd::Zero(n));
    for (int k = 1; k < N; ++k) {
        const int col = w + k;
        const double dd = ds.inputs(col - 1) - ds.targets(col - 1);
        VectorXd d = params.B * dd;
        d.noalias() += abar * sens[k - 1];
        for (int i = 0; i < n; ++i)
            d(i) *= activation_deriv_from_output(params.activation,
                                                 traj.states(i, col));
        sens[k] = std::move(d);
    }
    return sens;
}

inline double mixing_gradient(const Trajectory& traj, const ReadoutSolution& sol,
                              const Eigen::Ref<const VectorXd>& targets,
                              const std::vector<VectorXd>& sens) {
    const int N = traj.windows.train;
    if (targets.size() != N) throw UsageError("mixing_gradient: target length mismatch");
    const auto train = traj.train_states();
    double grad = 0.0;
    for (int k = 0; k < N; ++k) {
        const double residual = sol.w.dot(train.col(k)) + sol.c - targets(k);
        grad += residual * sol.w.dot(sens[k]);
    }
    return grad / static_cast<double>(N);
}

/// Mixing weight with its descent history (s, training cost) per step.
struct MixingParam {
    double s = 0.0;
    std::vector<std::pair<double, double>> history;
};

namespace detail {

inline Evaluation evaluate_ced(const EsnParams& params, const FeedbackVector& v,
                               const TaskDataset& ds, double s) {
    Evaluation ev;
    ev.traj = ced_run(params, v, ds, s);
    ev.sol = solve(accumulate(ev.traj.train_states(), ds.train_targets()));
    return ev;
}

}  // namespace detail

/// Gradient descent on the mixing weight from s = 0, re-solving (W, C)
/// each step; returns the best-cost s visited.
inline MixingParam optimize_mixing(const EsnParams& params, const TaskDataset& ds,
                                   const FeedbackVector& v, double learning_rate,
                                   int steps) {
    if (ds.kind != TaskKind::ced) throw UsageError("optimize_mixing: not a CED dataset");
    if (!(learning_rate > 0.0)) throw UsageError("optimize_mixing: learning rate must be positive");

    double s = 0.0;
    auto ev = detail::evaluate_ced(params, v, ds, s);
    MixingParam result;
    result.history.emplace_back(s, ev.sol.s_min);
    double best_s = s;
    double best_cost = ev.sol.s_min;

    for (int i = 0; i < steps; ++i) {
        const auto sens = mixing_sensitivities(params, v, ev.traj, ds);
        const double grad = mixing_gradient(ev.traj, ev.sol, ds.train_targets(), sens);
        double step = -learning_rate * grad;
        detail::Evaluation next;
        try {
            next = detail::evaluate_ced(params, v, ds, s + step);
        } catch (const NumericError&) {
            step *= 0.5;
            next = detail::evaluate_ced(params, v, ds, s + step);
        }
        s += step;
        ev = std::move(next);
        result.history.emplace_back(s, ev.sol.s_min);
        if (ev.sol.s_min < best_cost) {
            best_cost = ev.sol.s_min;
            best_s = s;
        }
    }
    result.s = best_s;
    return result;
}

/// Joint (s, V) fit for the CED study: one mixing step then one feedback
/// step per iteration, keeping the best-cost pair.
struct CedGdConfig {
    double eta_v = 27.0;
    double lr_s = 0.001;
    int steps = 100;
    double eps_a = 1e-5;
};

struct CedFitResult {
    double s = 0.0;
    FeedbackVector v;
    ReadoutSolution solution;
    GdHistory history;
};

inline CedFitResult optimize_ced(const EsnParams& params, const TaskDataset& ds,
                                 const CedGdConfig& config,
                                 const GdObserver& observer = nullptr) {
    if (ds.kind != TaskKind::ced) throw UsageError("optimize_ced: not a CED dataset");
    double s = 0.0;
    FeedbackVector v = zero_feedback(params);
    auto ev = detail::evaluate_ced(params, v, ds, s);

    CedFitResult result;
    auto record = [&](int index, bool projected) {
        GdRecord rec;
        rec.s_min = ev.sol.s_min;
        rec.projected = projected;
        rec.sigma_max = spectral_norm(feedback_matrix(params, v));
        result.history.push_back(rec);
        if (observer) observer(index, v, rec);
    };
    record(0, false);

    double best_cost = ev.sol.s_min;
    CedFitResult best{s, v, ev.sol, {}};

    const VectorXd train_targets = ds.train_targets();
    for (int i = 1; i <= config.steps; ++i) {
        // Mixing step.
        const auto s_sens = mixing_sensitivities(params, v, ev.traj, ds);
        const double s_grad = mixing_gradient(ev.traj, ev.sol, train_targets, s_sens);
        double s_step = -config.lr_s * s_grad;
        try {
            ev = detail::evaluate_ced(params, v, ds, s + s_step);
        } catch (const NumericError&) {
            s_step *= 0.5;
            ev = detail::evaluate_ced(params, v, ds, s + s_step);
        }
        s += s_step;
        if (ev.sol.s_min < best_cost) {
            best_cost = ev.sol.s_min;
            best = {s, v, ev.sol, {}};
        }

        // Feedback step.
        sensitivities(params, v, ev.traj);
        const VectorXd grad = gradient(ev.traj, ev.sol, train_targets);
        result.history.back().grad_norm = grad.norm();
        const VectorXd raw = -config.eta_v * grad;
        VectorXd attempt = raw;
        VectorXd corrected;
        for (int halving = 0;; ++halving) {
            try {
                corrected = project_step(params, v, attempt, config.eps_a);
                break;
            } catch (const ProjectionSingularError&) {
                if (halving >= 10) throw;
                attempt *= 0.5;
            }
        }
        FeedbackVector v_next = v + corrected;
        detail::Evaluation ev_next;
        try {
            ev_next = detail::evaluate_ced(params, v_next, ds, s);
        } catch (const NumericError&) {
            v_next = v + 0.5 * corrected;
            ev_next = detail::evaluate_ced(params, v_next, ds, s);
        }
        v = std::move(v_next);
        ev = std::move(ev_next);
        record(i, (corrected - raw).norm() > 0.0);
        if (ev.sol.s_min < best_cost) {
            best_cost = ev.sol.s_min;
            best = {s, v, ev.sol, {}};
        }
    }

    sensitivities(params, v, ev.traj);
    result.history.back().grad_norm = gradient(ev.traj, ev.sol, train_targets).norm();
    result.s = best.s;
    result.v = best.v;
    result.solution = best.solution;
    return result;
}

/// Feedback optimization on a generated dataset (CED goes through
/// optimize_ced instead).
inline OptimizeResult optimize(const EsnParams& params, const TaskDataset& ds,
                               const GdConfig& config,
                               const GdObserver& observer = nullptr) {
    if (ds.kind == TaskKind::ced)
        throw UsageError("optimize: CED uses optimize_ced (joint s, V fit)");
    ds.validate();
    return optimize(params, ds.inputs, ds.targets, ds.windows, config, observer);
}

}  // namespace esnfb
