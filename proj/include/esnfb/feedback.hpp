#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "esnfb/readout.hpp"
#include "esnfb/reservoir.hpp"

namespace esnfb {

/// Batch gradient descent settings for the feedback gain.
struct GdConfig {
    double eta = 1.0;      ///< learning rate
    int steps = 100;       ///< gradient descent iterations (0 = no-feedback solve)
    double eps_a = 1e-5;   ///< margin pushed below a^2 by the spectral projection
    bool keep_best = true; ///< return the best iterate rather than the last
    bool alpha_init = false; ///< seed V from the gradient-ansatz initializer

    void validate() const {
        if (!(eta > 0.0)) throw UsageError("GdConfig: eta must be positive");
        if (steps < 0) throw UsageError("GdConfig: steps must be >= 0");
        if (!(eps_a > 0.0)) throw UsageError("GdConfig: eps_a must be positive");
    }
};

/// One row per visited iterate.
struct GdRecord {
    double s_min = 0.0;
    double grad_norm = std::numeric_limits<double>::quiet_NaN();
    bool projected = false; ///< the raw step was altered to stay convergent
    double sigma_max = 0.0; ///< sigma_max(A + B V') at this iterate
};

using GdHistory = std::vector<GdRecord>;

struct OptimizeResult {
    FeedbackVector v;
    ReadoutSolution solution;
    GdHistory history;
    int best_index = 0; ///< iterate the returned (v, solution) came from
};

/// Cost gradient for a fixed readout (W, C):
///   dS/dV_j = (1/N) sum_k (W' dx_k/dV_j)(W' x_k + C - y_k).
/// `targets` are the training-window targets the solution was fit to.
inline VectorXd gradient(const Trajectory& traj, const ReadoutSolution& sol,
                         const Eigen::Ref<const VectorXd>& targets) {
    if (!traj.has_sensitivities())
        throw UsageError("gradient: trajectory has no sensitivities");
    const int N = traj.windows.train;
    if (targets.size() != N) throw UsageError("gradient: target length mismatch");

    VectorXd grad = VectorXd::Zero(traj.n());
    const auto train = traj.train_states();
    for (int k = 0; k < N; ++k) {
        const double residual = sol.w.dot(train.col(k)) + sol.c - targets(k);
        grad.noalias() += residual * (traj.sensitivities[k].transpose() * sol.w);
    }
    return grad / static_cast<double>(N);
}

/// Corrects a gradient step so the fed-back reservoir stays convergent.
///
/// If A + B (v + delta_v)' has a squared singular value at or above a^2,
/// the offending right-singular direction u is pulled back by
/// u * (sigma^2 - a^2 + eps_a) / (2 B' Abar u); simultaneous violations are
/// corrected independently (their singular directions are orthogonal), and
/// sweeps repeat until the constraint holds. Directions orthogonal to every
/// applied u are never touched.
///
/// `applied` (optional) collects every correction direction used.
inline VectorXd project_step(const EsnParams& params, const FeedbackVector& v,
                             const VectorXd& delta_v, double eps_a,
                             std::vector<VectorXd>* applied = nullptr) {
    if (!delta_v.allFinite()) throw UsageError("project_step: non-finite step");
    if (v.size() != params.B.size() || delta_v.size() != params.B.size())
        throw UsageError("project_step: dimension mismatch");
    if (!is_convergent(params, v))
        throw UsageError("project_step: current feedback violates the constraint");

    const double a2 = params.a * params.a;
    VectorXd delta = delta_v;
    constexpr int kMaxSweeps = 64;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        const MatrixXd abar_new = feedback_matrix(params, v + delta);
        Eigen::JacobiSVD<MatrixXd> svd(abar_new, Eigen::ComputeFullV);
        const VectorXd& sigma = svd.singularValues();
        bool any = false;
        for (Eigen::Index i = 0; i < sigma.size(); ++i) {
            const double s2 = sigma(i) * sigma(i);
            if (s2 < a2) continue;
            any = true;
            const VectorXd u = svd.matrixV().col(i);
            const double denom = 2.0 * params.B.dot(abar_new * u);
            if (std::abs(denom) < 1e-12)
                throw ProjectionSingularError(
                    "project_step: constraint direction is uncontrollable");
            delta -= u * ((s2 - a2 + eps_a) / denom);
            if (applied) applied->push_back(u);
        }
        if (!any) return delta;
    }
    throw NumericError("project_step: correction sweeps did not converge");
}

/// Per-iterate observer for audits; receives the iterate index, the
/// feedback vector, and its history record (grad_norm not yet filled).
using GdObserver =
    std::function<void(int, const FeedbackVector&, const GdRecord&)>;

namespace detail {

struct Evaluation {
    Trajectory traj;
    ReadoutSolution sol;
};

inline Evaluation evaluate_feedback(const EsnParams& params,
                                    const FeedbackVector& v,
                                    const Eigen::Ref<const VectorXd>& inputs,
                                    const Eigen::Ref<const VectorXd>& targets,
                                    const Windows& fit_windows) {
    Evaluation ev;
    ev.traj = run(params, v, inputs, initial_state(params), fit_windows);
    ev.sol = solve(accumulate(ev.traj.train_states(),
                              targets.segment(fit_windows.warmup, fit_windows.train)));
    return ev;
}

}  // namespace detail

/// Gradient-ansatz initializer V = -alpha (grad_A s_min)' B.
///
/// grad_A is taken by central differences over the entries of A, each of
/// which needs a full re-trained run, so this costs 2n^2 evaluations; alpha
/// is picked from a shrinking grid capped where the reservoir stays
/// convergent. Returns zero when no candidate improves on V = 0.
inline VectorXd alpha_ansatz_init(const EsnParams& params,
                                  const Eigen::Ref<const VectorXd>& inputs,
                                  const Eigen::Ref<const VectorXd>& targets,
                                  const Windows& fit_windows,
                                  int grid = 10) {
    const int n = params.n();
    const double h = 1e-5;
    const double base =
        detail::evaluate_feedback(params, zero_feedback(params), inputs, targets,
                                  fit_windows).sol.s_min;

    MatrixXd grad_a(n, n);
    EsnParams perturbed = params;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            perturbed.A(i, j) = params.A(i, j) + h;
            const double up = detail::evaluate_feedback(
                perturbed, zero_feedback(params), inputs, targets, fit_windows)
                                  .sol.s_min;
            perturbed.A(i, j) = params.A(i, j) - h;
            const double down = detail::evaluate_feedback(
                perturbed, zero_feedback(params), inputs, targets, fit_windows)
                                    .sol.s_min;
            perturbed.A(i, j) = params.A(i, j);
            grad_a(i, j) = (up - down) / (2.0 * h);
        }
    }

    const VectorXd direction = -(grad_a.transpose() * params.B);
    const double dnorm = direction.norm();
    if (dnorm == 0.0) return zero_feedback(params);

    // Cap alpha where the constraint still holds, then scan downward.
    double alpha = 1.0 / dnorm;
    while (alpha > 1e-12 && !is_convergent(params, alpha * direction)) alpha *= 0.5;

    VectorXd best = zero_feedback(params);
    double best_s = base;
    for (int g = 0; g < grid; ++g, alpha *= 0.5) {
        const VectorXd cand = alpha * direction;
        if (!is_convergent(params, cand)) continue;
        try {
            const double s = detail::evaluate_feedback(params, cand, inputs,
                                                       targets, fit_windows)
                                 .sol.s_min;
            if (s < best_s) {
                best_s = s;
                best = cand;
            }
        } catch (const NumericError&) {
            // unstable candidate; skip
        }
    }
    return best;
}

/// Batch gradient descent on the feedback gain with the spectral
/// projection applied at every step.
///
/// Iterates {run -> solve readout -> gradient -> project -> update V} from
/// V = 0. Every visited iterate satisfies sigma_max(A + B V') < a. With
/// keep_best (default) the best-cost iterate is returned, so the result is
/// never worse than the no-feedback solution.
inline OptimizeResult optimize(const EsnParams& params,
                               const Eigen::Ref<const VectorXd>& inputs,
                               const Eigen::Ref<const VectorXd>& targets,
                               const Windows& windows, const GdConfig& config,
                               const GdObserver& observer = nullptr) {
    config.validate();
    windows.validate();
    if (inputs.size() < windows.warmup + windows.train ||
        targets.size() < windows.warmup + windows.train)
        throw UsageError("optimize: inputs/targets shorter than warmup+train");
    if (!is_convergent(params, zero_feedback(params)))
        throw UsageError("optimize: reservoir violates the convergence constraint");

    const Windows fit{windows.warmup, windows.train, 0};
    const int head = fit.total();
    const auto fit_inputs = inputs.head(head);
    const auto fit_targets = targets.head(head);
    const VectorXd train_targets = targets.segment(fit.warmup, fit.train);

    FeedbackVector v = zero_feedback(params);
    if (config.alpha_init)
        v = alpha_ansatz_init(params, fit_inputs, fit_targets, fit);

    OptimizeResult result;
    auto ev = detail::evaluate_feedback(params, v, fit_inputs, fit_targets, fit);

    auto record_iterate = [&](int index, const FeedbackVector& vi,
                              const detail::Evaluation& e, bool projected) {
        GdRecord rec;
        rec.s_min = e.sol.s_min;
        rec.projected = projected;
        rec.sigma_max = spectral_norm(feedback_matrix(params, vi));
        result.history.push_back(rec);
        if (observer) observer(index, vi, rec);
    };

    record_iterate(0, v, ev, false);
    const FeedbackVector v_start = v;
    VectorXd grad_start;
    FeedbackVector best_v = v;
    ReadoutSolution best_sol = ev.sol;
    double best_s = ev.sol.s_min;
    int best_index = 0;

    for (int i = 1; i <= config.steps; ++i) {
        sensitivities(params, v, ev.traj);
        const VectorXd grad = gradient(ev.traj, ev.sol, train_targets);
        if (i == 1) grad_start = grad;
        result.history.back().grad_norm = grad.norm();

        const VectorXd raw = -config.eta * grad;
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
        const bool projected = (corrected - raw).norm() > 0.0;

        FeedbackVector v_next = v + corrected;
        detail::Evaluation ev_next;
        try {
            ev_next = detail::evaluate_feedback(params, v_next, fit_inputs,
                                                fit_targets, fit);
        } catch (const NumericError&) {
            // Discard the overflowing iterate, halve the step once. The
            // halved point is still convergent: sigma_max is convex along
            // the segment between two convergent endpoints.
            v_next = v + 0.5 * corrected;
            ev_next = detail::evaluate_feedback(params, v_next, fit_inputs,
                                                fit_targets, fit);
        }

        record_iterate(i, v_next, ev_next, projected);
        if (ev_next.sol.s_min < best_s) {
            best_s = ev_next.sol.s_min;
            best_v = v_next;
            best_sol = ev_next.sol;
            best_index = i;
        }
        v = std::move(v_next);
        ev = std::move(ev_next);
    }

    // Gradient at the final iterate completes the history.
    sensitivities(params, v, ev.traj);
    result.history.back().grad_norm =
        gradient(ev.traj, ev.sol, train_targets).norm();

    // A large fixed learning rate can overshoot from the first iterate and
    // never revisit an improving point. When that happens, retry the first
    // step with geometrically shrunk lengths: for a nonzero gradient, a
    // small enough step along the descent direction reduces the cost while
    // staying convergent, so the returned iterate realizes the guaranteed
    // strict improvement. The probe direction is the exact gradient of the
    // objective being compared (warmup propagation included) — the
    // window-truncated recursion used inside the descent loop can point
    // uphill when its terms nearly cancel. Rejected probe candidates are
    // discarded like overflowing iterates.
    const double start_s = result.history.front().s_min;
    const bool stalled = best_s >= start_s * (1.0 - 1e-9);
    if (config.keep_best && stalled && config.steps >= 1 &&
        grad_start.norm() > 0.0) {
        auto ev_start =
            detail::evaluate_feedback(params, v_start, fit_inputs, fit_targets, fit);
        sensitivities(params, v_start, ev_start.traj, SensitivityStart::run_start);
        const VectorXd grad_exact =
            gradient(ev_start.traj, ev_start.sol, train_targets);
        if (grad_exact.norm() > 0.0) grad_start = grad_exact;
        for (int j = 1; j <= 12; ++j) {
            const VectorXd raw = -(config.eta * std::pow(2.0, -j)) * grad_start;
            FeedbackVector cand;
            detail::Evaluation ev_cand;
            try {
                cand = v_start + project_step(params, v_start, raw, config.eps_a);
                ev_cand = detail::evaluate_feedback(params, cand, fit_inputs,
                                                    fit_targets, fit);
            } catch (const NumericError&) {
                continue;
            }
            if (ev_cand.sol.s_min < best_s) {
                const bool was_projected = (cand - v_start - raw).norm() > 0.0;
                v = cand;
                ev = std::move(ev_cand);
                record_iterate(config.steps + 1, v, ev, was_projected);
                sensitivities(params, v, ev.traj);
                result.history.back().grad_norm =
                    gradient(ev.traj, ev.sol, train_targets).norm();
                best_s = ev.sol.s_min;
                best_v = v;
                best_sol = ev.sol;
                best_index = config.steps + 1;
                break;
            }
        }
    }

    if (config.keep_best) {
        result.v = std::move(best_v);
        result.solution = std::move(best_sol);
        result.best_index = best_index;
    } else {
        result.v = std::move(v);
        result.solution = std::move(ev.sol);
        result.best_index = config.steps;
    }
    return result;
}

}  // namespace esnfb
