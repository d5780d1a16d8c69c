#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "esnfb/errors.hpp"
#include "esnfb/linalg.hpp"

namespace esnfb {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation { sigmoid, tanh };

/// Contraction bound a of the element-wise nonlinearity: the reservoir is
/// uniformly convergent whenever every singular value of the effective
/// state matrix stays strictly below a.
inline double contraction_bound(Activation g) {
    return g == Activation::sigmoid ? 4.0 : 1.0;
}

inline double activate(Activation g, double z) {
    return g == Activation::sigmoid ? 1.0 / (1.0 + std::exp(-z)) : std::tanh(z);
}

/// Derivative of the activation expressed through its output value x:
/// x(1-x) for the sigmoid, 1-x^2 for tanh.
inline double activation_deriv_from_output(Activation g, double x) {
    return g == Activation::sigmoid ? x * (1.0 - x) : 1.0 - x * x;
}

/// The fixed reservoir: internal weights A (n x n), input weights B (n),
/// the nonlinearity, and its contraction bound.
struct EsnParams {
    MatrixXd A;
    VectorXd B;
    Activation activation = Activation::sigmoid;
    double a = 4.0;

    int n() const { return static_cast<int>(B.size()); }

    /// Checks dimensions, the activation/bound pairing, and the convergence
    /// constraint sigma_max(A) < a.
    void validate() const {
        if (B.size() < 1 || A.rows() != B.size() || A.cols() != B.size())
            throw UsageError("EsnParams: A must be n x n and B length n with n >= 1");
        if (a <= 0.0) throw UsageError("EsnParams: contraction bound a must be positive");
        if (a != contraction_bound(activation))
            throw UsageError("EsnParams: a must be 4 for sigmoid, 1 for tanh");
        if (!(spectral_norm(A) < a))
            throw UsageError("EsnParams: largest singular value of A must be < a");
    }
};

/// Feedback gain: the scalar drive becomes u_k + V'x_k, which replaces the
/// state matrix A by A + B V'.
using FeedbackVector = VectorXd;

inline FeedbackVector zero_feedback(const EsnParams& params) {
    return VectorXd::Zero(params.n());
}

/// Effective state matrix Abar = A + B V'.
inline MatrixXd feedback_matrix(const EsnParams& params, const FeedbackVector& v) {
    return params.A + params.B * v.transpose();
}

/// True when the fed-back reservoir still satisfies the convergence
/// constraint sigma_max(A + B V') < a.
inline bool is_convergent(const EsnParams& params, const FeedbackVector& v) {
    return spectral_norm(feedback_matrix(params, v)) < params.a;
}

/// Window lengths of a dataset or trajectory: warmup steps are discarded
/// from every downstream statistic, train steps feed the readout
/// regression, test steps are held out for evaluation.
struct Windows {
    int warmup = 0;
    int train = 0;
    int test = 0;

    int total() const { return warmup + train + test; }

    void validate() const {
        if (warmup < 0 || train < 2 || test < 0)
            throw UsageError("Windows: warmup/test must be >= 0 and train >= 2");
    }
};

/// Reservoir state sequence plus (optionally) the per-step sensitivities
/// of the training-window states with respect to the feedback gain.
struct Trajectory {
    /// Column t holds the state after consuming input t, t = 0..total-1.
    MatrixXd states;
    /// sensitivities[k](i,j) = d x_{k,i} / d V_j for training step k;
    /// empty until sensitivities() fills it.
    std::vector<MatrixXd> sensitivities;
    Windows windows;

    int n() const { return static_cast<int>(states.rows()); }
    bool has_sensitivities() const { return !sensitivities.empty(); }

    auto train_states() const {
        return states.middleCols(windows.warmup, windows.train);
    }
    auto test_states() const {
        return states.middleCols(windows.warmup + windows.train, windows.test);
    }
};

/// Conventional start state: the midpoint of the activation's range.
inline VectorXd initial_state(const EsnParams& params) {
    return params.activation == Activation::sigmoid
               ? VectorXd::Constant(params.n(), 0.5).eval()
               : VectorXd::Zero(params.n()).eval();
}

namespace detail {

inline void apply_activation(Activation g, VectorXd& z) {
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = activate(g, z(i));
}

}  // namespace detail

/// One reservoir update x -> g((A + B V') x + B u).
inline VectorXd step(const EsnParams& params, const FeedbackVector& v,
                     const VectorXd& x, double u) {
    if (x.size() != params.B.size() || v.size() != params.B.size())
        throw UsageError("step: state/feedback dimension mismatch");
    if (!x.allFinite()) throw UsageError("step: non-finite state");
    VectorXd z = params.A * x + params.B * (u + v.dot(x));
    detail::apply_activation(params.activation, z);
    if (!z.allFinite()) throw NumericError("step: non-finite reservoir state");
    return z;
}

/// Runs the reservoir over the whole input sequence from x0 and records
/// every state. The first `windows.warmup` states are transients; callers
/// must exclude them from any statistic.
inline Trajectory run(const EsnParams& params, const FeedbackVector& v,
                      const VectorXd& inputs, const VectorXd& x0,
                      const Windows& windows) {
    windows.validate();
    const int total = windows.total();
    if (inputs.size() != total)
        throw UsageError("run: input length must equal warmup+train+test");
    if (x0.size() != params.B.size() || v.size() != params.B.size())
        throw UsageError("run: state/feedback dimension mismatch");

    const MatrixXd abar = feedback_matrix(params, v);
    Trajectory traj;
    traj.windows = windows;
    traj.states.resize(params.n(), total);

    VectorXd x = x0;
    VectorXd z(params.n());
    for (int t = 0; t < total; ++t) {
        z.noalias() = abar * x;
        z += params.B * inputs(t);
        detail::apply_activation(params.activation, z);
        if (!z.allFinite())
            throw NumericError("run: non-finite reservoir state at step " +
                               std::to_string(t));
        traj.states.col(t) = z;
        x.swap(z);
    }
    return traj;
}

/// Where the sensitivity recursion starts from zero: at the first training
/// step (the readout-window convention used by the batch optimizer) or at
/// the very start of the run, in which case warmup-propagated dependence
/// on V is carried into the training window.
enum class SensitivityStart { train_window, run_start };

/// Fills the training-window sensitivities dx_k/dV by forward iteration of
///   dx_k/dV = Sigma_k (B x_{k-1}' + Abar dx_{k-1}/dV),
/// where Sigma_k is the diagonal of activation derivatives at step k.
inline void sensitivities(const EsnParams& params, const FeedbackVector& v,
                          Trajectory& traj,
                          SensitivityStart start = SensitivityStart::train_window) {
    if (traj.states.size() == 0) throw UsageError("sensitivities: trajectory has no states");
    const int n = params.n();
    if (traj.n() != n) throw UsageError("sensitivities: dimension mismatch");
    const int w = traj.windows.warmup;
    const int N = traj.windows.train;

    const MatrixXd abar = feedback_matrix(params, v);
    traj.sensitivities.assign(N, MatrixXd::Zero(n, n));
    VectorXd deriv(n);
    auto advance = [&](MatrixXd& d, const MatrixXd& d_prev, int col,
                       const VectorXd& x_prev) {
        d.noalias() = params.B * x_prev.transpose();
        d.noalias() += abar * d_prev;
        const auto& x_new = traj.states.col(col);
        for (int i = 0; i < n; ++i)
            deriv(i) = activation_deriv_from_output(params.activation, x_new(i));
        d.array().colwise() *= deriv.array();
    };

    MatrixXd carried = MatrixXd::Zero(n, n);
    if (start == SensitivityStart::run_start && w > 0) {
        // The pre-run state is V-independent, so the recursion starts at
        // the first recorded column and runs through the warmup.
        MatrixXd next(n, n);
        for (int t = 1; t <= w; ++t) {
            advance(next, carried, t, traj.states.col(t - 1));
            carried.swap(next);
        }
        traj.sensitivities[0] = carried;
    }
    for (int k = 1; k < N; ++k)
        advance(traj.sensitivities[k], traj.sensitivities[k - 1], w + k,
                traj.states.col(w + k - 1));
}

}  // namespace esnfb
