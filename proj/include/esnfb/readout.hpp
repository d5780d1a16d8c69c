#pragma once

#include <Eigen/Dense>

#include "esnfb/errors.hpp"
#include "esnfb/reservoir.hpp"

namespace esnfb {

/// Sample moments of the training window: means, the state covariance
/// K_xx = <xx'> - <x><x'>, the cross-covariance K_xy and the target
/// variance, all with the population (1/N) convention.
struct MomentStats {
    VectorXd x_mean;
    double y_mean = 0.0;
    MatrixXd k_xx;
    VectorXd k_xy;
    double y_var = 0.0;
    int count = 0;
};

/// Exact least-squares readout y ~ W'x + C with the minimized cost
/// s_min = (sigma_y^2 - K_xy' K_xx^{-1} K_xy)/2.
struct ReadoutSolution {
    VectorXd w;
    double c = 0.0;
    double s_min = 0.0;
    double nmse_train = 0.0;
    bool used_pseudoinverse = false;
};

/// Solver for symmetric positive semi-definite systems with a shared
/// pseudoinverse fallback: eigenvalues below max(n, N) * eps * lambda_max
/// are treated as zero and their directions dropped.
class PsdSolver {
public:
    PsdSolver(const MatrixXd& m, int sample_count) {
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
        if (es.info() != Eigen::Success)
            throw NumericError("PsdSolver: eigendecomposition failed");
        evecs_ = es.eigenvectors();
        evals_ = es.eigenvalues();
        const double lmax = evals_.maxCoeff();
        const double dim = static_cast<double>(
            std::max<int>(static_cast<int>(m.rows()), sample_count));
        tol_ = dim * std::numeric_limits<double>::epsilon() * std::max(lmax, 0.0);
        rank_ = 0;
        for (Eigen::Index i = 0; i < evals_.size(); ++i)
            if (evals_(i) > tol_) ++rank_;
    }

    bool rank_deficient() const { return rank_ < evals_.size(); }
    int rank() const { return rank_; }

    /// Pseudoinverse application m^+ rhs; components along dropped
    /// eigendirections are set to zero.
    VectorXd solve(const VectorXd& rhs) const {
        VectorXd coeffs = evecs_.transpose() * rhs;
        for (Eigen::Index i = 0; i < evals_.size(); ++i)
            coeffs(i) = evals_(i) > tol_ ? coeffs(i) / evals_(i) : 0.0;
        return evecs_ * coeffs;
    }

    MatrixXd solve(const MatrixXd& rhs) const {
        MatrixXd coeffs = evecs_.transpose() * rhs;
        for (Eigen::Index i = 0; i < evals_.size(); ++i) {
            if (evals_(i) > tol_)
                coeffs.row(i) /= evals_(i);
            else
                coeffs.row(i).setZero();
        }
        return evecs_ * coeffs;
    }

private:
    MatrixXd evecs_;
    VectorXd evals_;
    double tol_ = 0.0;
    int rank_ = 0;
};

/// Accumulates moments over exactly the training window. Two passes:
/// means first, then centered products, which avoids the cancellation of
/// the textbook <xx'> - <x><x'> form.
inline MomentStats accumulate(const Eigen::Ref<const MatrixXd>& states,
                              const Eigen::Ref<const VectorXd>& targets) {
    const int N = static_cast<int>(states.cols());
    if (N != targets.size()) throw UsageError("accumulate: length mismatch");
    if (N < 2) throw UsageError("accumulate: need at least two samples");

    MomentStats stats;
    stats.count = N;
    stats.x_mean = states.rowwise().mean();
    stats.y_mean = targets.mean();
    MatrixXd xc = states.colwise() - stats.x_mean;
    VectorXd yc = targets.array() - stats.y_mean;
    stats.k_xx.noalias() = xc * xc.transpose();
    stats.k_xx /= static_cast<double>(N);
    stats.k_xy.noalias() = xc * yc;
    stats.k_xy /= static_cast<double>(N);
    stats.y_var = yc.squaredNorm() / static_cast<double>(N);
    return stats;
}

/// Solves the regression through the eigendecomposition of K_xx so that
/// the pseudoinverse fallback for rank-deficient covariances shares the
/// same code path.
inline ReadoutSolution solve(const MomentStats& stats) {
    if (stats.count < 2) throw UsageError("solve: invalid moment statistics");
    if (stats.y_var <= 0.0)
        throw DegenerateError("solve: target variance is zero, NMSE undefined");

    PsdSolver solver(stats.k_xx, stats.count);
    ReadoutSolution sol;
    sol.w = solver.solve(stats.k_xy);
    sol.used_pseudoinverse = solver.rank_deficient();
    sol.c = stats.y_mean - sol.w.dot(stats.x_mean);
    const double quad = stats.k_xy.dot(sol.w);  // K_xy' K_xx^{-1} K_xy >= 0
    sol.s_min = std::max(0.0, 0.5 * (stats.y_var - quad));
    sol.nmse_train = 2.0 * sol.s_min / stats.y_var;
    return sol;
}

/// Readout predictions yhat_k = W'x_k + C for every column of `states`.
inline VectorXd predict(const ReadoutSolution& sol,
                        const Eigen::Ref<const MatrixXd>& states) {
    if (states.rows() != sol.w.size()) throw UsageError("predict: dimension mismatch");
    return (states.transpose() * sol.w).array() + sol.c;
}

/// Mean-squared error normalized by the variance of the evaluated
/// window's own targets. In [0,1] on training data; may exceed 1 on an
/// arbitrary test set.
inline double nmse(const Eigen::Ref<const VectorXd>& predictions,
                   const Eigen::Ref<const VectorXd>& targets) {
    if (predictions.size() != targets.size()) throw UsageError("nmse: length mismatch");
    const double n = static_cast<double>(targets.size());
    const double mean = targets.mean();
    const double var = (targets.array() - mean).square().sum() / n;
    if (var <= 0.0) throw DegenerateError("nmse: target variance is zero");
    return (predictions - targets).squaredNorm() / n / var;
}

}  // namespace esnfb
