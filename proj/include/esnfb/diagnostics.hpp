#pragma once

#include <Eigen/Dense>

#include "esnfb/feedback.hpp"
#include "esnfb/readout.hpp"
#include "esnfb/reservoir.hpp"

namespace esnfb {

/// Certificate that feedback can locally improve the fit: the cost
/// gradient is degenerate for every target sequence exactly when
/// Tr(Mtilde_par) vanishes.
struct GradientCertificate {
    double grad_norm = 0.0;    ///< ||grad_V s_min|| for the given targets
    double trace_m_par = 0.0;  ///< Tr(Mtilde_par) >= 0
    int m_par_rank = 0;        ///< eigenvalues of Mtilde_par above tolerance
    bool degenerate = false;   ///< trace at numerical zero
};

/// Centered, 1/sqrt(N)-scaled state matrix X with X_{ik} =
/// (x_{k,i} - mean_i)/sqrt(N), so that X X' reproduces K_xx exactly.
inline MatrixXd centered_state_matrix(const Eigen::Ref<const MatrixXd>& states) {
    const int N = static_cast<int>(states.cols());
    if (N < 2) throw UsageError("centered_state_matrix: need at least two columns");
    const VectorXd mean = states.rowwise().mean();
    MatrixXd x = states.colwise() - mean;
    x /= std::sqrt(static_cast<double>(N));
    return x;
}

/// Computes the gradient certificate from a trajectory with sensitivities.
///
/// Tr(Mtilde_par) = sum_i tr(D_i (I - Pi_x) D_i') with D_i = dX/dV_i and
/// Pi_x = X' (X X')^{-1} X. The projector is never formed: each term is
/// tr(D_i D_i') - tr(G_i' K_xx^{-1} G_i) with G_i = X D_i', and K_xx^{-1}
/// is applied by solving (pseudoinverse fallback shared with the readout).
/// The rows of D_i are centered exactly like X's.
inline GradientCertificate certificate(const Trajectory& traj,
                                       const ReadoutSolution& sol,
                                       const Eigen::Ref<const VectorXd>& targets) {
    if (!traj.has_sensitivities())
        throw UsageError("certificate: trajectory has no sensitivities");
    const int n = traj.n();
    const int N = traj.windows.train;
    const double sqrt_n_steps = std::sqrt(static_cast<double>(N));

    GradientCertificate cert;
    cert.grad_norm = gradient(traj, sol, targets).norm();

    const MatrixXd x = centered_state_matrix(traj.train_states());
    const MatrixXd k_xx = x * x.transpose();
    PsdSolver solver(k_xx, N);

    MatrixXd m_par = MatrixXd::Zero(n, n);
    double power = 0.0;  // sum_i tr(D_i D_i'), scale for the zero test
    MatrixXd d_i(n, N);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < N; ++k) d_i.col(k) = traj.sensitivities[k].col(i);
        const VectorXd row_mean = d_i.rowwise().mean();
        d_i.colwise() -= row_mean;
        d_i /= sqrt_n_steps;

        const MatrixXd g_i = x * d_i.transpose();
        m_par.noalias() += d_i * d_i.transpose();
        m_par.noalias() -= g_i.transpose() * solver.solve(g_i);
        power += d_i.squaredNorm();
    }

    cert.trace_m_par = m_par.trace();
    cert.degenerate = cert.trace_m_par <= 1e-12 * power;

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(m_par, Eigen::EigenvaluesOnly);
    const VectorXd evals = es.eigenvalues();
    const double emax = evals.maxCoeff();
    cert.m_par_rank = 0;
    for (Eigen::Index i = 0; i < evals.size(); ++i)
        if (evals(i) > 1e-10 * std::max(emax, 0.0) && evals(i) > 0.0)
            ++cert.m_par_rank;
    return cert;
}

}  // namespace esnfb
