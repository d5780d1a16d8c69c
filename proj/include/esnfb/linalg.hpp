#pragma once

#include <Eigen/Dense>

namespace esnfb {

/// Largest singular value via the symmetric eigenproblem of A'A.
/// Cheaper than a full SVD and accurate enough for constraint checks with
/// wide margins; use spectral_norm_svd for exact audits.
inline double spectral_norm(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m,
                                                      Eigen::EigenvaluesOnly);
    double lmax = es.eigenvalues().maxCoeff();
    return lmax > 0.0 ? std::sqrt(lmax) : 0.0;
}

/// Largest singular value from a full Jacobi SVD.
inline double spectral_norm_svd(const Eigen::MatrixXd& m) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues()(0);
}

}  // namespace esnfb
