// Exact Kalman filter and steady-state gain solver.
//
// This is the reference implementation the adaptive filter is judged against.
// One step, given the previous posterior (x_post, N):
//   x_prior = F x_post
//   M'      = F N F^T + Pi                       (prior covariance)
//   K'      = M' H^T (H M' H^T + Sigma)^{-1}     (filter gain)
//   x_post' = x_prior + K' (y - H x_prior)
//   N'      = (I - K' H) M'                      (posterior covariance)
// The prediction form uses the gain K^p = F K', which advances the one-step-
// ahead estimate directly.
#pragma once

#include <vector>

#include "lkf/common.hpp"
#include "lkf/lds.hpp"

namespace lkf {

struct KalmanState {
    Vector x_post;  // posterior mean after consuming t observations
    Matrix N;       // posterior covariance
    Matrix M;       // prior covariance used at the last step
    Matrix Kf;      // filter gain used at the last step, n x p
    long t = 0;     // number of observations consumed
};

// Initial belief, before any observation. M and Kf start empty-shaped but
// valid; they are filled by the first step.
inline KalmanState make_kalman_init(const Vector& x0, const Matrix& N0) {
    if (N0.rows() != x0.size() || N0.cols() != x0.size())
        throw DimensionMismatch("N0 must be n x n");
    if (!is_symmetric(N0)) throw NotSymmetric("N0 is not symmetric");
    if (min_eigenvalue_sym(N0) < -1e-12) throw NotPsd("N0 is not PSD");
    KalmanState s;
    s.x_post = x0;
    s.N = symmetrized(N0);
    s.M = s.N;
    s.Kf = Matrix::Zero(x0.size(), 0);
    s.t = 0;
    return s;
}

// One measurement update. Covariances are symmetrized after each update to
// stop round-off from drifting them away from the PSD cone. The innovation
// covariance is handled through a Cholesky solve, never an explicit inverse.
inline KalmanState kf_step(const KalmanState& prev, const Vector& y,
                           const LdsModel& model) {
    const Eigen::Index n = model.n();
    const Eigen::Index p = model.p();
    if (y.size() != p) throw DimensionMismatch("observation has wrong dimension");
    if (prev.x_post.size() != n) throw DimensionMismatch("state has wrong dimension");

    const Matrix M = symmetrized(model.F * prev.N * model.F.transpose() + model.Pi);
    const Matrix S = symmetrized(model.H * M * model.H.transpose() + model.Sigma);

    Eigen::LLT<Matrix> llt(S);
    if (llt.info() != Eigen::Success)
        throw InnovationCovSingular("innovation covariance is not positive definite");
    // K = M H^T S^{-1}; solve S X = H M and transpose, using M's symmetry.
    const Matrix Kf = llt.solve(model.H * M).transpose();

    const Vector x_prior = model.F * prev.x_post;
    KalmanState next;
    next.x_post = x_prior + Kf * (y - model.H * x_prior);
    next.N = symmetrized((Matrix::Identity(n, n) - Kf * model.H) * M);
    next.M = M;
    next.Kf = Kf;
    next.t = prev.t + 1;
    return next;
}

// Folds kf_step over an observation sequence. The returned vector starts with
// the initial state, so its length is ys.size() + 1.
inline std::vector<KalmanState> filter_trajectory(const LdsModel& model,
                                                  const std::vector<Vector>& ys,
                                                  const KalmanState& init) {
    std::vector<KalmanState> out;
    out.reserve(ys.size() + 1);
    out.push_back(init);
    for (const Vector& y : ys) out.push_back(kf_step(out.back(), y, model));
    return out;
}

// The gain of the prediction-form filter: K^p = F K^f.
inline Matrix prediction_gain(const Matrix& Kf, const LdsModel& model) {
    if (Kf.rows() != model.n() || Kf.cols() != model.p())
        throw DimensionMismatch("Kf must be n x p");
    return model.F * Kf;
}

// One step of the prediction-form filter:
//   x_next_prior = F x_prior + K^p (y - H x_prior).
// With K^p = F K^f this equals F times the measurement-updated posterior.
inline Vector predict_step(const Vector& x_prior, const Vector& y,
                           const Matrix& Kp, const LdsModel& model) {
    if (x_prior.size() != model.n()) throw DimensionMismatch("x_prior has wrong dimension");
    if (y.size() != model.p()) throw DimensionMismatch("observation has wrong dimension");
    if (Kp.rows() != model.n() || Kp.cols() != model.p())
        throw DimensionMismatch("Kp must be n x p");
    return model.F * x_prior + Kp * (y - model.H * x_prior);
}

struct SteadyState {
    Matrix Kf;  // fixed-point filter gain
    Matrix M;   // fixed-point prior covariance
    Matrix N;   // fixed-point posterior covariance
    long iterations = 0;
};

// Iterates the covariance/gain recursion from N = I until the gain moves by
// less than `tol` in max-abs norm. For stable, detectable models this
// converges geometrically; NoConvergence reports the last residual otherwise.
inline SteadyState steady_state_gain(const LdsModel& model, double tol = 1e-12,
                                     long max_iter = 1000000) {
    const Eigen::Index n = model.n();
    Matrix N = Matrix::Identity(n, n);
    Matrix K_prev;
    double residual = std::numeric_limits<double>::infinity();
    for (long it = 1; it <= max_iter; ++it) {
        const Matrix M = symmetrized(model.F * N * model.F.transpose() + model.Pi);
        const Matrix S = symmetrized(model.H * M * model.H.transpose() + model.Sigma);
        Eigen::LLT<Matrix> llt(S);
        if (llt.info() != Eigen::Success)
            throw InnovationCovSingular("innovation covariance is not positive definite");
        const Matrix K = llt.solve(model.H * M).transpose();
        N = symmetrized((Matrix::Identity(n, n) - K * model.H) * M);
        if (K_prev.size() != 0) {
            residual = max_abs(K - K_prev);
            if (residual < tol) return SteadyState{K, M, N, it};
        }
        K_prev = K;
    }
    throw NoConvergence("steady-state gain did not converge in " +
                        format_int(max_iter) + " iterations; last residual " +
                        format_double(residual));
}

}  // namespace lkf
