// Adaptive-gain filter: online gain estimation by the recursive
// prediction error method with a multiplicative (exponentiated-gradient)
// parametrization.
//
// The filter runs in prediction form with gain K(theta) = exp(theta) * K0:
//   y_rec = H x_hat                      reconstructed input
//   eps   = y - y_rec                    reconstruction error
//   x_hat' = F x_hat + K(theta) eps      state update
//   v_hat = H w_hat                      output sensitivity
//   w_hat' = K(theta) eps + (F - K(theta) H) w_hat
//   theta' = theta + gamma(t) * v_hat^T Lambda_inv eps
// where w_hat tracks d x_hat / d theta. Because every entry of K is an
// exponential in theta, dK/dtheta equals K itself and the additive theta
// update is exactly a multiplicative update of the gain. Lambda_inv estimates
// the inverse covariance of eps and advances last, so the gradient always
// reads the pre-update estimate.
//
// Everything here reads only (F, H), the running state, and the incoming
// observation; the true noise covariances never enter. The graph runtime in
// netgraph.hpp executes the same recursion synapse-by-synapse.
#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "lkf/common.hpp"

namespace lkf {

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

enum class GammaRule { constant, c_over_t, tau_decay };

struct GammaSchedule {
    GammaRule rule = GammaRule::tau_decay;
    double c = 0.02;
    double floor = 1e-4;  // used by c_over_t only
    double tau = 1000.0;  // used by tau_decay only

    static GammaSchedule constant(double c) {
        return GammaSchedule{GammaRule::constant, c, 0.0, 0.0};
    }
    static GammaSchedule c_over_t(double c, double floor) {
        return GammaSchedule{GammaRule::c_over_t, c, floor, 0.0};
    }
    static GammaSchedule tau_decay(double c, double tau) {
        return GammaSchedule{GammaRule::tau_decay, c, 0.0, tau};
    }

    double operator()(long t) const {
        switch (rule) {
            case GammaRule::constant:
                return c;
            case GammaRule::c_over_t:
                return std::max(floor, c / static_cast<double>(std::max<long>(t, 1)));
            case GammaRule::tau_decay:
                return c / (1.0 + static_cast<double>(t) / tau);
        }
        return c;
    }
};

inline double gamma_at(long t, const GammaSchedule& schedule) { return schedule(t); }

enum class LambdaUpdateMode { direct, inverse };

struct RpeConfig {
    GammaSchedule gamma = GammaSchedule::tau_decay(0.02, 1000.0);
    LambdaUpdateMode lambda_update = LambdaUpdateMode::inverse;
    double theta_min = -10.0;
    double theta_max = 10.0;
    bool stability_guard = true;

    // Numeric safety rails; every activation is reported in StepOutput flags.
    double max_step = 50.0;           // cap on |gamma * grad| per step
    double lambda_cond_limit = 1e12;  // skip covariance updates beyond this
    double lambda_pd_floor = 1e-10;   // smallest eigenvalue kept in Lambda_inv
};

// ---------------------------------------------------------------------------
// Gain parametrization
// ---------------------------------------------------------------------------

// K(theta) = exp(theta) * K0 entrywise, so dK/dtheta = K exactly and the sign
// pattern of the gain can never leave the sign pattern of K0.
inline Matrix gain_from_theta(double theta, const Matrix& K0) {
    return std::exp(theta) * K0;
}

inline Matrix gain_from_theta(const Matrix& theta_mat, const Matrix& K0) {
    if (theta_mat.rows() != K0.rows() || theta_mat.cols() != K0.cols())
        throw DimensionMismatch("theta matrix must match K0 shape");
    return (theta_mat.array().exp() * K0.array()).matrix();
}

// Multiplicative form of the same update: every entry scaled by
// exp(gamma * grad). Equals the additive theta path exactly (same exp call).
// The exponent is capped at +-max_step against overflow; a cap sets
// kGainStepClamped in *flags when provided.
inline Matrix multiplicative_gain_update(const Matrix& K, double grad, double gamma,
                                         unsigned* flags = nullptr,
                                         double max_step = 50.0) {
    double step = gamma * grad;
    if (std::abs(step) > max_step) {
        step = std::copysign(max_step, step);
        if (flags) *flags |= kGainStepClamped;
    }
    return std::exp(step) * K;
}

// ---------------------------------------------------------------------------
// Reconstruction-error covariance estimates
// ---------------------------------------------------------------------------

// Direct form: Lambda' = Lambda + gamma (eps eps^T - Lambda).
// A convex move toward the rank-one sample, so symmetry and PSD are preserved
// for gamma in (0, 1] (that range is a documented precondition, not checked).
inline Matrix lambda_update_direct(const Matrix& Lambda, const Vector& eps,
                                   double gamma) {
    return Lambda + gamma * (eps * eps.transpose() - Lambda);
}

// Inverse form: Lambda_inv' = Lambda_inv + gamma [Lambda_inv - (Lambda_inv
// eps)(Lambda_inv eps)^T]. Agrees with inverting the direct form to first
// order in gamma while touching only locally available products. The rank-one
// subtraction can momentarily break positive definiteness at large gamma, so
// the result is symmetrized and its spectrum floored at pd_floor
// (kLambdaProjected in *flags when the floor engages).
inline Matrix lambda_update_inverse(const Matrix& Lambda_inv, const Vector& eps,
                                    double gamma, unsigned* flags = nullptr,
                                    double pd_floor = 1e-10) {
    const Vector lam = Lambda_inv * eps;
    Matrix cand = Lambda_inv + gamma * (Lambda_inv - lam * lam.transpose());
    bool projected = false;
    cand = project_pd(cand, pd_floor, &projected);
    if (projected && flags) *flags |= kLambdaProjected;
    return cand;
}

// ---------------------------------------------------------------------------
// Scalar-theta filter state and step
// ---------------------------------------------------------------------------

struct RpeState {
    Vector x_hat;       // predictive state estimate
    Vector w_hat;       // d x_hat / d theta
    double theta = 0.0;
    Matrix K0;          // baseline gain, n x p
    Matrix Lambda_inv;  // running inverse covariance of eps
    Matrix Lambda;      // direct-form estimate; only advanced in direct mode
    long t = 0;
};

struct StepOutput {
    Vector y_rec;  // H x_hat
    Vector eps;    // y - y_rec
    Vector v_hat;  // H w_hat
    double grad = 0.0;
    unsigned flags = 0;
};

inline RpeState make_rpe_state(const Matrix& K0, double theta0 = 0.0) {
    if (K0.rows() == 0 || K0.cols() == 0)
        throw DimensionMismatch("K0 must be n x p and non-empty");
    RpeState s;
    s.x_hat = Vector::Zero(K0.rows());
    s.w_hat = Vector::Zero(K0.rows());
    s.theta = theta0;
    s.K0 = K0;
    s.Lambda_inv = Matrix::Identity(K0.cols(), K0.cols());
    s.Lambda = Matrix::Identity(K0.cols(), K0.cols());
    s.t = 0;
    return s;
}

namespace detail {

// Shared tail of both theta variants: advance the covariance estimate, with
// the ill-conditioning skip applied to the candidate before it is accepted.
inline void advance_lambda(RpeState& next, const Vector& eps, double g,
                           const RpeConfig& cfg, unsigned& flags) {
    if (cfg.lambda_update == LambdaUpdateMode::direct) {
        const Matrix cand = symmetrized(lambda_update_direct(next.Lambda, eps, g));
        if (condition_sym(cand) > cfg.lambda_cond_limit) {
            flags |= kLambdaSkipped;
            return;
        }
        next.Lambda = cand;
        next.Lambda_inv = symmetrized(cand.inverse());
    } else {
        unsigned guard_flags = 0;
        const Matrix cand = lambda_update_inverse(next.Lambda_inv, eps, g,
                                                  &guard_flags, cfg.lambda_pd_floor);
        if (condition_sym(cand) > cfg.lambda_cond_limit) {
            flags |= kLambdaSkipped;
            return;
        }
        flags |= guard_flags;
        next.Lambda_inv = cand;
    }
}

// Clamp one theta increment, then apply bounds. Returns the candidate value.
inline double clamp_theta_step(double theta, double raw_step, const RpeConfig& cfg,
                               unsigned& flags) {
    double step = raw_step;
    if (std::abs(step) > cfg.max_step) {
        step = std::copysign(cfg.max_step, step);
        flags |= kGainStepClamped;
    }
    double cand = theta + step;
    if (cand < cfg.theta_min) {
        cand = cfg.theta_min;
        flags |= kThetaClamped;
    } else if (cand > cfg.theta_max) {
        cand = cfg.theta_max;
        flags |= kThetaClamped;
    }
    return cand;
}

}  // namespace detail

// One adaptive step. Only (F, H) of the model are read; noise covariances
// stay unknown to the filter. Update order is fixed: state, sensitivity, and
// theta all read the step-entry Lambda_inv, which advances last.
inline std::pair<RpeState, StepOutput> rpe_step(const RpeState& state, const Vector& y,
                                                const Matrix& F, const Matrix& H,
                                                const RpeConfig& cfg) {
    const Eigen::Index n = state.K0.rows();
    const Eigen::Index p = state.K0.cols();
    if (F.rows() != n || F.cols() != n) throw DimensionMismatch("F must be n x n");
    if (H.rows() != p || H.cols() != n) throw DimensionMismatch("H must be p x n");
    if (y.size() != p) throw DimensionMismatch("observation has wrong dimension");

    StepOutput out;
    out.y_rec = H * state.x_hat;
    out.eps = y - out.y_rec;

    const Matrix K = gain_from_theta(state.theta, state.K0);

    RpeState next = state;
    next.x_hat = F * state.x_hat + K * out.eps;
    out.v_hat = H * state.w_hat;
    next.w_hat = K * out.eps + (F - K * H) * state.w_hat;

    const Vector lam = state.Lambda_inv * out.eps;
    out.grad = out.v_hat.dot(lam);

    const double g = cfg.gamma(state.t);
    double cand = detail::clamp_theta_step(state.theta, g * out.grad, cfg, out.flags);
    if (cfg.stability_guard &&
        spectral_radius(F - gain_from_theta(cand, state.K0) * H) >= 1.0) {
        cand = state.theta;
        out.flags |= kStabilityRejected;
    }
    next.theta = cand;

    detail::advance_lambda(next, out.eps, g, cfg, out.flags);
    next.t = state.t + 1;
    return {next, out};
}

// ---------------------------------------------------------------------------
// Matrix-theta variant
//
// Generalization where every gain entry carries its own exponent:
// K_ij = exp(theta_ij) * K0_ij. The derivative of K with respect to theta_ij
// has a single nonzero entry, so each parameter needs its own sensitivity
// vector w_ij, all propagated by the same map F - K(theta) H:
//   w_ij' = (F - K(theta) H) w_ij + e_i K_ij eps_j
//   theta_ij' = theta_ij + gamma (H w_ij)^T Lambda_inv eps
// ---------------------------------------------------------------------------

struct MatrixThetaState {
    Vector x_hat;
    Matrix theta_mat;        // n x p
    std::vector<Vector> W;   // sensitivity stack, W[i * p + j] = w_ij
    Matrix K0;
    Matrix Lambda_inv;
    Matrix Lambda;
    long t = 0;
};

struct MatrixStepOutput {
    Vector y_rec;
    Vector eps;
    Matrix grad;  // n x p, entry (i,j) is (H w_ij)^T Lambda_inv eps
    unsigned flags = 0;
};

inline MatrixThetaState make_matrix_theta_state(const Matrix& K0, double theta0 = 0.0) {
    if (K0.rows() == 0 || K0.cols() == 0)
        throw DimensionMismatch("K0 must be n x p and non-empty");
    MatrixThetaState s;
    s.x_hat = Vector::Zero(K0.rows());
    s.theta_mat = Matrix::Constant(K0.rows(), K0.cols(), theta0);
    s.W.assign(static_cast<std::size_t>(K0.rows() * K0.cols()),
               Vector::Zero(K0.rows()));
    s.K0 = K0;
    s.Lambda_inv = Matrix::Identity(K0.cols(), K0.cols());
    s.Lambda = Matrix::Identity(K0.cols(), K0.cols());
    s.t = 0;
    return s;
}

inline std::pair<MatrixThetaState, MatrixStepOutput> rpe_step_matrix(
    const MatrixThetaState& state, const Vector& y, const Matrix& F, const Matrix& H,
    const RpeConfig& cfg) {
    const Eigen::Index n = state.K0.rows();
    const Eigen::Index p = state.K0.cols();
    if (F.rows() != n || F.cols() != n) throw DimensionMismatch("F must be n x n");
    if (H.rows() != p || H.cols() != n) throw DimensionMismatch("H must be p x n");
    if (y.size() != p) throw DimensionMismatch("observation has wrong dimension");

    MatrixStepOutput out;
    out.y_rec = H * state.x_hat;
    out.eps = y - out.y_rec;
    out.grad = Matrix::Zero(n, p);

    const Matrix K = gain_from_theta(state.theta_mat, state.K0);
    const Matrix A = F - K * H;
    const Vector lam = state.Lambda_inv * out.eps;
    const double g = cfg.gamma(state.t);

    MatrixThetaState next = state;
    next.x_hat = F * state.x_hat + K * out.eps;

    Matrix theta_cand(n, p);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) {
            const Vector& w = state.W[static_cast<std::size_t>(i * p + j)];
            out.grad(i, j) = (H * w).dot(lam);
            theta_cand(i, j) = detail::clamp_theta_step(state.theta_mat(i, j),
                                                        g * out.grad(i, j), cfg,
                                                        out.flags);
            Vector w_next = A * w;
            w_next[i] += K(i, j) * out.eps[j];
            next.W[static_cast<std::size_t>(i * p + j)] = w_next;
        }
    }

    // The guard decides on the whole candidate gain; a rejection drops every
    // increment for this step so the parameters stay mutually consistent.
    if (cfg.stability_guard &&
        spectral_radius(F - gain_from_theta(theta_cand, state.K0) * H) >= 1.0) {
        theta_cand = state.theta_mat;
        out.flags |= kStabilityRejected;
    }
    next.theta_mat = theta_cand;

    // Reuse the scalar-variant covariance tail through a shim state.
    RpeState shim;
    shim.Lambda = next.Lambda;
    shim.Lambda_inv = next.Lambda_inv;
    detail::advance_lambda(shim, out.eps, g, cfg, out.flags);
    next.Lambda = shim.Lambda;
    next.Lambda_inv = shim.Lambda_inv;

    next.t = state.t + 1;
    return {next, out};
}

}  // namespace lkf
