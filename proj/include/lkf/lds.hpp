// Linear dynamical system models and ground-truth simulation.
//
// The generative model is
//   x[t+1] = F x[t] + m[t],   m ~ N(0, Pi)
//   y[t]   = H x[t] + n[t],   n ~ N(0, Sigma)
// with m and n independent white noise sequences.
#pragma once

#include <cstdint>
#include <vector>

#include "lkf/common.hpp"
#include "lkf/rng.hpp"

namespace lkf {

struct LdsModel {
    Matrix F;      // state transition, n x n
    Matrix H;      // observation map, p x n
    Matrix Pi;     // process-noise covariance, n x n
    Matrix Sigma;  // observation-noise covariance, p x p

    Eigen::Index n() const { return F.rows(); }
    Eigen::Index p() const { return H.rows(); }
};

// Checks shapes, symmetry (tolerance 1e-12), and definiteness: Pi must be
// PSD, Sigma strictly PD since the filter inverts H M H^T + Sigma.
inline LdsModel validate_model(const LdsModel& m) {
    if (m.F.rows() == 0 || m.F.rows() != m.F.cols())
        throw DimensionMismatch("F must be square and non-empty, got " +
                                format_int(m.F.rows()) + "x" + format_int(m.F.cols()));
    const Eigen::Index n = m.F.rows();
    if (m.H.cols() != n || m.H.rows() == 0)
        throw DimensionMismatch("H must be p x n with n = " + format_int(n));
    const Eigen::Index p = m.H.rows();
    if (m.Pi.rows() != n || m.Pi.cols() != n)
        throw DimensionMismatch("Pi must be n x n");
    if (m.Sigma.rows() != p || m.Sigma.cols() != p)
        throw DimensionMismatch("Sigma must be p x p");

    if (!is_symmetric(m.Pi)) throw NotSymmetric("Pi is not symmetric");
    if (!is_symmetric(m.Sigma)) throw NotSymmetric("Sigma is not symmetric");

    if (min_eigenvalue_sym(m.Pi) < -1e-12)
        throw NotPsd("Pi has a negative eigenvalue");
    if (min_eigenvalue_sym(m.Sigma) <= 0.0)
        throw SigmaSingular("Sigma must be strictly positive definite");
    return m;
}

struct Trajectory {
    std::vector<Vector> states;        // x[0..T-1]
    std::vector<Vector> observations;  // y[0..T-1]
    std::uint64_t seed = 0;            // master seed this was drawn from
    std::uint64_t run_index = 0;       // substream selector within the seed
};

// Rolls the model forward for T steps. Deterministic for fixed
// (model, seed, run_index, x0): process and observation noise come from
// separate substreams, each advancing exactly one draw of its dimension per
// step.
inline Trajectory simulate(const LdsModel& model, long T, std::uint64_t seed,
                           const Vector& x0, std::uint64_t run_index = 0) {
    if (T < 1) throw ValidationError("simulate requires T >= 1");
    if (x0.size() != model.n())
        throw DimensionMismatch("x0 has wrong dimension");

    GaussianStream process(derive_seed(seed, run_index, kProcessNoiseStream));
    GaussianStream observation(derive_seed(seed, run_index, kObservationNoiseStream));
    CovarianceSampler process_noise(model.Pi);
    CovarianceSampler observation_noise(model.Sigma);

    Trajectory traj;
    traj.seed = seed;
    traj.run_index = run_index;
    traj.states.reserve(static_cast<std::size_t>(T));
    traj.observations.reserve(static_cast<std::size_t>(T));

    Vector x = x0;
    for (long t = 0; t < T; ++t) {
        traj.states.push_back(x);
        traj.observations.push_back(model.H * x + observation_noise.sample(observation));
        x = model.F * x + process_noise.sample(process);
    }
    return traj;
}

}  // namespace lkf
