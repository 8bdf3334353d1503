// Seed derivation and Gaussian sampling with named substreams.
//
// Every run owns independent substreams for process noise, observation noise,
// and initial-state draws, all derived from one master seed. Because the
// streams are separate engines, changing the horizon or toggling one consumer
// never desynchronizes the others.
#pragma once

#include <cstdint>
#include <random>

#include "lkf/common.hpp"

namespace lkf {

// Finalizer from the splitmix64 generator; a well-mixed 64-bit permutation.
inline std::uint64_t mix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
}

// Stream tags used by the simulator and harness.
enum StreamTag : std::uint64_t {
    kProcessNoiseStream = 0,
    kObservationNoiseStream = 1,
    kInitStateStream = 2,
};

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t run,
                                 std::uint64_t stream) {
    std::uint64_t s = master;
    s += 0x9E3779B97F4A7C15ull * (run + 1);
    s += 0x85EBCA77C2B2AE63ull * (stream + 1);
    return mix64(mix64(s) + 0x9E3779B97F4A7C15ull);
}

// One seeded stream of standard normal draws.
class GaussianStream {
public:
    explicit GaussianStream(std::uint64_t seed) : eng_(seed) {}

    double next() { return gauss_(eng_); }

    Vector next_vector(Eigen::Index n) {
        Vector v(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = gauss_(eng_);
        return v;
    }

private:
    std::mt19937_64 eng_;
    std::normal_distribution<double> gauss_{0.0, 1.0};
};

// Samples zero-mean Gaussians with a fixed covariance. The factor comes from
// an eigendecomposition rather than Cholesky so boundary-PSD covariances
// (zero variance directions, round-off negatives down to -1e-12) are accepted;
// anything below that tolerance is rejected as not PSD.
class CovarianceSampler {
public:
    explicit CovarianceSampler(const Matrix& cov, double tol = 1e-12) {
        if (cov.rows() != cov.cols())
            throw DimensionMismatch("covariance must be square");
        if (!is_symmetric(cov, tol))
            throw NotSymmetric("covariance must be symmetric");
        Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
        Vector ev = es.eigenvalues();
        for (Eigen::Index i = 0; i < ev.size(); ++i) {
            if (ev[i] < -tol)
                throw NotPsd("covariance has eigenvalue " + format_double(ev[i]));
            if (ev[i] < 0.0) ev[i] = 0.0;
        }
        factor_ = es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
    }

    Eigen::Index dim() const { return factor_.rows(); }

    // Consumes exactly dim() standard normals per call.
    Vector sample(GaussianStream& stream) const {
        return factor_ * stream.next_vector(factor_.cols());
    }

private:
    Matrix factor_;
};

// One-shot convenience wrapper around CovarianceSampler.
inline Vector sample_gaussian(const Matrix& cov, GaussianStream& stream) {
    return CovarianceSampler(cov).sample(stream);
}

}  // namespace lkf
