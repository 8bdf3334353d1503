// Shared numeric helpers, error taxonomy, and per-step condition flags.
#pragma once

#include <Eigen/Dense>
#include <charconv>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <system_error>

namespace lkf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors
//
// Hard errors are exceptions; recoverable per-step conditions (clamps, guard
// rejections) are reported through StepFlag bits instead, so a long run is
// never aborted by a single noisy step.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionMismatch : Error { using Error::Error; };
struct NotSymmetric : Error { using Error::Error; };
struct NotPsd : Error { using Error::Error; };
struct SigmaSingular : Error { using Error::Error; };
struct InnovationCovSingular : Error { using Error::Error; };
struct NoConvergence : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// Configuration problems get their own branch so the CLI can map them to a
// distinct exit code (2, versus 3 for runtime failures).
struct ConfigError : Error { using Error::Error; };
struct ParseError : ConfigError { using ConfigError::ConfigError; };
struct ValidationError : ConfigError { using ConfigError::ConfigError; };
struct UnknownKey : ConfigError { using ConfigError::ConfigError; };

// ---------------------------------------------------------------------------
// Per-step condition flags
// ---------------------------------------------------------------------------

enum StepFlag : unsigned {
    kThetaClamped = 1u << 0,      // theta hit a configured bound
    kStabilityRejected = 1u << 1, // increment would destabilize F - K(theta)H
    kLambdaSkipped = 1u << 2,     // covariance update skipped (ill-conditioned)
    kGainStepClamped = 1u << 3,   // |gamma * grad| exceeded the overflow guard
    kLambdaProjected = 1u << 4,   // inverse-covariance estimate pushed back to PD
};

// CSV-friendly encoding: "-" when clean, otherwise "|"-joined short names.
inline std::string flag_names(unsigned flags) {
    if (flags == 0) return "-";
    std::string out;
    auto add = [&out](const char* name) {
        if (!out.empty()) out += '|';
        out += name;
    };
    if (flags & kThetaClamped) add("theta_clamp");
    if (flags & kStabilityRejected) add("stability_reject");
    if (flags & kLambdaSkipped) add("lambda_skip");
    if (flags & kGainStepClamped) add("step_clamp");
    if (flags & kLambdaProjected) add("lambda_proj");
    return out;
}

// ---------------------------------------------------------------------------
// Matrix helpers
// ---------------------------------------------------------------------------

inline Matrix symmetrized(const Matrix& a) { return 0.5 * (a + a.transpose()); }

// Max absolute entry; the norm used for gain-convergence measurements.
inline double max_abs(const Matrix& a) {
    return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
}

inline bool is_symmetric(const Matrix& a, double tol = 1e-12) {
    if (a.rows() != a.cols()) return false;
    return max_abs(a - a.transpose()) <= tol;
}

inline double min_eigenvalue_sym(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

// Largest eigenvalue modulus of a general square matrix.
inline double spectral_radius(const Matrix& a) {
    Eigen::EigenSolver<Matrix> es(a, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

// Condition number of a symmetric matrix from its eigenvalue moduli.
// Returns +inf when the smallest modulus underflows to zero.
inline double condition_sym(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
    const double hi = es.eigenvalues().cwiseAbs().maxCoeff();
    const double lo = es.eigenvalues().cwiseAbs().minCoeff();
    if (lo == 0.0) return std::numeric_limits<double>::infinity();
    return hi / lo;
}

// Symmetrize, then shift the spectrum so the smallest eigenvalue is at least
// `floor`. Sets `projected` when a shift was needed.
inline Matrix project_pd(const Matrix& a, double floor, bool* projected = nullptr) {
    Matrix s = symmetrized(a);
    const double lo = min_eigenvalue_sym(s);
    if (lo < floor) {
        s += (floor - lo) * Matrix::Identity(s.rows(), s.cols());
        if (projected) *projected = true;
    } else if (projected) {
        *projected = false;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Round-trip decimal formatting
//
// All emitted numbers go through std::to_chars with the shortest
// representation that parses back to the identical double. Output bytes are
// therefore a function of the value alone, independent of locale or printf
// precision defaults, which is what makes rerun outputs byte-identical.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string format_int(long long v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string format_uint(unsigned long long v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace lkf
