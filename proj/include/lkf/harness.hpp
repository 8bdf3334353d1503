// Experiment harness: run a configured filter against simulated data and
// emit deterministic metrics.
//
// Every experiment also runs the exact filter alongside the configured one,
// so each metrics row carries both prediction errors. Output text is
// assembled with the deterministic number formatting from common.hpp and
// written in binary mode, which makes repeated runs byte-identical.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lkf/common.hpp"
#include "lkf/config.hpp"
#include "lkf/kalman.hpp"
#include "lkf/lds.hpp"
#include "lkf/netgraph.hpp"
#include "lkf/rng.hpp"
#include "lkf/rpe.hpp"

namespace lkf {

// ---------------------------------------------------------------------------
// Small statistics helpers
// ---------------------------------------------------------------------------

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
    std::size_t points = 0;
};

// Ordinary least squares y = slope * x + intercept with the coefficient of
// determination. Fewer than two points leave the default (flat, r2 = 0).
inline LineFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
    LineFit fit;
    if (xs.size() != ys.size() || xs.size() < 2) return fit;
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (sxx == 0.0) return fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    const double ss_res = syy - sxy * sxy / sxx;
    fit.r2 = syy == 0.0 ? (ss_res == 0.0 ? 1.0 : 0.0) : 1.0 - ss_res / syy;
    fit.points = xs.size();
    return fit;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// One row per (run, step). The prediction errors are measured before the
// step's observation is consumed; gain diagnostics are measured after.
struct MetricsRow {
    long run = 0;
    long t = 0;
    double mse_classic = 0.0;  // squared error of the exact filter's prediction
    double mse_rpe = 0.0;      // squared error of the configured filter's prediction
    double gain_err = 0.0;     // sup-norm distance of the current gain from optimal
    double theta = 0.0;        // current exponent (mean entry for rpe_matrix)
    double lambda_cond = 0.0;  // condition number of the covariance estimate
    unsigned flags = 0;
};

struct ExperimentResult {
    std::vector<MetricsRow> rows;          // runs concatenated, t restarts at 0
    std::vector<Trajectory> trajectories;  // kept only on request

    SteadyState oracle;  // exact steady-state quantities for the model
    Matrix Kp_star;      // optimal prediction-form gain F Kf*
    Matrix K0_used;      // the adaptive filter's baseline gain (empty for classic)

    double terminal_gain_err_median = 0.0;
    double terminal_theta_median = 0.0;
    double mse_ratio_final20_median = 1.0;
    double convergence_slope_median = 0.0;
    long flag_events_total = 0;
};

inline Matrix resolve_k0(const ExperimentConfig& cfg, const Matrix& Kp_star) {
    switch (cfg.k0_mode) {
        case K0Mode::from_observation: {
            const Matrix base = cfg.model.H.transpose();
            const double scale = max_abs(base);
            if (scale == 0.0)
                throw ValidationError("default k0 requires a nonzero H");
            return (0.1 / scale) * base;
        }
        case K0Mode::scaled_optimal:
            return cfg.k0_scale * Kp_star;
        case K0Mode::explicit_value:
            return cfg.k0_value;
    }
    throw ValidationError("unhandled k0 mode");
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       bool keep_trajectories = false) {
    const LdsModel& model = cfg.model;
    const Eigen::Index n = model.n();

    ExperimentResult res;
    res.oracle = steady_state_gain(model, cfg.oracle.tol, cfg.oracle.max_iter);
    res.Kp_star = prediction_gain(res.oracle.Kf, model);
    if (cfg.filter != FilterKind::classic)
        res.K0_used = resolve_k0(cfg, res.Kp_star);

    // When sampled, the initial state is drawn from the prior the exact
    // filter starts from, N(0, F N0 F^T + Pi): under that prior the filter's
    // posterior covariance is also the true error covariance at every step.
    CovarianceSampler x0_sampler(Matrix::Identity(1, 1));
    if (cfg.x0_mode == X0Mode::sampled)
        x0_sampler = CovarianceSampler(
            symmetrized(model.F * cfg.N0 * model.F.transpose() + model.Pi));

    std::vector<double> terminal_gain_errs, terminal_thetas, mse_ratios, slopes;
    res.rows.reserve(static_cast<std::size_t>(cfg.runs * cfg.T));

    for (long run = 0; run < cfg.runs; ++run) {
        Vector x0 = Vector::Zero(n);
        if (cfg.x0_mode == X0Mode::fixed) {
            x0 = cfg.x0_value;
        } else if (cfg.x0_mode == X0Mode::sampled) {
            GaussianStream stream(derive_seed(cfg.seed, static_cast<std::uint64_t>(run),
                                              kInitStateStream));
            x0 = x0_sampler.sample(stream);
        }
        Trajectory traj = simulate(model, cfg.T, cfg.seed, x0, run);

        KalmanState classic = make_kalman_init(Vector::Zero(n), cfg.N0);
        RpeState rpe;
        MatrixThetaState rpe_mat;
        NetGraph graph;
        switch (cfg.filter) {
            case FilterKind::classic:
                break;
            case FilterKind::rpe:
                rpe = make_rpe_state(res.K0_used, cfg.theta0);
                break;
            case FilterKind::rpe_matrix:
                rpe_mat = make_matrix_theta_state(res.K0_used, cfg.theta0);
                break;
            case FilterKind::netgraph:
                graph = build_architecture(model.F, model.H, res.K0_used, cfg.theta0,
                                           cfg.rpe);
                break;
        }

        // Errors surfacing from a filter step are annotated with their run
        // and step before propagating.
        auto step_once = [&](long t) {
            const Vector& x_true = traj.states[static_cast<std::size_t>(t)];
            const Vector& y = traj.observations[static_cast<std::size_t>(t)];

            MetricsRow row;
            row.run = run;
            row.t = t;
            row.mse_classic = (model.F * classic.x_post - x_true).squaredNorm();
            classic = kf_step(classic, y, model);

            switch (cfg.filter) {
                case FilterKind::classic:
                    row.mse_rpe = row.mse_classic;
                    row.gain_err = max_abs(classic.Kf - res.oracle.Kf);
                    break;
                case FilterKind::rpe: {
                    row.mse_rpe = (rpe.x_hat - x_true).squaredNorm();
                    auto [next, out] = rpe_step(rpe, y, model.F, model.H, cfg.rpe);
                    rpe = std::move(next);
                    row.gain_err =
                        max_abs(gain_from_theta(rpe.theta, res.K0_used) - res.Kp_star);
                    row.theta = rpe.theta;
                    row.lambda_cond = condition_sym(rpe.Lambda_inv);
                    row.flags = out.flags;
                    break;
                }
                case FilterKind::rpe_matrix: {
                    row.mse_rpe = (rpe_mat.x_hat - x_true).squaredNorm();
                    auto [next, out] = rpe_step_matrix(rpe_mat, y, model.F, model.H,
                                                       cfg.rpe);
                    rpe_mat = std::move(next);
                    row.gain_err = max_abs(
                        gain_from_theta(rpe_mat.theta_mat, res.K0_used) - res.Kp_star);
                    row.theta = rpe_mat.theta_mat.mean();
                    row.lambda_cond = condition_sym(rpe_mat.Lambda_inv);
                    row.flags = out.flags;
                    break;
                }
                case FilterKind::netgraph: {
                    const RpeState before = graph_state(graph);
                    row.mse_rpe = (before.x_hat - x_true).squaredNorm();
                    const StepOutput out =
                        execute_step(graph, y, cfg.rpe.gamma(graph.t));
                    const RpeState after = graph_state(graph);
                    row.gain_err =
                        max_abs(gain_from_theta(after.theta, res.K0_used) - res.Kp_star);
                    row.theta = after.theta;
                    row.lambda_cond = condition_sym(after.Lambda_inv);
                    row.flags = out.flags;
                    break;
                }
            }
            if (row.flags) ++res.flag_events_total;
            res.rows.push_back(row);
        };
        for (long t = 0; t < cfg.T; ++t) {
            try {
                step_once(t);
            } catch (const Error& e) {
                throw Error("run " + format_int(run) + ", step " + format_int(t) +
                            ": " + e.what());
            }
        }

        // Per-run statistics over this run's slice of rows.
        const std::size_t base = static_cast<std::size_t>(run * cfg.T);
        const std::size_t len = static_cast<std::size_t>(cfg.T);
        terminal_gain_errs.push_back(res.rows[base + len - 1].gain_err);
        terminal_thetas.push_back(res.rows[base + len - 1].theta);

        const std::size_t tail = std::max<std::size_t>(1, len / 5);
        double num = 0.0, den = 0.0;
        for (std::size_t i = len - tail; i < len; ++i) {
            num += res.rows[base + i].mse_rpe;
            den += res.rows[base + i].mse_classic;
        }
        mse_ratios.push_back(den == 0.0 ? 1.0 : num / den);

        std::vector<double> xs, ys;
        for (std::size_t i = 0; i < len; ++i) {
            const double err = res.rows[base + i].gain_err;
            if (err > 0.0) {
                xs.push_back(std::log10(static_cast<double>(i + 1)));
                ys.push_back(std::log10(err));
            }
        }
        slopes.push_back(fit_line(xs, ys).slope);

        if (keep_trajectories) res.trajectories.push_back(std::move(traj));
    }

    res.terminal_gain_err_median = median(terminal_gain_errs);
    res.terminal_theta_median = median(terminal_thetas);
    res.mse_ratio_final20_median = median(mse_ratios);
    res.convergence_slope_median = median(slopes);
    return res;
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline const char* kMetricsHeader = "t,mse_classic,mse_rpe,gain_err,theta,lambda_cond,flags";

inline std::string metrics_csv_text(const std::vector<MetricsRow>& rows) {
    std::string out = kMetricsHeader;
    out += "\n";
    for (const MetricsRow& r : rows) {
        out += format_int(r.t);
        out += ",";
        out += format_double(r.mse_classic);
        out += ",";
        out += format_double(r.mse_rpe);
        out += ",";
        out += format_double(r.gain_err);
        out += ",";
        out += format_double(r.theta);
        out += ",";
        out += format_double(r.lambda_cond);
        out += ",";
        out += flag_names(r.flags);
        out += "\n";
    }
    return out;
}

inline std::string summary_json_text(const ExperimentConfig& cfg,
                                     const ExperimentResult& res) {
    std::string out = "{";
    out += "\"filter\":" + detail::json_string(filter_name(cfg.filter));
    out += ",\"runs\":" + format_int(cfg.runs);
    out += ",\"T\":" + format_int(cfg.T);
    out += ",\"seed\":" + format_uint(cfg.seed);
    out += ",\"terminal_gain_err_median\":" + format_double(res.terminal_gain_err_median);
    out += ",\"terminal_theta_median\":" + format_double(res.terminal_theta_median);
    out += ",\"mse_ratio_final20_median\":" + format_double(res.mse_ratio_final20_median);
    out += ",\"convergence_slope_median\":" + format_double(res.convergence_slope_median);
    out += ",\"flag_events_total\":" + format_int(res.flag_events_total);
    out += "}";
    return out;
}

// Simulated ground truth and observations, one row per (run, t).
inline std::string trajectory_csv_text(const ExperimentResult& res, Eigen::Index n,
                                       Eigen::Index p) {
    std::string out = "run,t";
    for (Eigen::Index i = 0; i < n; ++i) out += ",x" + format_int(i);
    for (Eigen::Index j = 0; j < p; ++j) out += ",y" + format_int(j);
    out += "\n";
    for (std::size_t run = 0; run < res.trajectories.size(); ++run) {
        const Trajectory& traj = res.trajectories[run];
        for (std::size_t t = 0; t < traj.states.size(); ++t) {
            out += format_int(static_cast<long>(run));
            out += ",";
            out += format_int(static_cast<long>(t));
            for (Eigen::Index i = 0; i < n; ++i) {
                out += ",";
                out += format_double(traj.states[t][i]);
            }
            for (Eigen::Index j = 0; j < p; ++j) {
                out += ",";
                out += format_double(traj.observations[t][j]);
            }
            out += "\n";
        }
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Metrics reader (round-trip checks and downstream analysis)
// ---------------------------------------------------------------------------

namespace detail {

inline unsigned parse_flags(const std::string& field) {
    if (field == "-") return 0;
    unsigned flags = 0;
    std::size_t pos = 0;
    while (pos <= field.size()) {
        const std::size_t bar = field.find('|', pos);
        const std::string name = field.substr(pos, bar == std::string::npos
                                                       ? std::string::npos
                                                       : bar - pos);
        if (name == "theta_clamp") flags |= kThetaClamped;
        else if (name == "stability_reject") flags |= kStabilityRejected;
        else if (name == "lambda_skip") flags |= kLambdaSkipped;
        else if (name == "step_clamp") flags |= kGainStepClamped;
        else if (name == "lambda_proj") flags |= kLambdaProjected;
        else throw IoError("unknown flag name in metrics CSV: '" + name + "'");
        if (bar == std::string::npos) break;
        pos = bar + 1;
    }
    return flags;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
        const std::size_t comma = line.find(',', pos);
        if (comma == std::string::npos) {
            fields.push_back(line.substr(pos));
            break;
        }
        fields.push_back(line.substr(pos, comma - pos));
        pos = comma + 1;
    }
    return fields;
}

}  // namespace detail

inline std::vector<MetricsRow> read_metrics_csv(const std::string& text) {
    std::vector<MetricsRow> rows;
    std::size_t pos = 0;
    long line_no = 0;
    long run = -1;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        const std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.empty()) continue;
        if (line_no == 1) {
            if (line != kMetricsHeader)
                throw IoError("unexpected metrics CSV header: '" + line + "'");
            continue;
        }
        const std::vector<std::string> fields = detail::split_csv_line(line);
        if (fields.size() != 7)
            throw IoError("metrics CSV line " + format_int(line_no) +
                          " has wrong field count");
        MetricsRow row;
        row.t = std::strtol(fields[0].c_str(), nullptr, 10);
        if (row.t == 0) ++run;  // runs are concatenated; t restarting marks a new one
        row.run = run;
        row.mse_classic = std::strtod(fields[1].c_str(), nullptr);
        row.mse_rpe = std::strtod(fields[2].c_str(), nullptr);
        row.gain_err = std::strtod(fields[3].c_str(), nullptr);
        row.theta = std::strtod(fields[4].c_str(), nullptr);
        row.lambda_cond = std::strtod(fields[5].c_str(), nullptr);
        row.flags = detail::parse_flags(fields[6]);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace lkf
