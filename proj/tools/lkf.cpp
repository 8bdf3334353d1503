// Command-line front end.
//
//   lkf run <config>           run a configured experiment, write metric files
//   lkf steady-state <config>  print the model's steady-state gain and covariances
//   lkf audit <config>         execute the netgraph under trace and audit locality
//   lkf selftest               quick built-in invariant checks
//
// Exit codes: 0 success, 2 configuration error (including usage errors),
// 3 runtime error. All output is deterministic for a fixed config and seed.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lkf/common.hpp"
#include "lkf/config.hpp"
#include "lkf/harness.hpp"
#include "lkf/kalman.hpp"
#include "lkf/lds.hpp"
#include "lkf/netgraph.hpp"
#include "lkf/rng.hpp"
#include "lkf/rpe.hpp"

namespace fs = std::filesystem;

namespace {

struct CliOptions {
    std::string config_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool quiet = false;
};

int cmd_run(const CliOptions& opt) {
    lkf::ExperimentConfig cfg = lkf::parse_config_file(opt.config_path);
    if (opt.seed_given) cfg.seed = opt.seed;

    const bool want_trajectory = !cfg.outputs.trajectory_csv.empty();
    const lkf::ExperimentResult res = lkf::run_experiment(cfg, want_trajectory);

    fs::create_directories(opt.out_dir);
    const fs::path dir(opt.out_dir);
    const std::string metrics_path = (dir / cfg.outputs.metrics_csv).string();
    const std::string summary_path = (dir / cfg.outputs.summary).string();
    lkf::write_text_file(metrics_path, lkf::metrics_csv_text(res.rows));
    lkf::write_text_file(summary_path, lkf::summary_json_text(cfg, res));
    std::string trajectory_path;
    if (want_trajectory) {
        trajectory_path = (dir / cfg.outputs.trajectory_csv).string();
        lkf::write_text_file(
            trajectory_path,
            lkf::trajectory_csv_text(res, cfg.model.n(), cfg.model.p()));
    }

    if (!opt.quiet) {
        std::cout << "config: " << lkf::resolved_config_json(cfg) << "\n";
        std::cout << "metrics: " << metrics_path << "\n";
        std::cout << "summary: " << summary_path << "\n";
        if (!trajectory_path.empty())
            std::cout << "trajectory: " << trajectory_path << "\n";
    }
    return 0;
}

int cmd_steady_state(const CliOptions& opt) {
    const lkf::ExperimentConfig cfg = lkf::parse_config_file(opt.config_path);
    const lkf::SteadyState ss =
        lkf::steady_state_gain(cfg.model, cfg.oracle.tol, cfg.oracle.max_iter);
    const lkf::Matrix Kp = lkf::prediction_gain(ss.Kf, cfg.model);
    std::cout << "Kf = " << lkf::detail::json_matrix(ss.Kf) << "\n";
    std::cout << "Kp = " << lkf::detail::json_matrix(Kp) << "\n";
    std::cout << "M = " << lkf::detail::json_matrix(ss.M) << "\n";
    std::cout << "N = " << lkf::detail::json_matrix(ss.N) << "\n";
    std::cout << "iterations = " << lkf::format_int(ss.iterations) << "\n";
    return 0;
}

int cmd_audit(const CliOptions& opt) {
    lkf::ExperimentConfig cfg = lkf::parse_config_file(opt.config_path);
    if (opt.seed_given) cfg.seed = opt.seed;
    if (cfg.rpe.lambda_update == lkf::LambdaUpdateMode::direct)
        throw lkf::ValidationError(
            "audit executes the netgraph; rpe.lambda_update must be 'inverse'");

    const lkf::SteadyState ss =
        lkf::steady_state_gain(cfg.model, cfg.oracle.tol, cfg.oracle.max_iter);
    const lkf::Matrix Kp = lkf::prediction_gain(ss.Kf, cfg.model);
    const lkf::Matrix K0 = lkf::resolve_k0(cfg, Kp);
    lkf::NetGraph graph =
        lkf::build_architecture(cfg.model.F, cfg.model.H, K0, cfg.theta0, cfg.rpe);

    std::cout << lkf::architecture_table(graph);
    std::cout << "schedule:";
    for (const std::string& phase : graph.schedule) std::cout << " " << phase;
    std::cout << "\n";

    lkf::Vector x0 = lkf::Vector::Zero(cfg.model.n());
    if (cfg.x0_mode == lkf::X0Mode::fixed) {
        x0 = cfg.x0_value;
    } else if (cfg.x0_mode == lkf::X0Mode::sampled) {
        lkf::GaussianStream stream(lkf::derive_seed(cfg.seed, 0, lkf::kInitStateStream));
        x0 = lkf::CovarianceSampler(
                 lkf::symmetrized(cfg.model.F * cfg.N0 * cfg.model.F.transpose() +
                                  cfg.model.Pi))
                 .sample(stream);
    }
    const lkf::Trajectory traj = lkf::simulate(cfg.model, cfg.T, cfg.seed, x0, 0);

    // Trace one step at a time so arbitrarily long audits stay in constant
    // memory; the report accumulates across steps.
    long events = 0, violations = 0;
    bool once_ok = true;
    std::vector<std::string> messages;
    for (long t = 0; t < cfg.T; ++t) {
        lkf::Trace trace;
        lkf::execute_step(graph, traj.observations[static_cast<std::size_t>(t)],
                          cfg.rpe.gamma(graph.t), &trace);
        const lkf::AuditReport report = lkf::audit_locality(graph, trace);
        events += report.events;
        violations += report.violations;
        once_ok = once_ok && report.once_per_step_ok;
        for (const std::string& m : report.messages) {
            if (messages.size() < 20) messages.push_back(m);
        }
    }
    std::cout << "audited " << lkf::format_int(cfg.T) << " steps: "
              << lkf::format_int(events) << " events, " << lkf::format_int(violations)
              << " violations, once-per-step " << (once_ok ? "ok" : "VIOLATED") << "\n";
    for (const std::string& m : messages) std::cout << "  " << m << "\n";
    if (violations > static_cast<long>(messages.size()) && !messages.empty())
        std::cout << "  (further messages suppressed)\n";

    // Negative control: the exact filter's gain computation needs a matrix
    // inverse, which the audit must flag as a global operation.
    lkf::Trace control;
    lkf::KalmanState ks =
        lkf::make_kalman_init(lkf::Vector::Zero(cfg.model.n()), cfg.N0);
    ks = lkf::trace_dense_kf_step(ks, traj.observations[0], cfg.model, control);
    const lkf::AuditReport control_report = lkf::audit_locality(graph, control);
    std::cout << "exact-filter control: " << lkf::format_int(control_report.violations)
              << " violation(s), expected 1\n";
    for (const std::string& m : control_report.messages)
        std::cout << "  " << m << "\n";

    return (violations == 0 && once_ok && control_report.violations == 1) ? 0 : 3;
}

bool check(const char* name, bool ok, const std::string& detail = "") {
    std::cout << "[selftest] " << name << (ok ? ": ok" : ": FAIL") ;
    if (!ok && !detail.empty()) std::cout << " (" << detail << ")";
    std::cout << "\n";
    return ok;
}

int cmd_selftest() {
    bool all = true;

    lkf::LdsModel model;
    model.F = (lkf::Matrix(2, 2) << 0.9, 0.1, 0.0, 0.9).finished();
    model.H = (lkf::Matrix(1, 2) << 1.0, 0.0).finished();
    model.Pi = 0.1 * lkf::Matrix::Identity(2, 2);
    model.Sigma = lkf::Matrix::Identity(1, 1);
    lkf::validate_model(model);

    {
        lkf::LdsModel scalar;
        scalar.F = lkf::Matrix::Identity(1, 1);
        scalar.H = lkf::Matrix::Identity(1, 1);
        scalar.Pi = lkf::Matrix::Identity(1, 1);
        scalar.Sigma = lkf::Matrix::Identity(1, 1);
        const lkf::KalmanState s0 =
            lkf::make_kalman_init(lkf::Vector::Zero(1), lkf::Matrix::Zero(1, 1));
        const lkf::KalmanState s1 =
            lkf::kf_step(s0, lkf::Vector::Zero(1), scalar);
        all &= check("scalar one-step gain",
                     std::abs(s1.Kf(0, 0) - 0.5) < 1e-12 &&
                         std::abs(s1.N(0, 0) - 0.5) < 1e-12);
    }
    {
        const lkf::SteadyState ss = lkf::steady_state_gain(model);
        const lkf::Matrix M = lkf::symmetrized(
            model.F * ss.N * model.F.transpose() + model.Pi);
        const lkf::Matrix S =
            lkf::symmetrized(model.H * M * model.H.transpose() + model.Sigma);
        const lkf::Matrix Kf = (S.llt().solve(model.H * M)).transpose();
        const double residual = lkf::max_abs(Kf - ss.Kf);
        all &= check("steady-state fixed point", residual < 1e-10,
                     "residual " + lkf::format_double(residual));
    }
    {
        lkf::ExperimentConfig cfg;
        cfg.model = model;
        cfg.T = 200;
        cfg.runs = 2;
        cfg.seed = 11;
        cfg.filter = lkf::FilterKind::rpe;
        cfg.k0_mode = lkf::K0Mode::scaled_optimal;
        cfg.k0_scale = 0.5;
        cfg.N0 = lkf::Matrix::Identity(2, 2);
        const std::string a = lkf::metrics_csv_text(lkf::run_experiment(cfg).rows);
        const std::string b = lkf::metrics_csv_text(lkf::run_experiment(cfg).rows);
        all &= check("determinism", a == b);

        const std::vector<lkf::MetricsRow> back = lkf::read_metrics_csv(a);
        bool same = back.size() == static_cast<std::size_t>(cfg.T * cfg.runs);
        if (same) {
            const std::string again = lkf::metrics_csv_text(back);
            same = again == a;
        }
        all &= check("metrics round-trip", same);
    }
    {
        const lkf::Matrix K0 = 0.5 * lkf::Matrix::Ones(2, 1);
        lkf::RpeConfig rc;
        rc.gamma = lkf::GammaSchedule::constant(0.0);
        lkf::RpeState state = lkf::make_rpe_state(K0, 0.25);
        lkf::GaussianStream noise(7);
        bool frozen = true;
        for (int t = 0; t < 100; ++t) {
            auto [next, out] =
                lkf::rpe_step(state, noise.next_vector(1), model.F, model.H, rc);
            state = std::move(next);
            frozen = frozen && state.theta == 0.25 &&
                     lkf::max_abs(state.Lambda_inv - lkf::Matrix::Identity(1, 1)) == 0.0;
        }
        all &= check("zero-rate freeze", frozen);
    }
    {
        const lkf::Matrix K0 = (lkf::Matrix(2, 1) << 0.12, 0.04).finished();
        lkf::RpeConfig rc;
        lkf::RpeState dense = lkf::make_rpe_state(K0, 0.0);
        lkf::NetGraph graph =
            lkf::build_architecture(model.F, model.H, K0, 0.0, rc);
        const lkf::Trajectory traj =
            lkf::simulate(model, 50, 23, lkf::Vector::Zero(2), 0);
        double sup = 0.0;
        long audit_violations = 0;
        for (long t = 0; t < 50; ++t) {
            lkf::Trace trace;
            const lkf::StepOutput g_out =
                lkf::execute_step(graph, traj.observations[static_cast<std::size_t>(t)],
                                  rc.gamma(graph.t), &trace);
            audit_violations += lkf::audit_locality(graph, trace).violations;
            auto [next, d_out] =
                lkf::rpe_step(dense, traj.observations[static_cast<std::size_t>(t)],
                              model.F, model.H, rc);
            dense = std::move(next);
            const lkf::RpeState gs = lkf::graph_state(graph);
            sup = std::max(sup, lkf::max_abs(gs.x_hat - dense.x_hat));
            sup = std::max(sup, lkf::max_abs(gs.w_hat - dense.w_hat));
            sup = std::max(sup, std::abs(gs.theta - dense.theta));
            sup = std::max(sup, lkf::max_abs(gs.Lambda_inv - dense.Lambda_inv));
            sup = std::max(sup, std::abs(g_out.grad - d_out.grad));
        }
        all &= check("graph matches dense recursion", sup < 1e-10,
                     "sup " + lkf::format_double(sup));
        all &= check("graph locality audit", audit_violations == 0);
    }

    return all ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"state estimation with locally adapted gains"};
    app.require_subcommand(1);

    CliOptions opt;
    CLI::App* run = app.add_subcommand("run", "run an experiment and write metrics");
    run->add_option("config", opt.config_path, "experiment config file (JSON)")
        ->required();
    CLI::Option* run_seed = run->add_option("--seed", opt.seed, "override config seed");
    run->add_option("--out-dir", opt.out_dir, "directory for output files");
    run->add_flag("--quiet", opt.quiet, "suppress console output");

    CLI::App* steady =
        app.add_subcommand("steady-state", "print steady-state gain and covariances");
    steady->add_option("config", opt.config_path, "experiment config file (JSON)")
        ->required();

    CLI::App* audit =
        app.add_subcommand("audit", "execute the netgraph under trace and audit locality");
    audit->add_option("config", opt.config_path, "experiment config file (JSON)")
        ->required();
    CLI::Option* audit_seed =
        audit->add_option("--seed", opt.seed, "override config seed");

    CLI::App* selftest = app.add_subcommand("selftest", "run built-in invariant checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    opt.seed_given = run_seed->count() > 0 || audit_seed->count() > 0;

    try {
        if (run->parsed()) return cmd_run(opt);
        if (steady->parsed()) return cmd_steady_state(opt);
        if (audit->parsed()) return cmd_audit(opt);
        if (selftest->parsed()) return cmd_selftest();
    } catch (const lkf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
