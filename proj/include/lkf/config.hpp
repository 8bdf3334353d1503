// Experiment configuration: a strict JSON schema.
//
// Strict means unknown keys are rejected, every value is type checked, and
// every message names the offending field, so a typo in a config fails loudly
// instead of silently running with a default. All failures here derive from
// ConfigError, which the command line maps to its dedicated exit code.
#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lkf/common.hpp"
#include "lkf/lds.hpp"
#include "lkf/rpe.hpp"

namespace lkf {

enum class FilterKind { classic, rpe, rpe_matrix, netgraph };

inline const char* filter_name(FilterKind f) {
    switch (f) {
        case FilterKind::classic: return "classic";
        case FilterKind::rpe: return "rpe_scalar";
        case FilterKind::rpe_matrix: return "rpe_matrix";
        case FilterKind::netgraph: return "netgraph";
    }
    return "?";
}

enum class X0Mode { zero, sampled, fixed };

// How the adaptive filter's reference gain K0 is chosen. The optimal gain is
// never handed to the filter directly: scaled_optimal deliberately misscales
// it so the adaptation has something to recover.
enum class K0Mode { from_observation, scaled_optimal, explicit_value };

struct OutputSpec {
    std::string metrics_csv = "metrics.csv";
    std::string summary = "summary.json";
    std::string trajectory_csv;  // empty: not written
};

struct OracleSpec {
    double tol = 1e-12;
    long max_iter = 1000000;
};

struct ExperimentConfig {
    LdsModel model;
    long T = 1000;
    long runs = 1;
    std::uint64_t seed = 1;
    FilterKind filter = FilterKind::classic;

    X0Mode x0_mode = X0Mode::zero;
    Vector x0_value;  // used when x0_mode == fixed
    Matrix N0;        // classic filter's initial posterior covariance

    RpeConfig rpe;
    double theta0 = 0.0;

    K0Mode k0_mode = K0Mode::from_observation;
    double k0_scale = 0.5;  // for scaled_optimal
    Matrix k0_value;        // for explicit_value

    OutputSpec outputs;
    OracleSpec oracle;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::string& where,
                                const std::set<std::string>& allowed) {
    for (const auto& item : obj.items()) {
        if (!allowed.count(item.key()))
            throw ValidationError("unknown key '" + item.key() + "' in " + where);
    }
}

inline double require_number(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number()) throw ValidationError(path + " must be a number");
    return j.get<double>();
}

inline long require_integer(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number_integer()) throw ValidationError(path + " must be an integer");
    return j.get<long>();
}

inline std::string require_string(const nlohmann::json& j, const std::string& path) {
    if (!j.is_string()) throw ValidationError(path + " must be a string");
    return j.get<std::string>();
}

inline bool require_bool(const nlohmann::json& j, const std::string& path) {
    if (!j.is_boolean()) throw ValidationError(path + " must be a boolean");
    return j.get<bool>();
}

inline Vector require_vector(const nlohmann::json& j, const std::string& path) {
    if (!j.is_array() || j.empty())
        throw ValidationError(path + " must be a non-empty array of numbers");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i)
        v[static_cast<Eigen::Index>(i)] =
            require_number(j[i], path + "[" + std::to_string(i) + "]");
    return v;
}

inline Matrix require_matrix(const nlohmann::json& j, const std::string& path) {
    if (!j.is_array() || j.empty())
        throw ValidationError(path + " must be a non-empty array of rows");
    const std::size_t rows = j.size();
    std::size_t cols = 0;
    Matrix m;
    for (std::size_t r = 0; r < rows; ++r) {
        const nlohmann::json& row = j[r];
        if (!row.is_array() || row.empty())
            throw ValidationError(path + " row " + std::to_string(r) +
                                  " must be a non-empty array of numbers");
        if (r == 0) {
            cols = row.size();
            m.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        } else if (row.size() != cols) {
            throw ValidationError(path + " rows have inconsistent lengths");
        }
        for (std::size_t c = 0; c < cols; ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                require_number(row[c], path + "[" + std::to_string(r) + "][" +
                                           std::to_string(c) + "]");
    }
    return m;
}

// Translate a byte offset from the JSON parser into line/column for the
// error message.
inline std::pair<long, long> line_column(const std::string& text, std::size_t byte) {
    long line = 1, col = 1;
    for (std::size_t i = 0; i < text.size() && i + 1 < byte; ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

}  // namespace detail

inline ExperimentConfig parse_config_text(const std::string& text) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        const auto [line, col] = detail::line_column(text, e.byte);
        throw ParseError("config parse error at line " + format_int(line) +
                         ", column " + format_int(col) + ": " + e.what());
    }
    if (!root.is_object()) throw ValidationError("config root must be an object");
    detail::reject_unknown_keys(root, "config root",
                                {"model", "T", "runs", "seed", "filter", "x0", "init",
                                 "rpe", "k0_spec", "outputs", "oracle"});

    ExperimentConfig cfg;

    if (!root.contains("model") || !root["model"].is_object())
        throw ValidationError("config requires a 'model' object");
    {
        const nlohmann::json& m = root["model"];
        detail::reject_unknown_keys(m, "model", {"F", "H", "Pi", "Sigma"});
        for (const char* key : {"F", "H", "Pi", "Sigma"})
            if (!m.contains(key))
                throw ValidationError(std::string("model requires '") + key + "'");
        cfg.model.F = detail::require_matrix(m["F"], "model.F");
        cfg.model.H = detail::require_matrix(m["H"], "model.H");
        cfg.model.Pi = detail::require_matrix(m["Pi"], "model.Pi");
        cfg.model.Sigma = detail::require_matrix(m["Sigma"], "model.Sigma");
        try {
            validate_model(cfg.model);
        } catch (const Error& e) {
            throw ValidationError(std::string("model: ") + e.what());
        }
    }

    if (root.contains("T")) {
        cfg.T = detail::require_integer(root["T"], "T");
        if (cfg.T < 1) throw ValidationError("T must be at least 1");
    }
    if (root.contains("runs")) {
        cfg.runs = detail::require_integer(root["runs"], "runs");
        if (cfg.runs < 1) throw ValidationError("runs must be at least 1");
    }
    if (root.contains("seed")) {
        if (!root["seed"].is_number_integer() || root["seed"].get<long long>() < 0)
            throw ValidationError("seed must be a non-negative integer");
        cfg.seed = root["seed"].get<std::uint64_t>();
    }
    if (root.contains("filter")) {
        const std::string f = detail::require_string(root["filter"], "filter");
        if (f == "classic") cfg.filter = FilterKind::classic;
        else if (f == "rpe_scalar") cfg.filter = FilterKind::rpe;
        else if (f == "rpe_matrix") cfg.filter = FilterKind::rpe_matrix;
        else if (f == "netgraph") cfg.filter = FilterKind::netgraph;
        else
            throw ValidationError(
                "filter must be one of classic, rpe_scalar, rpe_matrix, netgraph");
    }

    if (root.contains("x0")) {
        const nlohmann::json& x = root["x0"];
        if (!x.is_object()) throw ValidationError("x0 must be an object");
        detail::reject_unknown_keys(x, "x0", {"mode", "value"});
        const std::string mode =
            x.contains("mode") ? detail::require_string(x["mode"], "x0.mode") : "zero";
        if (mode == "zero") cfg.x0_mode = X0Mode::zero;
        else if (mode == "sampled") cfg.x0_mode = X0Mode::sampled;
        else if (mode == "fixed") cfg.x0_mode = X0Mode::fixed;
        else throw ValidationError("x0.mode must be one of zero, sampled, fixed");
        if (cfg.x0_mode == X0Mode::fixed) {
            if (!x.contains("value"))
                throw ValidationError("x0.mode 'fixed' requires x0.value");
            cfg.x0_value = detail::require_vector(x["value"], "x0.value");
            if (cfg.x0_value.size() != cfg.model.n())
                throw ValidationError("x0.value has wrong dimension");
        } else if (x.contains("value")) {
            throw ValidationError("x0.value is only valid with x0.mode 'fixed'");
        }
    }

    cfg.N0 = Matrix::Identity(cfg.model.n(), cfg.model.n());
    if (root.contains("init")) {
        const nlohmann::json& init = root["init"];
        if (!init.is_object()) throw ValidationError("init must be an object");
        detail::reject_unknown_keys(init, "init", {"N0"});
        if (init.contains("N0")) {
            if (init["N0"].is_string()) {
                if (init["N0"].get<std::string>() != "identity")
                    throw ValidationError("init.N0 must be 'identity' or a matrix");
            } else {
                cfg.N0 = detail::require_matrix(init["N0"], "init.N0");
                if (cfg.N0.rows() != cfg.model.n() || cfg.N0.cols() != cfg.model.n())
                    throw ValidationError("init.N0 has wrong dimensions");
                if (!is_symmetric(cfg.N0))
                    throw ValidationError("init.N0 must be symmetric");
                if (min_eigenvalue_sym(symmetrized(cfg.N0)) < -1e-12)
                    throw ValidationError("init.N0 must be positive semidefinite");
            }
        }
    }

    if (root.contains("rpe")) {
        const nlohmann::json& r = root["rpe"];
        if (!r.is_object()) throw ValidationError("rpe must be an object");
        detail::reject_unknown_keys(
            r, "rpe",
            {"gamma", "lambda_update", "theta0", "theta_bounds", "stability_guard",
             "max_step", "lambda_cond_limit", "lambda_pd_floor"});
        if (r.contains("gamma")) {
            const nlohmann::json& gj = r["gamma"];
            if (!gj.is_object()) throw ValidationError("rpe.gamma must be an object");
            detail::reject_unknown_keys(gj, "rpe.gamma", {"rule", "c", "floor", "tau"});
            GammaSchedule sched;
            const std::string rule =
                gj.contains("rule") ? detail::require_string(gj["rule"], "rpe.gamma.rule")
                                    : "tau_decay";
            if (rule == "constant") sched.rule = GammaRule::constant;
            else if (rule == "c_over_t") sched.rule = GammaRule::c_over_t;
            else if (rule == "tau_decay") sched.rule = GammaRule::tau_decay;
            else
                throw ValidationError(
                    "rpe.gamma.rule must be one of constant, c_over_t, tau_decay");
            if (gj.contains("c")) sched.c = detail::require_number(gj["c"], "rpe.gamma.c");
            if (sched.c <= 0.0 || sched.c > 1.0)
                throw ValidationError("rpe.gamma.c must lie in (0, 1]");
            if (gj.contains("floor"))
                sched.floor = detail::require_number(gj["floor"], "rpe.gamma.floor");
            if (sched.floor < 0.0)
                throw ValidationError("rpe.gamma.floor must be non-negative");
            if (gj.contains("tau"))
                sched.tau = detail::require_number(gj["tau"], "rpe.gamma.tau");
            if (sched.tau <= 0.0) throw ValidationError("rpe.gamma.tau must be positive");
            cfg.rpe.gamma = sched;
        }
        if (r.contains("lambda_update")) {
            const std::string mode =
                detail::require_string(r["lambda_update"], "rpe.lambda_update");
            if (mode == "direct") cfg.rpe.lambda_update = LambdaUpdateMode::direct;
            else if (mode == "inverse") cfg.rpe.lambda_update = LambdaUpdateMode::inverse;
            else throw ValidationError("rpe.lambda_update must be 'direct' or 'inverse'");
        }
        if (r.contains("theta0"))
            cfg.theta0 = detail::require_number(r["theta0"], "rpe.theta0");
        if (r.contains("theta_bounds")) {
            const Vector b = detail::require_vector(r["theta_bounds"], "rpe.theta_bounds");
            if (b.size() != 2 || !(b[0] < b[1]))
                throw ValidationError("rpe.theta_bounds must be [lo, hi] with lo < hi");
            cfg.rpe.theta_min = b[0];
            cfg.rpe.theta_max = b[1];
        }
        if (r.contains("stability_guard"))
            cfg.rpe.stability_guard =
                detail::require_bool(r["stability_guard"], "rpe.stability_guard");
        if (r.contains("max_step")) {
            cfg.rpe.max_step = detail::require_number(r["max_step"], "rpe.max_step");
            if (cfg.rpe.max_step <= 0.0)
                throw ValidationError("rpe.max_step must be positive");
        }
        if (r.contains("lambda_cond_limit")) {
            cfg.rpe.lambda_cond_limit =
                detail::require_number(r["lambda_cond_limit"], "rpe.lambda_cond_limit");
            if (cfg.rpe.lambda_cond_limit <= 1.0)
                throw ValidationError("rpe.lambda_cond_limit must exceed 1");
        }
        if (r.contains("lambda_pd_floor")) {
            cfg.rpe.lambda_pd_floor =
                detail::require_number(r["lambda_pd_floor"], "rpe.lambda_pd_floor");
            if (cfg.rpe.lambda_pd_floor < 0.0)
                throw ValidationError("rpe.lambda_pd_floor must be non-negative");
        }
    }
    if (cfg.filter == FilterKind::netgraph &&
        cfg.rpe.lambda_update == LambdaUpdateMode::direct)
        throw ValidationError(
            "the netgraph filter stores the inverse covariance in its collateral "
            "weights; rpe.lambda_update must be 'inverse'");
    if (cfg.theta0 < cfg.rpe.theta_min || cfg.theta0 > cfg.rpe.theta_max)
        throw ValidationError("rpe.theta0 must lie within rpe.theta_bounds");

    if (root.contains("k0_spec")) {
        const nlohmann::json& k = root["k0_spec"];
        if (!k.is_object()) throw ValidationError("k0_spec must be an object");
        detail::reject_unknown_keys(k, "k0_spec", {"mode", "c", "value"});
        const std::string mode = k.contains("mode")
                                     ? detail::require_string(k["mode"], "k0_spec.mode")
                                     : "default";
        if (mode == "default") cfg.k0_mode = K0Mode::from_observation;
        else if (mode == "scaled_optimal") cfg.k0_mode = K0Mode::scaled_optimal;
        else if (mode == "explicit") cfg.k0_mode = K0Mode::explicit_value;
        else
            throw ValidationError(
                "k0_spec.mode must be one of default, scaled_optimal, explicit");
        if (cfg.k0_mode == K0Mode::scaled_optimal) {
            if (k.contains("c"))
                cfg.k0_scale = detail::require_number(k["c"], "k0_spec.c");
            if (cfg.k0_scale <= 0.0) throw ValidationError("k0_spec.c must be positive");
        } else if (k.contains("c")) {
            throw ValidationError("k0_spec.c is only valid with mode 'scaled_optimal'");
        }
        if (cfg.k0_mode == K0Mode::explicit_value) {
            if (!k.contains("value"))
                throw ValidationError("k0_spec.mode 'explicit' requires k0_spec.value");
            cfg.k0_value = detail::require_matrix(k["value"], "k0_spec.value");
            if (cfg.k0_value.rows() != cfg.model.n() ||
                cfg.k0_value.cols() != cfg.model.p())
                throw ValidationError("k0_spec.value has wrong dimensions");
        } else if (k.contains("value")) {
            throw ValidationError("k0_spec.value is only valid with mode 'explicit'");
        }
    }

    if (root.contains("outputs")) {
        const nlohmann::json& o = root["outputs"];
        if (!o.is_object()) throw ValidationError("outputs must be an object");
        detail::reject_unknown_keys(o, "outputs",
                                    {"metrics_csv", "summary", "trajectory_csv"});
        if (o.contains("metrics_csv"))
            cfg.outputs.metrics_csv =
                detail::require_string(o["metrics_csv"], "outputs.metrics_csv");
        if (o.contains("summary"))
            cfg.outputs.summary = detail::require_string(o["summary"], "outputs.summary");
        if (o.contains("trajectory_csv"))
            cfg.outputs.trajectory_csv =
                detail::require_string(o["trajectory_csv"], "outputs.trajectory_csv");
        if (cfg.outputs.metrics_csv.empty() || cfg.outputs.summary.empty())
            throw ValidationError("outputs.metrics_csv and outputs.summary must be set");
    }

    if (root.contains("oracle")) {
        const nlohmann::json& o = root["oracle"];
        if (!o.is_object()) throw ValidationError("oracle must be an object");
        detail::reject_unknown_keys(o, "oracle", {"tol", "max_iter"});
        if (o.contains("tol")) {
            cfg.oracle.tol = detail::require_number(o["tol"], "oracle.tol");
            if (cfg.oracle.tol <= 0.0) throw ValidationError("oracle.tol must be positive");
        }
        if (o.contains("max_iter")) {
            cfg.oracle.max_iter = detail::require_integer(o["max_iter"], "oracle.max_iter");
            if (cfg.oracle.max_iter < 1)
                throw ValidationError("oracle.max_iter must be at least 1");
        }
    }

    return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

namespace detail {

inline std::string json_matrix(const Matrix& m) {
    std::string out = "[";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        if (r) out += ",";
        out += "[";
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c) out += ",";
            out += format_double(m(r, c));
        }
        out += "]";
    }
    return out + "]";
}

inline std::string json_vector(const Vector& v) {
    std::string out = "[";
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += format_double(v[i]);
    }
    return out + "]";
}

inline std::string json_string(const std::string& s) {
    return nlohmann::json(s).dump();
}

}  // namespace detail

// The fully resolved configuration (defaults applied), echoed by the command
// line so a run's provenance is visible. Key order is fixed; together with
// the deterministic number formatting this keeps the echo byte-stable.
inline std::string resolved_config_json(const ExperimentConfig& cfg) {
    using detail::json_matrix;
    using detail::json_string;
    const char* gamma_rule = cfg.rpe.gamma.rule == GammaRule::constant ? "constant"
                             : cfg.rpe.gamma.rule == GammaRule::c_over_t ? "c_over_t"
                                                                         : "tau_decay";
    const char* lambda_mode =
        cfg.rpe.lambda_update == LambdaUpdateMode::direct ? "direct" : "inverse";
    const char* x0_mode = cfg.x0_mode == X0Mode::zero      ? "zero"
                          : cfg.x0_mode == X0Mode::sampled ? "sampled"
                                                           : "fixed";
    const char* k0_mode = cfg.k0_mode == K0Mode::from_observation ? "default"
                          : cfg.k0_mode == K0Mode::scaled_optimal ? "scaled_optimal"
                                                                  : "explicit";
    std::string out = "{";
    out += "\"model\":{\"F\":" + json_matrix(cfg.model.F) +
           ",\"H\":" + json_matrix(cfg.model.H) + ",\"Pi\":" + json_matrix(cfg.model.Pi) +
           ",\"Sigma\":" + json_matrix(cfg.model.Sigma) + "}";
    out += ",\"T\":" + format_int(cfg.T);
    out += ",\"runs\":" + format_int(cfg.runs);
    out += ",\"seed\":" + format_uint(cfg.seed);
    out += ",\"filter\":" + json_string(filter_name(cfg.filter));
    out += ",\"x0\":{\"mode\":" + json_string(x0_mode);
    if (cfg.x0_mode == X0Mode::fixed)
        out += ",\"value\":" + detail::json_vector(cfg.x0_value);
    out += "}";
    out += ",\"init\":{\"N0\":" + json_matrix(cfg.N0) + "}";
    out += ",\"rpe\":{\"gamma\":{\"rule\":" + json_string(gamma_rule) +
           ",\"c\":" + format_double(cfg.rpe.gamma.c) +
           ",\"floor\":" + format_double(cfg.rpe.gamma.floor) +
           ",\"tau\":" + format_double(cfg.rpe.gamma.tau) + "}";
    out += ",\"lambda_update\":" + json_string(lambda_mode);
    out += ",\"theta0\":" + format_double(cfg.theta0);
    out += ",\"theta_bounds\":[" + format_double(cfg.rpe.theta_min) + "," +
           format_double(cfg.rpe.theta_max) + "]";
    out += ",\"stability_guard\":" + std::string(cfg.rpe.stability_guard ? "true" : "false");
    out += ",\"max_step\":" + format_double(cfg.rpe.max_step);
    out += ",\"lambda_cond_limit\":" + format_double(cfg.rpe.lambda_cond_limit);
    out += ",\"lambda_pd_floor\":" + format_double(cfg.rpe.lambda_pd_floor) + "}";
    out += ",\"k0_spec\":{\"mode\":" + json_string(k0_mode);
    if (cfg.k0_mode == K0Mode::scaled_optimal)
        out += ",\"c\":" + format_double(cfg.k0_scale);
    if (cfg.k0_mode == K0Mode::explicit_value)
        out += ",\"value\":" + json_matrix(cfg.k0_value);
    out += "}";
    out += ",\"outputs\":{\"metrics_csv\":" + json_string(cfg.outputs.metrics_csv) +
           ",\"summary\":" + json_string(cfg.outputs.summary);
    if (!cfg.outputs.trajectory_csv.empty())
        out += ",\"trajectory_csv\":" + json_string(cfg.outputs.trajectory_csv);
    out += "}";
    out += ",\"oracle\":{\"tol\":" + format_double(cfg.oracle.tol) +
           ",\"max_iter\":" + format_int(cfg.oracle.max_iter) + "}}";
    return out;
}

}  // namespace lkf
