// Connectionist execution of the adaptive filter.
//
// The same recursion as rpe.hpp, but carried out as a dataflow graph of nodes
// and typed synapses, so that the claim "every update reads only quantities
// available at a synapse's two endpoints or a single node" can be machine
// audited instead of argued.
//
// Layers (sizes p, p, n, n, p, 1):
//   input                y arrives here
//   reconstruction_error computes eps = y - H x_hat; also carries the
//                        sensitivity signal v_hat = H w_hat on a second port
//   state_estimate       x_hat, recurrent weights F, gain afferents K0
//   sensitivity          w_hat, recurrent weights F, same gain afferents;
//                        its effective recurrence F - K(theta)H emerges from
//                        the loop through the error layer, not from a stored
//                        K*H product
//   lambda_sublayer      one unit per error component; full recurrent
//                        collaterals hold the inverse error-covariance
//                        estimate and are the only plastic weights besides
//                        theta
//   theta_unit           a single node holding theta; its efferents multiply
//                        every gain-pathway synapse by exp(theta) uniformly
//
// Multiplying synapses never add into an accumulator: they deposit a factor
// into a modulation port of the target node (exp(theta) onto the error
// layer's gain efferents, lambda onto its sensitivity efferents).
//
// The recurrent collaterals fire exactly once per step; the audit enforces
// this. Their weight rule
//   W_jk += gamma (W_jk - lambda_j lambda_k)
// reads only the two endpoint activations and the weight itself, and is
// exactly the rank-one inverse-covariance update of rpe.hpp. Since
// lambda_j*lambda_k is commutative, symmetry of W is preserved bit for bit.
//
// Supervisory numeric guards (the stability check on theta increments, the
// PD floor and condition check on the collateral weight matrix) are shared
// with the dense implementation and sit outside the traced dataflow: they
// are experiment safety rails, not part of the architecture under audit.
// Every activation of a guard is reported in the step flags.
#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lkf/common.hpp"
#include "lkf/kalman.hpp"
#include "lkf/rpe.hpp"

namespace lkf {

enum class Layer {
    input,
    reconstruction_error,
    state_estimate,
    sensitivity,
    lambda_sublayer,
    theta_unit,
};

enum class SynapseKind { excitatory, inhibitory, multiplying };
enum class Plasticity { fixed, hebbian_direct, hebbian_stdp_like };

// Named scalar slots a node exposes. Which slots are live depends on the
// layer; unused slots stay at their neutral value.
enum class Port {
    activation,   // main output of the node
    sensitivity,  // error layer: v_hat component
    recon,        // error layer: accumulated reconstruction H x_hat
    pre,          // lambda layer: pre-collateral load (copy of eps)
    mod_gain,     // error layer: multiplicative factor exp(theta)
    mod_vhat,     // error layer: multiplicative factor lambda_j
    grad_in,      // theta unit: accumulated gradient
    rec_acc,      // state/sensitivity: recurrent-input accumulator
    gain_acc,     // state/sensitivity: gain-pathway accumulator
    inh_acc,      // sensitivity: inhibitory (v_hat) accumulator
    staged,       // state/sensitivity: next activation awaiting commit
};

inline const char* port_name(Port p) {
    switch (p) {
        case Port::activation: return "activation";
        case Port::sensitivity: return "sensitivity";
        case Port::recon: return "recon";
        case Port::pre: return "pre";
        case Port::mod_gain: return "mod_gain";
        case Port::mod_vhat: return "mod_vhat";
        case Port::grad_in: return "grad_in";
        case Port::rec_acc: return "rec_acc";
        case Port::gain_acc: return "gain_acc";
        case Port::inh_acc: return "inh_acc";
        case Port::staged: return "staged";
    }
    return "?";
}

struct Node {
    int id = -1;
    Layer layer = Layer::input;
    int index = 0;  // position within its layer
    std::string name;

    double activation = 0.0;
    double sensitivity = 0.0;
    double recon = 0.0;
    double pre = 0.0;
    double mod_gain = 1.0;
    double mod_vhat = 0.0;
    double grad_in = 0.0;
    double rec_acc = 0.0;
    double gain_acc = 0.0;
    double inh_acc = 0.0;
    double staged = 0.0;

    double& slot(Port p) {
        switch (p) {
            case Port::activation: return activation;
            case Port::sensitivity: return sensitivity;
            case Port::recon: return recon;
            case Port::pre: return pre;
            case Port::mod_gain: return mod_gain;
            case Port::mod_vhat: return mod_vhat;
            case Port::grad_in: return grad_in;
            case Port::rec_acc: return rec_acc;
            case Port::gain_acc: return gain_acc;
            case Port::inh_acc: return inh_acc;
            case Port::staged: return staged;
        }
        return activation;
    }
};

struct Synapse {
    int id = -1;
    int src = -1;
    int dst = -1;
    SynapseKind kind = SynapseKind::excitatory;
    Plasticity plasticity = Plasticity::fixed;
    double weight = 0.0;
    Port src_port = Port::activation;  // which source slot it transmits
    Port dst_port = Port::activation;  // which target slot it writes
    bool gain_gated = false;           // scale transmission by src mod_gain
    std::string group;                 // architecture group label
};

// ---------------------------------------------------------------------------
// Execution trace for the locality audit
// ---------------------------------------------------------------------------

struct QuantityRef {
    enum Kind { node_slot, synapse_weight, external, global_quantity } kind = node_slot;
    int id = -1;  // node id or synapse id, by kind
    Port port = Port::activation;
};

struct TraceEvent {
    enum Kind { external_input, synapse_transmit, weight_update, node_update, global_op };
    Kind kind = node_update;
    long step = 0;
    int synapse = -1;  // for synapse_transmit / weight_update
    int node = -1;     // for node_update / external_input
    std::vector<QuantityRef> reads;
    std::vector<QuantityRef> writes;
    std::string detail;
};

using Trace = std::vector<TraceEvent>;

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

struct NetGraph {
    std::vector<Node> nodes;
    std::vector<Synapse> synapses;
    std::vector<std::string> schedule;  // ordered phases of one step

    Eigen::Index n = 0;
    Eigen::Index p = 0;
    int in0 = 0, err0 = 0, st0 = 0, sen0 = 0, lam0 = 0, th = 0;

    // Per-phase synapse id lists, in deterministic (dst-major) order.
    std::vector<int> g_gain_mod;        // theta -> error, multiplying
    std::vector<int> g_err_input;       // input -> error, excitatory
    std::vector<int> g_err_recon;       // state -> error, inhibitory (H)
    std::vector<int> g_err_sens;        // sensitivity -> error, excitatory (H)
    std::vector<int> g_lam_load;        // error -> lambda, excitatory
    std::vector<int> g_lam_collateral;  // lambda -> lambda, plastic
    std::vector<int> g_vhat_mod;        // lambda -> error, multiplying
    std::vector<int> g_theta_grad;      // error -> theta, multiplying
    std::vector<int> g_st_rec;          // state -> state (F)
    std::vector<int> g_st_gain;         // error -> state (K0, gated)
    std::vector<int> g_sen_rec;         // sensitivity -> sensitivity (F)
    std::vector<int> g_sen_gain;        // error -> sensitivity (K0, gated)
    std::vector<int> g_sen_inh;         // error -> sensitivity, v_hat signal

    // Supervisory copies for the shared numeric guards; not part of the
    // traced dataflow.
    Matrix F, H, K0;
    RpeConfig cfg;
    long t = 0;
};

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

inline NetGraph build_architecture(const Matrix& F, const Matrix& H, const Matrix& K0,
                                   double theta0 = 0.0, const RpeConfig& cfg = {}) {
    const Eigen::Index n = F.rows();
    const Eigen::Index p = H.rows();
    if (F.cols() != n || n == 0) throw DimensionMismatch("F must be square");
    if (H.cols() != n || p == 0) throw DimensionMismatch("H must be p x n");
    if (K0.rows() != n || K0.cols() != p) throw DimensionMismatch("K0 must be n x p");

    NetGraph g;
    g.n = n;
    g.p = p;
    g.F = F;
    g.H = H;
    g.K0 = K0;
    g.cfg = cfg;

    auto add_node = [&g](Layer layer, int index, const std::string& name) {
        Node node;
        node.id = static_cast<int>(g.nodes.size());
        node.layer = layer;
        node.index = index;
        node.name = name;
        g.nodes.push_back(node);
        return node.id;
    };

    g.in0 = static_cast<int>(g.nodes.size());
    for (int j = 0; j < p; ++j) add_node(Layer::input, j, "in[" + std::to_string(j) + "]");
    g.err0 = static_cast<int>(g.nodes.size());
    for (int j = 0; j < p; ++j)
        add_node(Layer::reconstruction_error, j, "err[" + std::to_string(j) + "]");
    g.st0 = static_cast<int>(g.nodes.size());
    for (int i = 0; i < n; ++i)
        add_node(Layer::state_estimate, i, "st[" + std::to_string(i) + "]");
    g.sen0 = static_cast<int>(g.nodes.size());
    for (int i = 0; i < n; ++i)
        add_node(Layer::sensitivity, i, "sen[" + std::to_string(i) + "]");
    g.lam0 = static_cast<int>(g.nodes.size());
    for (int j = 0; j < p; ++j)
        add_node(Layer::lambda_sublayer, j, "lam[" + std::to_string(j) + "]");
    g.th = add_node(Layer::theta_unit, 0, "theta");
    g.nodes[static_cast<std::size_t>(g.th)].activation = theta0;

    auto add_synapse = [&g](std::vector<int>& group_list, int src, int dst,
                            SynapseKind kind, double weight, Port src_port,
                            Port dst_port, Plasticity plast, bool gated,
                            const char* group) {
        Synapse s;
        s.id = static_cast<int>(g.synapses.size());
        s.src = src;
        s.dst = dst;
        s.kind = kind;
        s.plasticity = plast;
        s.weight = weight;
        s.src_port = src_port;
        s.dst_port = dst_port;
        s.gain_gated = gated;
        s.group = group;
        g.synapses.push_back(s);
        group_list.push_back(s.id);
    };

    // theta's uniform multiplicative influence on the gain pathway.
    for (int j = 0; j < p; ++j)
        add_synapse(g.g_gain_mod, g.th, g.err0 + j, SynapseKind::multiplying, 1.0,
                    Port::activation, Port::mod_gain, Plasticity::fixed, false,
                    "theta->error gain modulation");

    // eps differencing: the input copy arrives excitatory, the reconstruction
    // returns through an ordered array of inhibitory synapses carrying H.
    for (int j = 0; j < p; ++j)
        add_synapse(g.g_err_input, g.in0 + j, g.err0 + j, SynapseKind::excitatory, 1.0,
                    Port::activation, Port::activation, Plasticity::fixed, false,
                    "input->error");
    for (int j = 0; j < p; ++j)
        for (int k = 0; k < n; ++k)
            add_synapse(g.g_err_recon, g.st0 + k, g.err0 + j, SynapseKind::inhibitory,
                        H(j, k), Port::activation, Port::recon, Plasticity::fixed,
                        false, "state->error reconstruction");

    // The sensitivity image v_hat = H w_hat rides a parallel array into the
    // error layer's second port.
    for (int j = 0; j < p; ++j)
        for (int k = 0; k < n; ++k)
            add_synapse(g.g_err_sens, g.sen0 + k, g.err0 + j, SynapseKind::excitatory,
                        H(j, k), Port::activation, Port::sensitivity,
                        Plasticity::fixed, false, "sensitivity->error");

    // Lambda sublayer: load eps, then one round of recurrent collaterals
    // computes lambda = W eps with W holding the inverse covariance estimate.
    for (int j = 0; j < p; ++j)
        add_synapse(g.g_lam_load, g.err0 + j, g.lam0 + j, SynapseKind::excitatory, 1.0,
                    Port::activation, Port::pre, Plasticity::fixed, false,
                    "error->lambda load");
    for (int j = 0; j < p; ++j)
        for (int k = 0; k < p; ++k)
            add_synapse(g.g_lam_collateral, g.lam0 + k, g.lam0 + j,
                        SynapseKind::excitatory, (j == k) ? 1.0 : 0.0, Port::pre,
                        Port::activation, Plasticity::hebbian_stdp_like, false,
                        "lambda recurrent collateral");

    // lambda_j multiplies the error node's sensitivity efferent...
    for (int j = 0; j < p; ++j)
        add_synapse(g.g_vhat_mod, g.lam0 + j, g.err0 + j, SynapseKind::multiplying, 1.0,
                    Port::activation, Port::mod_vhat, Plasticity::fixed, false,
                    "lambda->error modulation");
    // ...and the theta unit sums the modulated products v_hat_j * lambda_j.
    for (int j = 0; j < p; ++j)
        add_synapse(g.g_theta_grad, g.err0 + j, g.th, SynapseKind::multiplying, 1.0,
                    Port::sensitivity, Port::grad_in, Plasticity::hebbian_direct,
                    false, "error->theta gradient");

    // State layer: recurrence F plus the gain afferents K0 (gated by theta).
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k)
            add_synapse(g.g_st_rec, g.st0 + k, g.st0 + i, SynapseKind::excitatory,
                        F(i, k), Port::activation, Port::rec_acc, Plasticity::fixed,
                        false, "state recurrence");
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j)
            add_synapse(g.g_st_gain, g.err0 + j, g.st0 + i, SynapseKind::excitatory,
                        K0(i, j), Port::activation, Port::gain_acc, Plasticity::fixed,
                        true, "error->state gain");

    // Sensitivity layer: recurrence F, the same gain afferents, and an
    // inhibitory copy of the gain afferents carrying v_hat back. Composed
    // with the sensitivity->error array this realizes the recurrence
    // F - K(theta)H without materializing the product anywhere.
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k)
            add_synapse(g.g_sen_rec, g.sen0 + k, g.sen0 + i, SynapseKind::excitatory,
                        F(i, k), Port::activation, Port::rec_acc, Plasticity::fixed,
                        false, "sensitivity recurrence");
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j)
            add_synapse(g.g_sen_gain, g.err0 + j, g.sen0 + i, SynapseKind::excitatory,
                        K0(i, j), Port::activation, Port::gain_acc, Plasticity::fixed,
                        true, "error->sensitivity gain");
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j)
            add_synapse(g.g_sen_inh, g.err0 + j, g.sen0 + i, SynapseKind::inhibitory,
                        K0(i, j), Port::sensitivity, Port::inh_acc, Plasticity::fixed,
                        true, "error->sensitivity feedback");

    g.schedule = {
        "load_input",
        "deposit_gain_modulation",
        "error_main",
        "error_sensitivity",
        "lambda_load",
        "lambda_collaterals",
        "deposit_vhat_modulation",
        "theta_gradient",
        "state_update",
        "sensitivity_update",
        "theta_update",
        "lambda_plasticity",
        "commit",
    };
    return g;
}

// Human-readable description of the built graph; the counts are asserted
// against the actual synapse set in the test suite.
inline std::string architecture_table(const NetGraph& g) {
    std::map<std::string, long> counts;
    for (const Synapse& s : g.synapses) ++counts[s.group];
    std::string out;
    out += "layers: input=" + format_int(g.p) + " reconstruction_error=" + format_int(g.p) +
           " state_estimate=" + format_int(g.n) + " sensitivity=" + format_int(g.n) +
           " lambda_sublayer=" + format_int(g.p) + " theta_unit=1\n";
    out += "synapse groups:\n";
    for (const auto& [group, count] : counts)
        out += "  " + group + ": " + format_int(count) + "\n";
    out += "total synapses: " + format_int(static_cast<long>(g.synapses.size())) +
           " (2n^2 + p^2 + 5np + 5p)\n";
    return out;
}

// Plain-text edge list: one line per synapse, "src dst kind weight".
inline std::string export_edge_list(const NetGraph& g) {
    auto kind_name = [](SynapseKind k) {
        switch (k) {
            case SynapseKind::excitatory: return "excitatory";
            case SynapseKind::inhibitory: return "inhibitory";
            case SynapseKind::multiplying: return "multiplying";
        }
        return "?";
    };
    std::string out;
    for (const Synapse& s : g.synapses) {
        out += g.nodes[static_cast<std::size_t>(s.src)].name + " " +
               g.nodes[static_cast<std::size_t>(s.dst)].name + " " + kind_name(s.kind) +
               " " + format_double(s.weight) + "\n";
    }
    return out;
}

// View of the graph's state in dense-filter terms.
inline RpeState graph_state(const NetGraph& g) {
    RpeState s;
    s.x_hat = Vector(g.n);
    s.w_hat = Vector(g.n);
    for (Eigen::Index i = 0; i < g.n; ++i) {
        s.x_hat[i] = g.nodes[static_cast<std::size_t>(g.st0 + i)].activation;
        s.w_hat[i] = g.nodes[static_cast<std::size_t>(g.sen0 + i)].activation;
    }
    s.theta = g.nodes[static_cast<std::size_t>(g.th)].activation;
    s.K0 = g.K0;
    s.Lambda_inv = Matrix(g.p, g.p);
    for (int id : g.g_lam_collateral) {
        const Synapse& syn = g.synapses[static_cast<std::size_t>(id)];
        const int k = g.nodes[static_cast<std::size_t>(syn.src)].index;
        const int j = g.nodes[static_cast<std::size_t>(syn.dst)].index;
        s.Lambda_inv(j, k) = syn.weight;
    }
    s.Lambda = Matrix::Identity(g.p, g.p);
    s.t = g.t;
    return s;
}

// ---------------------------------------------------------------------------
// Executor
// ---------------------------------------------------------------------------

namespace detail {

inline QuantityRef node_ref(int node, Port port) {
    return QuantityRef{QuantityRef::node_slot, node, port};
}
inline QuantityRef weight_ref(int synapse) {
    return QuantityRef{QuantityRef::synapse_weight, synapse, Port::activation};
}

struct TraceSink {
    Trace* trace = nullptr;
    long step = 0;

    void external(int node, Port port) {
        if (!trace) return;
        TraceEvent e;
        e.kind = TraceEvent::external_input;
        e.step = step;
        e.node = node;
        e.reads.push_back(QuantityRef{QuantityRef::external, -1, Port::activation});
        e.writes.push_back(node_ref(node, port));
        trace->push_back(e);
    }

    // A transmit accumulates into (or overwrites) a destination slot; it may
    // read the destination slot it writes plus any source slots involved.
    void transmit(const Synapse& s, std::initializer_list<QuantityRef> reads) {
        if (!trace) return;
        TraceEvent e;
        e.kind = TraceEvent::synapse_transmit;
        e.step = step;
        e.synapse = s.id;
        e.reads.assign(reads);
        e.writes.push_back(node_ref(s.dst, s.dst_port));
        trace->push_back(e);
    }

    void weight(const Synapse& s, std::initializer_list<QuantityRef> reads) {
        if (!trace) return;
        TraceEvent e;
        e.kind = TraceEvent::weight_update;
        e.step = step;
        e.synapse = s.id;
        e.reads.assign(reads);
        e.writes.push_back(weight_ref(s.id));
        trace->push_back(e);
    }

    void node(int node, std::initializer_list<QuantityRef> reads,
              std::initializer_list<QuantityRef> writes, const char* detail = "") {
        if (!trace) return;
        TraceEvent e;
        e.kind = TraceEvent::node_update;
        e.step = step;
        e.node = node;
        e.reads.assign(reads);
        e.writes.assign(writes);
        e.detail = detail;
        trace->push_back(e);
    }
};

}  // namespace detail

// Advances the graph one step. `gamma_t` is the learning rate for this step;
// pass 0 to freeze all plastic weights. When `trace` is given every dataflow
// access is recorded for audit_locality. Returns the same quantities as the
// dense rpe_step.
inline StepOutput execute_step(NetGraph& g, const Vector& y, double gamma_t,
                               Trace* trace = nullptr) {
    if (y.size() != g.p) throw DimensionMismatch("observation has wrong dimension");
    auto& nodes = g.nodes;
    auto& syns = g.synapses;
    auto node_at = [&nodes](Eigen::Index id) -> Node& {
        return nodes[static_cast<std::size_t>(id)];
    };
    auto syn_at = [&syns](int id) -> Synapse& {
        return syns[static_cast<std::size_t>(id)];
    };
    detail::TraceSink sink{trace, g.t};
    StepOutput out;
    out.y_rec = Vector(g.p);
    out.eps = Vector(g.p);
    out.v_hat = Vector(g.p);

    for (const std::string& phase : g.schedule) {
        if (phase == "load_input") {
            for (Eigen::Index j = 0; j < g.p; ++j) {
                node_at(g.in0 + j).activation = y[j];
                sink.external(g.in0 + static_cast<int>(j), Port::activation);
            }
        } else if (phase == "deposit_gain_modulation") {
            // exp(theta), computed from the source activation alone, lands on
            // every error node's gain-modulation port: the uniform influence.
            for (int id : g.g_gain_mod) {
                Synapse& s = syn_at(id);
                node_at(s.dst).mod_gain = std::exp(node_at(s.src).activation);
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::weight_ref(s.id)});
            }
        } else if (phase == "error_main") {
            for (Eigen::Index j = 0; j < g.p; ++j) {
                Node& err = node_at(g.err0 + static_cast<int>(j));
                err.activation = 0.0;
                err.recon = 0.0;
                sink.node(err.id, {},
                          {detail::node_ref(err.id, Port::activation),
                           detail::node_ref(err.id, Port::recon)},
                          "reset accumulators");
            }
            for (int id : g.g_err_input) {
                Synapse& s = syn_at(id);
                node_at(s.dst).activation += s.weight * node_at(s.src).activation;
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::weight_ref(s.id),
                                  detail::node_ref(s.dst, Port::activation)});
            }
            for (int id : g.g_err_recon) {
                Synapse& s = syn_at(id);
                node_at(s.dst).recon += s.weight * node_at(s.src).activation;
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::weight_ref(s.id),
                                  detail::node_ref(s.dst, Port::recon)});
            }
            // Apply the accumulated inhibition once: eps = y - H x_hat.
            for (Eigen::Index j = 0; j < g.p; ++j) {
                Node& err = node_at(g.err0 + static_cast<int>(j));
                err.activation -= err.recon;
                sink.node(err.id,
                          {detail::node_ref(err.id, Port::activation),
                           detail::node_ref(err.id, Port::recon)},
                          {detail::node_ref(err.id, Port::activation)},
                          "subtract reconstruction");
                out.y_rec[j] = err.recon;
                out.eps[j] = err.activation;
            }
        } else if (phase == "error_sensitivity") {
            for (Eigen::Index j = 0; j < g.p; ++j) {
                Node& err = node_at(g.err0 + static_cast<int>(j));
                err.sensitivity = 0.0;
                sink.node(err.id, {}, {detail::node_ref(err.id, Port::sensitivity)},
                          "reset sensitivity");
            }
            for (int id : g.g_err_sens) {
                Synapse& s = syn_at(id);
                node_at(s.dst).sensitivity += s.weight * node_at(s.src).activation;
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::weight_ref(s.id),
                                  detail::node_ref(s.dst, Port::sensitivity)});
            }
            for (Eigen::Index j = 0; j < g.p; ++j)
                out.v_hat[j] = node_at(g.err0 + static_cast<int>(j)).sensitivity;
        } else if (phase == "lambda_load") {
            for (int id : g.g_lam_load) {
                Synapse& s = syn_at(id);
                node_at(s.dst).pre = s.weight * node_at(s.src).activation;
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::weight_ref(s.id)});
            }
        } else if (phase == "lambda_collaterals") {
            // The feedback acts exactly once: each collateral transmits a
            // single time per step, observable in the trace.
            for (Eigen::Index j = 0; j < g.p; ++j) {
                Node& lam = node_at(g.lam0 + static_cast<int>(j));
                lam.activation = 0.0;
                sink.node(lam.id, {}, {detail::node_ref(lam.id, Port::activation)},
                          "reset collateral sum");
            }
            for (int id : g.g_lam_collateral) {
                Synapse& s = syn_at(id);
                node_at(s.dst).activation += s.weight * node_at(s.src).pre;
                sink.transmit(s, {detail::node_ref(s.src, Port::pre),
                                  detail::weight_ref(s.id),
                                  detail::node_ref(s.dst, Port::activation)});
            }
        } else if (phase == "deposit_vhat_modulation") {
            for (int id : g.g_vhat_mod) {
                Synapse& s = syn_at(id);
                node_at(s.dst).mod_vhat = s.weight * node_at(s.src).activation;
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::weight_ref(s.id)});
            }
        } else if (phase == "theta_gradient") {
            Node& th = node_at(g.th);
            th.grad_in = 0.0;
            sink.node(th.id, {}, {detail::node_ref(th.id, Port::grad_in)},
                      "reset gradient");
            // Each term is the product of two slots of the source error node;
            // the multiplying synapse contributes v_hat_j * lambda_j.
            for (int id : g.g_theta_grad) {
                Synapse& s = syn_at(id);
                const Node& err = node_at(s.src);
                th.grad_in += err.sensitivity * err.mod_vhat;
                sink.transmit(s, {detail::node_ref(s.src, Port::sensitivity),
                                  detail::node_ref(s.src, Port::mod_vhat),
                                  detail::node_ref(s.dst, Port::grad_in)});
            }
            out.grad = th.grad_in;
        } else if (phase == "state_update") {
            for (Eigen::Index i = 0; i < g.n; ++i) {
                Node& st = node_at(g.st0 + static_cast<int>(i));
                st.rec_acc = 0.0;
                st.gain_acc = 0.0;
                sink.node(st.id, {},
                          {detail::node_ref(st.id, Port::rec_acc),
                           detail::node_ref(st.id, Port::gain_acc)},
                          "reset accumulators");
            }
            for (int id : g.g_st_rec) {
                Synapse& s = syn_at(id);
                node_at(s.dst).rec_acc += s.weight * node_at(s.src).activation;
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::weight_ref(s.id),
                                  detail::node_ref(s.dst, Port::rec_acc)});
            }
            for (int id : g.g_st_gain) {
                Synapse& s = syn_at(id);
                const Node& err = node_at(s.src);
                node_at(s.dst).gain_acc += err.mod_gain * s.weight * err.activation;
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::node_ref(s.src, Port::mod_gain),
                                  detail::weight_ref(s.id),
                                  detail::node_ref(s.dst, Port::gain_acc)});
            }
            for (Eigen::Index i = 0; i < g.n; ++i) {
                Node& st = node_at(g.st0 + static_cast<int>(i));
                st.staged = st.rec_acc + st.gain_acc;
                sink.node(st.id,
                          {detail::node_ref(st.id, Port::rec_acc),
                           detail::node_ref(st.id, Port::gain_acc)},
                          {detail::node_ref(st.id, Port::staged)}, "stage next state");
            }
        } else if (phase == "sensitivity_update") {
            for (Eigen::Index i = 0; i < g.n; ++i) {
                Node& sen = node_at(g.sen0 + static_cast<int>(i));
                sen.rec_acc = 0.0;
                sen.gain_acc = 0.0;
                sen.inh_acc = 0.0;
                sink.node(sen.id, {},
                          {detail::node_ref(sen.id, Port::rec_acc),
                           detail::node_ref(sen.id, Port::gain_acc),
                           detail::node_ref(sen.id, Port::inh_acc)},
                          "reset accumulators");
            }
            for (int id : g.g_sen_rec) {
                Synapse& s = syn_at(id);
                node_at(s.dst).rec_acc += s.weight * node_at(s.src).activation;
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::weight_ref(s.id),
                                  detail::node_ref(s.dst, Port::rec_acc)});
            }
            for (int id : g.g_sen_gain) {
                Synapse& s = syn_at(id);
                const Node& err = node_at(s.src);
                node_at(s.dst).gain_acc += err.mod_gain * s.weight * err.activation;
                sink.transmit(s, {detail::node_ref(s.src, Port::activation),
                                  detail::node_ref(s.src, Port::mod_gain),
                                  detail::weight_ref(s.id),
                                  detail::node_ref(s.dst, Port::gain_acc)});
            }
            for (int id : g.g_sen_inh) {
                Synapse& s = syn_at(id);
                const Node& err = node_at(s.src);
                node_at(s.dst).inh_acc += err.mod_gain * s.weight * err.sensitivity;
                sink.transmit(s, {detail::node_ref(s.src, Port::sensitivity),
                                  detail::node_ref(s.src, Port::mod_gain),
                                  detail::weight_ref(s.id),
                                  detail::node_ref(s.dst, Port::inh_acc)});
            }
            for (Eigen::Index i = 0; i < g.n; ++i) {
                Node& sen = node_at(g.sen0 + static_cast<int>(i));
                sen.staged = sen.gain_acc + (sen.rec_acc - sen.inh_acc);
                sink.node(sen.id,
                          {detail::node_ref(sen.id, Port::rec_acc),
                           detail::node_ref(sen.id, Port::gain_acc),
                           detail::node_ref(sen.id, Port::inh_acc)},
                          {detail::node_ref(sen.id, Port::staged)},
                          "stage next sensitivity");
            }
        } else if (phase == "theta_update") {
            Node& th = node_at(g.th);
            // Supervisory guards (shared with the dense path) decide whether
            // the increment stands; the data it consumes is local to the node.
            unsigned flags = 0;
            double cand = detail::clamp_theta_step(th.activation,
                                                   gamma_t * th.grad_in, g.cfg, flags);
            if (g.cfg.stability_guard &&
                spectral_radius(g.F - gain_from_theta(cand, g.K0) * g.H) >= 1.0) {
                cand = th.activation;
                flags |= kStabilityRejected;
            }
            th.activation = cand;
            out.flags |= flags;
            sink.node(th.id,
                      {detail::node_ref(th.id, Port::activation),
                       detail::node_ref(th.id, Port::grad_in)},
                      {detail::node_ref(th.id, Port::activation)}, "theta update");
        } else if (phase == "lambda_plasticity") {
            // Snapshot for the supervisory rollback, then the local rule:
            // each collateral moves by gamma (W_jk - lambda_j lambda_k).
            std::vector<double> snapshot;
            snapshot.reserve(g.g_lam_collateral.size());
            for (int id : g.g_lam_collateral) snapshot.push_back(syn_at(id).weight);
            for (int id : g.g_lam_collateral) {
                Synapse& s = syn_at(id);
                const double lam_dst = node_at(s.dst).activation;
                const double lam_src = node_at(s.src).activation;
                s.weight += gamma_t * (s.weight - lam_dst * lam_src);
                sink.weight(s, {detail::weight_ref(s.id),
                                detail::node_ref(s.dst, Port::activation),
                                detail::node_ref(s.src, Port::activation)});
            }
            // Supervisory acceptance: identical decision sequence to the
            // dense path (PD floor, then the condition-number skip).
            Matrix cand(g.p, g.p);
            for (int id : g.g_lam_collateral) {
                const Synapse& s = syn_at(id);
                cand(node_at(s.dst).index, node_at(s.src).index) = s.weight;
            }
            bool projected = false;
            cand = project_pd(cand, g.cfg.lambda_pd_floor, &projected);
            if (condition_sym(cand) > g.cfg.lambda_cond_limit) {
                std::size_t k = 0;
                for (int id : g.g_lam_collateral) syn_at(id).weight = snapshot[k++];
                out.flags |= kLambdaSkipped;
            } else {
                if (projected) out.flags |= kLambdaProjected;
                for (int id : g.g_lam_collateral) {
                    Synapse& s = syn_at(id);
                    s.weight = cand(node_at(s.dst).index, node_at(s.src).index);
                }
            }
        } else if (phase == "commit") {
            for (Eigen::Index i = 0; i < g.n; ++i) {
                Node& st = node_at(g.st0 + static_cast<int>(i));
                st.activation = st.staged;
                sink.node(st.id, {detail::node_ref(st.id, Port::staged)},
                          {detail::node_ref(st.id, Port::activation)}, "commit state");
                Node& sen = node_at(g.sen0 + static_cast<int>(i));
                sen.activation = sen.staged;
                sink.node(sen.id, {detail::node_ref(sen.id, Port::staged)},
                          {detail::node_ref(sen.id, Port::activation)},
                          "commit sensitivity");
            }
        }
    }
    g.t += 1;
    return out;
}

// ---------------------------------------------------------------------------
// Locality audit
// ---------------------------------------------------------------------------

struct AuditReport {
    long events = 0;
    long violations = 0;
    bool once_per_step_ok = true;
    std::vector<std::string> messages;

    std::string summary() const {
        std::string out = "audit: " + format_int(events) + " events, " +
                          format_int(violations) + " violations, once-per-step " +
                          (once_per_step_ok ? "ok" : "VIOLATED") + "\n";
        for (const std::string& m : messages) out += "  " + m + "\n";
        return out;
    }
};

// Certifies that every traced access touches only a synapse's two endpoints
// (plus its own weight) or a single node, and that each recurrent collateral
// fired exactly once per step. Violations are report content, not exceptions.
inline AuditReport audit_locality(const NetGraph& g, const Trace& trace) {
    AuditReport report;
    std::map<std::pair<long, int>, int> collateral_fires;
    std::map<int, bool> is_collateral;
    for (int id : g.g_lam_collateral) is_collateral[id] = true;

    auto flag = [&report](const std::string& msg) {
        ++report.violations;
        report.messages.push_back(msg);
    };

    for (const TraceEvent& e : trace) {
        ++report.events;
        switch (e.kind) {
            case TraceEvent::global_op:
                flag("global operation at step " + format_int(e.step) + ": " + e.detail);
                break;
            case TraceEvent::external_input: {
                for (const QuantityRef& w : e.writes)
                    if (w.kind != QuantityRef::node_slot || w.id != e.node)
                        flag("external input wrote outside its node");
                break;
            }
            case TraceEvent::node_update: {
                auto on_node = [&e](const QuantityRef& r) {
                    return r.kind == QuantityRef::node_slot && r.id == e.node;
                };
                for (const QuantityRef& r : e.reads)
                    if (!on_node(r))
                        flag("node update read outside node " + format_int(e.node) +
                             (e.detail.empty() ? "" : " (" + e.detail + ")"));
                for (const QuantityRef& w : e.writes)
                    if (!on_node(w))
                        flag("node update wrote outside node " + format_int(e.node));
                break;
            }
            case TraceEvent::synapse_transmit:
            case TraceEvent::weight_update: {
                if (e.synapse < 0 ||
                    e.synapse >= static_cast<int>(g.synapses.size())) {
                    flag("event references unknown synapse " + format_int(e.synapse));
                    break;
                }
                const Synapse& s = g.synapses[static_cast<std::size_t>(e.synapse)];
                auto allowed = [&s, &e](const QuantityRef& r) {
                    if (r.kind == QuantityRef::node_slot)
                        return r.id == s.src || r.id == s.dst;
                    if (r.kind == QuantityRef::synapse_weight)
                        return r.id == e.synapse;
                    return false;
                };
                for (const QuantityRef& r : e.reads)
                    if (!allowed(r))
                        flag("synapse " + format_int(e.synapse) + " (" + s.group +
                             ") read a non-endpoint quantity");
                for (const QuantityRef& w : e.writes) {
                    const bool ok =
                        e.kind == TraceEvent::weight_update
                            ? (w.kind == QuantityRef::synapse_weight && w.id == e.synapse)
                            : (w.kind == QuantityRef::node_slot && w.id == s.dst);
                    if (!ok)
                        flag("synapse " + format_int(e.synapse) + " (" + s.group +
                             ") wrote a non-endpoint quantity");
                }
                if (e.kind == TraceEvent::synapse_transmit && is_collateral.count(e.synapse))
                    ++collateral_fires[{e.step, e.synapse}];
                break;
            }
        }
    }

    // Each collateral must have fired exactly once in every step the graph
    // actually ran (steps with at least one synapse transmit); traces of
    // other systems, like the exact-filter control, have no such steps.
    std::map<long, bool> steps_seen;
    for (const TraceEvent& e : trace)
        if (e.kind == TraceEvent::synapse_transmit) steps_seen[e.step] = true;
    for (const auto& [step, seen] : steps_seen) {
        (void)seen;
        for (int id : g.g_lam_collateral) {
            auto it = collateral_fires.find({step, id});
            const int fires = it == collateral_fires.end() ? 0 : it->second;
            if (fires != 1) {
                report.once_per_step_ok = false;
                flag("collateral synapse " + format_int(id) + " fired " +
                     format_int(fires) + " times at step " + format_int(step));
            }
        }
    }
    return report;
}

// The exact filter instrumented as a trace: its linear parts are all
// realizable with local synapse sums (the builder above demonstrates how),
// but the gain computation inverts the innovation covariance, which needs
// every entry of a p x p matrix at once. That step is recorded as a global
// operation, so the audit on this trace reports exactly the nonlocality that
// separates the exact recursion from the adaptive one.
inline KalmanState trace_dense_kf_step(const KalmanState& prev, const Vector& y,
                                       const LdsModel& model, Trace& trace) {
    TraceEvent input;
    input.kind = TraceEvent::external_input;
    input.step = prev.t;
    input.node = -1;
    input.reads.push_back(QuantityRef{QuantityRef::external, -1, Port::activation});
    trace.push_back(input);

    TraceEvent inverse;
    inverse.kind = TraceEvent::global_op;
    inverse.step = prev.t;
    inverse.detail =
        "innovation covariance inverse (H M H^T + Sigma)^-1: reads all p^2 "
        "entries simultaneously";
    inverse.reads.push_back(
        QuantityRef{QuantityRef::global_quantity, -1, Port::activation});
    trace.push_back(inverse);

    return kf_step(prev, y, model);
}

}  // namespace lkf
