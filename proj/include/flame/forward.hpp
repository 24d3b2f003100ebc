#pragma once

#include "flame/flexdata.hpp"
#include "flame/model.hpp"
#include "flame/tape.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flame {

// One routing decision: K selected experts (ascending), their normalized
// gate weights, and the dense gate vector over the pool.
struct GateDecision {
    std::vector<std::size_t> selected;
    std::vector<double> weights;
    std::vector<double> dense;
};

struct BoundWeight {
    Tape::NodeId w = -1;
    Tape::NodeId bias = -1;
};

struct BoundRouter {
    Tape::NodeId w_gate = -1;
    Tape::NodeId w_noise = -1;
    Tape::NodeId query = -1;
};

struct BoundHead {
    Tape::NodeId weight = -1;
    Tape::NodeId bias = -1;
};

// Writeback record for one trainable tensor bound onto a tape.
struct ParamBinding {
    std::string name;
    Tape::NodeId node = -1;
    Matrix* matrix = nullptr;   // exactly one of matrix/scalar is set
    double* scalar = nullptr;
};

struct BindMode {
    Method method = Method::flame;
    Cursor cursor = 0;       // evaluation cursor / training stage
    bool train = false;      // bind trainable tensors as parameters
    std::string lora_task;   // adapter owner when method == lora
};

// All tape nodes a task's forward pass needs, bound once per tape.
struct TaskBinding {
    Tape* tape = nullptr;
    const FlameModel* model = nullptr;
    std::string task_id;
    Objective objective = Objective::binary;
    std::size_t class_count = 1;
    std::map<std::string, BoundWeight> sw;       // stackable-weight name -> nodes
    std::map<std::string, BoundRouter> routers;  // modality -> head nodes
    std::map<std::string, Tape::NodeId> pos;     // modality -> 1x1 positional scale
    BoundHead head;
    std::vector<ParamBinding> params;
};

TaskBinding bind_task(Tape& tape, FlameModel& model, const std::string& task_id,
                      const BindMode& mode);

// ---------------------------------------------------------------------------
// Graph builders (tape-level)
// ---------------------------------------------------------------------------

// phi_m: input projection + sinusoidal position + one residual self-attention
// layer; x.present must hold.
Tape::NodeId encode_graph(Tape& tape, const TaskBinding& b, const std::string& modality,
                          const ModalitySequence& x);

// Temporal attention pooling: softmax(<z_t, q>/sqrt(d)) convex combination.
Tape::NodeId tap_pool_graph(Tape& tape, Tape::NodeId z, Tape::NodeId query);

struct GateDecisionNodes {
    std::vector<std::size_t> selected;
    std::vector<double> weights;
    Tape::NodeId kept = -1;   // 1xK softmaxed weights
    Tape::NodeId dense = -1;  // 1xN dense gate vector
};

// Noisy top-K gating; eps supplies the per-expert standard normal draws and
// is null in eval mode (noise-free).
GateDecisionNodes noisy_topk_gate_graph(Tape& tape, Tape::NodeId pooled, const BoundRouter& r,
                                        std::size_t k_top, const std::vector<double>* eps);

struct ExpertForwardNodes {
    Tape::NodeId out = -1;      // L x d
    Tape::NodeId conv_in = -1;  // L x d*kappa windowed tokens
    Tape::NodeId mlp1_in = -1;  // L x d
    Tape::NodeId mlp2_in = -1;  // L x d_h
};

ExpertForwardNodes expert_forward_nodes(Tape& tape, const TaskBinding& b,
                                        std::size_t expert_index, Tape::NodeId z,
                                        std::size_t kappa);

Tape::NodeId expert_forward_graph(Tape& tape, const TaskBinding& b, std::size_t expert_index,
                                  Tape::NodeId z, std::size_t kappa);

struct ExpertTrace {
    std::string modality;
    std::size_t expert = 0;
    Tape::NodeId conv_in = -1;
    Tape::NodeId mlp1_in = -1;
    Tape::NodeId mlp2_in = -1;
};

struct ForwardResult {
    Tape::NodeId fused = -1;   // 1 x d
    Tape::NodeId logits = -1;  // 1 x classes
    std::map<std::string, GateDecisionNodes> gates;
    std::vector<ExpertTrace> traces;
};

// Full per-sample pass: encode, pool, gate, expert-mix, fuse, head. The
// sample-level gate is broadcast across the temporal axis. eps maps modality
// to noise draws (training only).
ForwardResult moe_forward_graph(Tape& tape, const TaskBinding& b, const Sample& sample,
                                const std::map<std::string, std::vector<double>>* eps);

Tape::NodeId task_loss_graph(Tape& tape, const TaskBinding& b, Tape::NodeId logits,
                             const Sample& sample);

// CV^2 of per-expert importance accumulated over a batch of dense gates.
Tape::NodeId balance_loss_graph(Tape& tape, const std::vector<Tape::NodeId>& dense_gates);

// beta-signed, pair-normalized sum of cosines between the modalities' mean
// routing distributions.
Tape::NodeId divergence_loss_graph(Tape& tape,
                                   const std::map<std::string, Tape::NodeId>& mean_gates,
                                   int beta);

// ---------------------------------------------------------------------------
// Numeric wrappers (build a throwaway tape; same arithmetic as the graphs)
// ---------------------------------------------------------------------------

Matrix tap_pool(const Matrix& z, const Matrix& query);

GateDecision noisy_topk_gate(const Matrix& pooled, const RouterHead& head, std::size_t k_top,
                             bool train, SplitRng& rng);

double balance_loss(const std::vector<GateDecision>& decisions);

double divergence_loss(const std::map<std::string, std::vector<double>>& mean_gates, int beta);

Matrix encode_seq(const FlameModel& model, const std::string& modality,
                  const ModalitySequence& x, Cursor cursor);

Matrix expert_forward(const FlameModel& model, std::size_t expert_index, const Matrix& z,
                      Cursor cursor);

struct EvalOutput {
    Matrix logits;  // 1 x classes
    Matrix fused;   // 1 x d
    std::map<std::string, GateDecision> gates;
    // Captured sublayer inputs per (modality, expert): [conv_in, mlp1_in, mlp2_in].
    struct Trace {
        std::string modality;
        std::size_t expert;
        Matrix conv_in, mlp1_in, mlp2_in;
    };
    std::vector<Trace> traces;
};

// Deterministic noise-free forward of one sample at a cursor.
EvalOutput eval_forward(const FlameModel& model, const std::string& task_id,
                        const Sample& sample, Cursor cursor, bool capture_traces = false);

// Logit rows for every sample of a dataset (bound once, evaluated in order).
std::vector<Matrix> eval_logits(const FlameModel& model, const std::string& task_id,
                                const Dataset& data, Cursor cursor);

// Streams eval outputs over a dataset, rebinding in fixed-size chunks so the
// tape does not hold the whole run.
void for_each_eval_output(const FlameModel& model, const std::string& task_id,
                          const Dataset& data, Cursor cursor, bool capture_traces,
                          const std::function<void(std::size_t, const EvalOutput&)>& fn);

// Per-expert routing statistics of one (task, modality) pair: the fraction of
// modality tokens whose sample selects each expert, and the mean gate weight
// conditioned on selection (absent for never-selected experts).
struct FingerprintEntry {
    std::vector<double> activation_ratio;            // length N, in [0,1]
    std::vector<std::optional<double>> mean_gate;    // length N
};

std::map<std::string, FingerprintEntry> routing_fingerprint(const FlameModel& model,
                                                            const std::string& task_id,
                                                            const Dataset& data, Cursor cursor);

} // namespace flame
