#pragma once

#include "flame/flexdata.hpp"
#include "flame/linalg.hpp"
#include "flame/matrix.hpp"
#include "flame/rng.hpp"

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace flame {

// Stage index a task was introduced at; inference sums only components
// reserved at or before it.
using Cursor = int;

struct ModelConfig {
    std::size_t d = 16;        // shared embedding width
    std::size_t d_h = 32;      // expert hidden width
    std::size_t n_experts = 5; // N
    std::size_t k_top = 2;     // K
    std::size_t kappa = 3;     // temporal kernel, odd
    std::size_t r0 = 0;        // stage-0 reservation rank, 0 = lossless

    void validate() const;
};

// A weight matrix under the compress-and-stack ledger: a dense base from
// stage 0, immutable rank-truncated slices for later stages, per-stage bias
// deltas, and at most one live full-shape component during an active stage.
class StackableWeight {
public:
    StackableWeight() = default;
    StackableWeight(std::string name, std::size_t rows, std::size_t cols);

    const std::string& name() const { return name_; }
    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    void attach_live(int stage, Matrix weight_init, Matrix bias_init);
    bool has_live() const { return live_.has_value(); }
    int live_stage() const { return live_stage_; }
    Matrix& live() { return *live_; }
    Matrix& live_bias() { return *live_bias_; }
    const Matrix& live() const { return *live_; }
    const Matrix& live_bias() const { return *live_bias_; }

    // Stage-0 freeze: store the (possibly rank-truncated) live component as
    // the dense base. rank 0 means lossless.
    void freeze_live_as_base(std::size_t rank);
    // Stage-t freeze: truncate the live component to the given rank and
    // append it as an immutable factored slice. Returns the new slice.
    const SvdFactors& compress_and_stack(std::size_t rank);

    // Frozen effective weight/bias at a cursor; excludes any live component.
    Matrix effective(Cursor cursor) const;
    Matrix effective_bias(Cursor cursor) const;

    bool has_base() const { return base_.has_value(); }
    const Matrix& base() const { return *base_; }
    Matrix& base_mut() { return *base_; }
    Matrix& base_bias_mut();
    int base_stage() const { return base_stage_; }

    struct Slice {
        int stage;
        SvdFactors factors;
    };
    struct BiasDelta {
        int stage;
        Matrix delta;  // 1 x rows
    };
    const std::vector<Slice>& slices() const { return slices_; }
    const std::vector<BiasDelta>& bias_deltas() const { return bias_deltas_; }

    int last_stage() const;  // newest frozen stage, -1 when empty

    // Stored scalar count attributable to one stage: dense base + bias at its
    // stage, r*(rows+cols+1) + rows elsewhere.
    std::size_t stored_scalars_at_stage(int stage) const;

    // Restoration hooks for checkpoint loading.
    void restore_base(int stage, Matrix base);
    void restore_slice(int stage, SvdFactors f);
    void restore_bias_delta(int stage, Matrix delta);

private:
    std::string name_;
    std::size_t rows_ = 0, cols_ = 0;
    std::optional<Matrix> base_;
    int base_stage_ = -1;
    std::vector<Slice> slices_;
    std::vector<BiasDelta> bias_deltas_;
    std::optional<Matrix> live_;
    std::optional<Matrix> live_bias_;
    int live_stage_ = -1;
};

// Temporal expert: same-padded 1D conv along time (kernel kappa) followed by
// a position-wise two-layer MLP; weights depend only on d, d_h, kappa.
struct Expert {
    StackableWeight conv;  // d x d*kappa
    StackableWeight mlp1;  // d_h x d
    StackableWeight mlp2;  // d x d_h
};

// Per-stage scalar ledger for the encoder's positional scale.
struct ScalarLedger {
    struct Delta {
        int stage;
        double value;
    };
    std::vector<Delta> deltas;
    std::optional<double> live;
    int live_stage = -1;

    double effective(Cursor cursor) const;
    void freeze_live();
};

// Modality encoder: input projection to width d plus one residual
// self-attention layer; all projections participate in compress-and-stack.
struct Encoder {
    std::string modality_id;
    std::size_t dim_in = 0;
    int first_stage = 0;  // stage the encoder was instantiated at
    StackableWeight w_in;  // d x d_m
    StackableWeight w_q;   // d x d
    StackableWeight w_k;   // d x d
    StackableWeight w_v;   // d x d
    ScalarLedger pos_scale;
};

// Task-indexed router head; shapes depend only on d and N.
struct RouterHead {
    std::string modality_id;
    int stage = 0;          // routing-stage key
    int created_stage = 0;  // stage the tensors were allocated (param accounting)
    Matrix w_gate;   // d x N
    Matrix w_noise;  // d x N
    Matrix query;    // d x 1, the pooling query
};

struct TaskHead {
    std::string task_id;
    int stage = 0;
    Matrix weight;  // classes x d
    Matrix bias;    // 1 x classes
};

enum class Method { flame, simple_ft, ewc, lora };

const char* method_name(Method m);
Method method_from_name(const std::string& s);

// Per-task LoRA adapter on one stackable weight.
struct LoraAdapter {
    Matrix a;  // p x r
    Matrix b;  // r x d, zero-initialized
};

class FlameModel {
public:
    FlameModel() = default;
    FlameModel(ModelConfig cfg, Method method);

    const ModelConfig& config() const { return cfg_; }
    Method method() const { return method_; }

    std::vector<Expert>& experts() { return experts_; }
    const std::vector<Expert>& experts() const { return experts_; }
    std::map<std::string, Encoder>& encoders() { return encoders_; }
    const std::map<std::string, Encoder>& encoders() const { return encoders_; }
    std::map<std::pair<std::string, int>, RouterHead>& routers() { return routers_; }
    const std::map<std::pair<std::string, int>, RouterHead>& routers() const { return routers_; }
    std::map<std::string, TaskHead>& heads() { return heads_; }
    const std::map<std::string, TaskHead>& heads() const { return heads_; }
    std::map<std::string, Cursor>& task_cursor() { return task_cursor_; }
    const std::map<std::string, Cursor>& task_cursor() const { return task_cursor_; }
    std::map<std::pair<std::string, std::string>, LoraAdapter>& lora() { return lora_; }
    const std::map<std::pair<std::string, std::string>, LoraAdapter>& lora() const { return lora_; }
    std::map<std::string, TaskSpec>& task_specs() { return task_specs_; }
    const std::map<std::string, TaskSpec>& task_specs() const { return task_specs_; }

    int completed_stages() const { return completed_stages_; }
    void set_completed_stages(int s) { completed_stages_ = s; }
    int active_stage() const { return active_stage_; }
    void set_active_stage(int s) { active_stage_ = s; }

    Cursor cursor_of(const std::string& task_id) const;
    const RouterHead& router_at(const std::string& modality, Cursor cursor) const;
    const TaskHead& head_of(const std::string& task_id) const;
    const Encoder& encoder_of(const std::string& modality) const;

    // All stackable weights (experts first, then encoders by modality id).
    std::vector<StackableWeight*> stackable_weights();
    std::vector<const StackableWeight*> stackable_weights() const;

    // EWC consolidation state, keyed by parameter name.
    std::map<std::string, Matrix>& fisher() { return fisher_; }
    std::map<std::string, Matrix>& anchor() { return anchor_; }
    const std::map<std::string, Matrix>& fisher() const { return fisher_; }
    const std::map<std::string, Matrix>& anchor() const { return anchor_; }

private:
    ModelConfig cfg_;
    Method method_ = Method::flame;
    std::vector<Expert> experts_;
    std::map<std::string, Encoder> encoders_;
    std::map<std::pair<std::string, int>, RouterHead> routers_;
    std::map<std::string, TaskHead> heads_;
    std::map<std::string, Cursor> task_cursor_;
    std::map<std::string, TaskSpec> task_specs_;
    std::map<std::pair<std::string, std::string>, LoraAdapter> lora_;  // (weight, task)
    std::map<std::string, Matrix> fisher_;
    std::map<std::string, Matrix> anchor_;
    int completed_stages_ = -1;
    int active_stage_ = -1;
};

// Fresh expert with live components attached at the given stage.
Expert make_expert(const ModelConfig& cfg, std::size_t index, int stage, SplitRng& rng,
                   double init_scale);

// Fresh encoder for a modality first seen at `stage`.
Encoder make_encoder(const ModelConfig& cfg, const std::string& modality, std::size_t dim_in,
                     int stage, SplitRng& rng, double init_scale);

RouterHead make_router_head(const ModelConfig& cfg, const std::string& modality, int stage,
                            SplitRng& rng, double init_scale);

TaskHead make_task_head(const ModelConfig& cfg, const TaskSpec& task, int stage, SplitRng& rng,
                        double init_scale);

// Sinusoidal positional table for a length-L sequence of width d.
Matrix positional_encoding(std::size_t len, std::size_t d);

// Every stored tensor by a stable name (bases, slices, bias deltas, routers,
// heads, positional deltas, adapters); the view used by frozen-set checksums
// and ledger-soundness checks.
std::map<std::string, Matrix> snapshot_tensors(const FlameModel& model);

} // namespace flame
