#pragma once

#include "flame/flexdata.hpp"
#include "flame/forward.hpp"
#include "flame/metrics.hpp"
#include "flame/model.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace flame {

struct TaskData {
    TaskSpec spec;
    Dataset train;
    Dataset eval;
};

struct TrainOptions {
    double lr = 0.05;
    double momentum = 0.9;
    bool cosine_decay = true;
    std::size_t batch_size = 16;
    double w_bal = 0.01;
    double w_div = 0.1;
    std::map<std::string, int> beta;  // per task; +1 spread (default), -1 concentrate
    double init_scale = 1.0;          // multiplies the 1/sqrt(fan_in) init
    double ewc_lambda = 1.0;

    int beta_for(const std::string& task_id) const;
};

// Exact partition of parameters into trainable and frozen sets at one stage,
// with stored-scalar counts for everything added by the stage.
struct StageLedger {
    int stage = 0;
    Method method = Method::flame;
    std::vector<std::string> trainable;  // parameter names trained this stage
    std::vector<std::string> frozen;     // pre-existing tensors held fixed

    std::size_t moe_slice_params = 0;      // expert slices: sum of r(p+d+1) (dense base at stage 0)
    std::size_t moe_bias_params = 0;       // expert bias deltas
    std::size_t encoder_slice_params = 0;  // encoder slices (and positional deltas)
    std::size_t encoder_bias_params = 0;
    std::size_t router_gate_params = 0;    // |M_t| * d * N
    std::size_t router_noise_params = 0;   // |M_t| * d * N
    std::size_t router_query_params = 0;   // |M_t| * d
    std::size_t head_params = 0;
    std::size_t adapter_params = 0;        // LoRA stages only

    std::size_t moe_params() const { return moe_slice_params + moe_bias_params; }
    std::size_t encoder_params() const { return encoder_slice_params + encoder_bias_params; }
    std::size_t router_params() const {
        return router_gate_params + router_noise_params + router_query_params;
    }
    std::size_t total() const {
        return moe_params() + encoder_params() + router_params() + head_params +
               adapter_params;
    }
};

class Trainer {
public:
    Trainer(FlameModel& model, std::map<std::string, TaskData> tasks, TrainOptions opt,
            std::uint64_t seed);

    // Stage 0: joint multitask training of encoders, routers,
    // experts and heads, then compress-and-freeze into the stack base.
    StageLedger pretrain(const StageSpec& stage0);

    // Stage t >= 1 under the model's method.
    StageLedger run_stage(int stage, const StageSpec& spec);

    Metrics evaluate_task(const std::string& task_id) const;
    std::vector<Matrix> predictions(const std::string& task_id) const;  // eval-set logits

    const std::map<std::string, TaskData>& tasks() const { return tasks_; }
    FlameModel& model() { return model_; }
    const TrainOptions& options() const { return opt_; }
    std::uint64_t seed() const { return seed_; }
    const std::vector<double>& epoch_losses() const { return epoch_losses_; }

private:
    StageLedger stage_flame(int stage, const StageSpec& spec);
    StageLedger stage_simple_ft(int stage, const StageSpec& spec, bool with_ewc);
    StageLedger stage_lora(int stage, const StageSpec& spec);

    void add_stage_tasks(int stage, const StageSpec& spec, bool fresh_router_stage);
    void train_tasks(const std::vector<std::string>& task_ids, int stage, std::size_t epochs,
                     Method bind_method);
    double train_step(const std::string& task_id, const std::vector<std::size_t>& batch,
                      int stage, Method bind_method, SplitRng& noise_rng, double lr_now);
    void estimate_fisher(const std::vector<std::string>& task_ids, int stage);

    FlameModel& model_;
    std::map<std::string, TaskData> tasks_;
    TrainOptions opt_;
    std::uint64_t seed_;
    SplitRng root_;
    std::map<std::string, Matrix> velocity_;  // SGD momentum, reset per stage
    std::vector<double> epoch_losses_;  // mean batch loss per epoch of the last stage
};

// Spec-level wrappers around the Trainer machinery.

// Builds the stage-0 model for `method`, trains all stage-0 tasks jointly and
// freezes into the stack base.
FlameModel pretrain_multitask(const std::map<std::string, TaskData>& tasks,
                              const std::vector<std::string>& stage0_tasks,
                              const ModelConfig& cfg, Method method, const TrainOptions& opt,
                              std::size_t epochs, std::uint64_t seed);

Metrics evaluate(const FlameModel& model, const std::string& task_id, const Dataset& data,
                 Cursor cursor);

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

constexpr std::size_t flame_slice_scalars(std::size_t p, std::size_t d, std::size_t r) {
    return r * (p + d + 1);
}
constexpr std::size_t lora_adapter_scalars(std::size_t p, std::size_t d, std::size_t r) {
    return r * (p + d);
}

struct GroupCounts {
    std::size_t encoder = 0;
    std::size_t moe = 0;
    std::size_t router = 0;
    std::size_t head = 0;
    std::size_t total() const { return encoder + moe + router + head; }
};

struct ParamCounts {
    std::map<int, GroupCounts> growth;  // new stored scalars per stage
    std::size_t backbone = 0;           // dense encoder+expert+router scalars
    std::size_t ewc_overhead = 0;       // Fisher + anchor copies
    // Method-attributable cumulative storage at a stage checkpoint.
    GroupCounts stored_at(int stage, Method method) const;
};

ParamCounts count_params(const FlameModel& model);

} // namespace flame
