#include "flame/trainer.hpp"

#include "flame/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <string>

namespace flame {

int TrainOptions::beta_for(const std::string& task_id) const {
    auto it = beta.find(task_id);
    return it == beta.end() ? 1 : it->second;
}

namespace {

// Union of modality ids over a set of tasks, sorted.
std::vector<std::string> modality_union(const std::map<std::string, TaskData>& tasks,
                                        const std::vector<std::string>& task_ids) {
    std::set<std::string> mods;
    for (const auto& id : task_ids) {
        auto it = tasks.find(id);
        if (it == tasks.end()) throw config_error("unknown task id '" + id + "'");
        for (const auto& m : it->second.spec.modality_subset) mods.insert(m);
    }
    return {mods.begin(), mods.end()};
}

// Input dim of a modality, read off the first observation that has it.
std::size_t modality_dim(const std::map<std::string, TaskData>& tasks, const std::string& m) {
    for (const auto& [id, td] : tasks) {
        for (const Dataset* ds : {&td.train, &td.eval})
            for (const Sample& s : ds->samples) {
                auto it = s.modalities.find(m);
                if (it != s.modalities.end() && it->second.dim > 0) return it->second.dim;
            }
    }
    throw config_error("modality '" + m + "' never observed in any dataset");
}

std::vector<std::string> sorted_ids(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    return ids;
}

} // namespace

Trainer::Trainer(FlameModel& model, std::map<std::string, TaskData> tasks, TrainOptions opt,
                 std::uint64_t seed)
    : model_(model), tasks_(std::move(tasks)), opt_(opt), seed_(seed), root_(seed) {}

StageLedger Trainer::pretrain(const StageSpec& stage0) {
    if (model_.completed_stages() >= 0)
        throw contract_error("pretrain: stage 0 already completed");
    const ModelConfig& cfg = model_.config();
    const std::vector<std::string> task_ids = sorted_ids(stage0.task_ids);
    const std::vector<std::string> mods = modality_union(tasks_, task_ids);

    SplitRng init = root_.split("init").split(0);
    for (std::size_t i = 0; i < cfg.n_experts; ++i)
        model_.experts().push_back(make_expert(cfg, i, 0, init, opt_.init_scale));
    for (const auto& m : mods) {
        model_.encoders()[m] =
            make_encoder(cfg, m, modality_dim(tasks_, m), 0, init, opt_.init_scale);
        model_.routers()[{m, 0}] = make_router_head(cfg, m, 0, init, opt_.init_scale);
    }
    for (const auto& id : task_ids) {
        const TaskSpec& spec = tasks_.at(id).spec;
        model_.task_specs()[id] = spec;
        model_.heads()[id] = make_task_head(cfg, spec, 0, init, opt_.init_scale);
    }

    model_.set_active_stage(0);
    StageLedger ledger;
    ledger.stage = 0;
    ledger.method = model_.method();
    {
        std::set<std::string> names;
        for (const auto& id : task_ids) {
            Tape probe;
            BindMode mode{Method::flame, 0, true, id};
            const TaskBinding b = bind_task(probe, model_, id, mode);
            for (const auto& p : b.params) names.insert(p.name);
        }
        ledger.trainable.assign(names.begin(), names.end());
    }

    train_tasks(task_ids, 0, stage0.epochs, Method::flame);

    // Stage-0 freeze: compress the trained weights into the stack
    // base (rank r0, lossless by default) and freeze routers and heads.
    for (StackableWeight* sw : model_.stackable_weights()) sw->freeze_live_as_base(cfg.r0);
    for (auto& [m, enc] : model_.encoders()) enc.pos_scale.freeze_live();
    for (const auto& id : task_ids) model_.task_cursor()[id] = 0;
    model_.set_completed_stages(0);
    model_.set_active_stage(-1);
    // EWC consolidates against the stage it just finished.
    if (model_.method() == Method::ewc) estimate_fisher(task_ids, 0);

    for (const Expert& e : model_.experts())
        for (const StackableWeight* sw : {&e.conv, &e.mlp1, &e.mlp2}) {
            ledger.moe_slice_params += sw->rows() * sw->cols();
            ledger.moe_bias_params += sw->rows();
        }
    for (const auto& [m, enc] : model_.encoders()) {
        for (const StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v}) {
            ledger.encoder_slice_params += sw->rows() * sw->cols();
            ledger.encoder_bias_params += sw->rows();
        }
        ledger.encoder_bias_params += 1;  // positional scale delta
    }
    for (const auto& [key, rh] : model_.routers()) {
        ledger.router_gate_params += rh.w_gate.size();
        ledger.router_noise_params += rh.w_noise.size();
        ledger.router_query_params += rh.query.size();
    }
    for (const auto& id : task_ids)
        ledger.head_params += model_.heads().at(id).weight.size() +
                              model_.heads().at(id).bias.size();
    return ledger;
}

StageLedger Trainer::run_stage(int stage, const StageSpec& spec) {
    if (model_.completed_stages() != stage - 1)
        throw contract_error("run_stage: stages must run in order");
    if (stage >= 1 && spec.rank < 1 && model_.method() == Method::flame)
        throw config_error("stage rank must be >= 1");
    for (const auto& id : spec.task_ids)
        if (model_.task_cursor().count(id))
            throw contract_error("run_stage: task '" + id + "' already trained");

    switch (model_.method()) {
        case Method::flame: return stage_flame(stage, spec);
        case Method::simple_ft: return stage_simple_ft(stage, spec, false);
        case Method::ewc: return stage_simple_ft(stage, spec, true);
        case Method::lora: return stage_lora(stage, spec);
    }
    throw contract_error("run_stage: unknown method");
}

// Registers specs/heads for the stage's tasks and instantiates encoders and
// routers for genuinely new modalities. fresh_router_stage picks the router
// key stage: t for flame, 0 for the flat baselines.
void Trainer::add_stage_tasks(int stage, const StageSpec& spec, bool fresh_router_stage) {
    const ModelConfig& cfg = model_.config();
    SplitRng init = root_.split("init").split(static_cast<std::uint64_t>(stage));
    const std::vector<std::string> task_ids = sorted_ids(spec.task_ids);
    const std::vector<std::string> mods = modality_union(tasks_, task_ids);
    const int router_stage = fresh_router_stage ? stage : 0;

    for (const auto& m : mods) {
        if (!model_.encoders().count(m)) {
            Encoder enc =
                make_encoder(cfg, m, modality_dim(tasks_, m), stage, init, opt_.init_scale);
            if (model_.method() != Method::flame) {
                // Baselines keep dense weights; freeze the fresh encoder into
                // a trainable base immediately.
                for (StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v})
                    sw->freeze_live_as_base(0);
                enc.pos_scale.freeze_live();
            }
            model_.encoders()[m] = std::move(enc);
            RouterHead rh = make_router_head(cfg, m, router_stage, init, opt_.init_scale);
            rh.created_stage = stage;
            model_.routers()[{m, router_stage}] = std::move(rh);
        } else if (fresh_router_stage) {
            model_.routers()[{m, router_stage}] =
                make_router_head(cfg, m, router_stage, init, opt_.init_scale);
        }
    }
    for (const auto& id : task_ids) {
        const TaskSpec& tspec = tasks_.at(id).spec;
        model_.task_specs()[id] = tspec;
        model_.heads()[id] = make_task_head(cfg, tspec, stage, init, opt_.init_scale);
    }
}

StageLedger Trainer::stage_flame(int stage, const StageSpec& spec) {
    const std::vector<std::string> task_ids = sorted_ids(spec.task_ids);

    add_stage_tasks(stage, spec, true);
    const std::vector<std::string> mods = modality_union(tasks_, task_ids);

    // Fresh zero-initialized additive components on every expert and on the
    // attention/projection weights of this stage's modalities.
    for (Expert& e : model_.experts())
        for (StackableWeight* sw : {&e.conv, &e.mlp1, &e.mlp2})
            sw->attach_live(stage, Matrix(sw->rows(), sw->cols()), Matrix(1, sw->rows()));
    for (const auto& m : mods) {
        Encoder& enc = model_.encoders().at(m);
        if (enc.first_stage != stage) {
            for (StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v})
                sw->attach_live(stage, Matrix(sw->rows(), sw->cols()), Matrix(1, sw->rows()));
            enc.pos_scale.live = 0.0;
            enc.pos_scale.live_stage = stage;
        }
    }

    StageLedger ledger;
    ledger.stage = stage;
    ledger.method = Method::flame;
    {
        std::set<std::string> names;
        model_.set_active_stage(stage);
        for (const auto& id : task_ids) {
            Tape probe;
            BindMode mode{Method::flame, stage, true, id};
            const TaskBinding b = bind_task(probe, model_, id, mode);
            for (const auto& p : b.params) names.insert(p.name);
        }
        ledger.trainable.assign(names.begin(), names.end());
        for (const auto& [name, value] : snapshot_tensors(model_)) ledger.frozen.push_back(name);
    }

    train_tasks(task_ids, stage, spec.epochs, Method::flame);

    // Compress & stack at rank r_t, then freeze.
    for (StackableWeight* sw : model_.stackable_weights())
        if (sw->has_live()) {
            if (sw->live_stage() != stage)
                throw contract_error(sw->name() + ": live stage mismatch at compression");
            sw->compress_and_stack(std::min(spec.rank, std::min(sw->rows(), sw->cols())));
        }
    for (auto& [m, enc] : model_.encoders())
        if (enc.pos_scale.live) enc.pos_scale.freeze_live();
    for (const auto& id : task_ids) model_.task_cursor()[id] = stage;
    model_.set_completed_stages(stage);
    model_.set_active_stage(-1);

    for (const Expert& e : model_.experts())
        for (const StackableWeight* sw : {&e.conv, &e.mlp1, &e.mlp2})
            ledger.moe_slice_params += sw->stored_scalars_at_stage(stage) - sw->rows();
    for (const Expert& e : model_.experts())
        ledger.moe_bias_params += e.conv.rows() + e.mlp1.rows() + e.mlp2.rows();
    for (const auto& m : mods) {
        const Encoder& enc = model_.encoders().at(m);
        for (const StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v}) {
            ledger.encoder_slice_params += sw->stored_scalars_at_stage(stage) - sw->rows();
            ledger.encoder_bias_params += sw->rows();
        }
        ledger.encoder_bias_params += 1;
    }
    for (const auto& [key, rh] : model_.routers())
        if (rh.created_stage == stage) {
            ledger.router_gate_params += rh.w_gate.size();
            ledger.router_noise_params += rh.w_noise.size();
            ledger.router_query_params += rh.query.size();
        }
    for (const auto& id : task_ids)
        ledger.head_params +=
            model_.heads().at(id).weight.size() + model_.heads().at(id).bias.size();
    return ledger;
}





void Trainer::train_tasks(const std::vector<std::string>& task_ids, int stage,
                          std::size_t epochs, Method bind_method) {
    const std::vector<std::string> ids = sorted_ids(task_ids);
    velocity_.clear();
    epoch_losses_.clear();
    SplitRng noise = root_.split("noise").split(static_cast<std::uint64_t>(stage));

    std::map<std::string, std::uint64_t> shuffle_seed;
    for (const auto& id : ids)
        shuffle_seed[id] =
            root_.split("shuffle").split(static_cast<std::uint64_t>(stage)).split(id).next_u64();

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const double lr_now =
            opt_.cosine_decay
                ? opt_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(epoch) /
                                                  double(std::max<std::size_t>(epochs, 1))))
                : opt_.lr;
        std::map<std::string, std::vector<std::vector<std::size_t>>> batches;
        std::size_t max_batches = 0;
        for (const auto& id : ids) {
            batches[id] = make_batches(tasks_.at(id).train.size(), opt_.batch_size,
                                       shuffle_seed[id], epoch);
            max_batches = std::max(max_batches, batches[id].size());
        }
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t bi = 0; bi < max_batches; ++bi)
            for (const auto& id : ids)
                if (bi < batches[id].size()) {
                    loss_sum += train_step(id, batches[id][bi], stage, bind_method, noise, lr_now);
                    ++steps;
                }
        epoch_losses_.push_back(steps ? loss_sum / double(steps) : 0.0);
    }
}

double Trainer::train_step(const std::string& task_id, const std::vector<std::size_t>& batch,
                           int stage, Method bind_method, SplitRng& noise_rng, double lr_now) {
    const ModelConfig& cfg = model_.config();
    const TaskData& td = tasks_.at(task_id);
    const TaskSpec& spec = model_.task_specs().at(task_id);

    Tape tape;
    BindMode mode{bind_method, stage, true, task_id};
    TaskBinding b = bind_task(tape, model_, task_id, mode);

    std::vector<Tape::NodeId> losses;
    std::map<std::string, std::vector<Tape::NodeId>> dense;
    for (std::size_t idx : batch) {
        const Sample& sample = td.train.samples[idx];
        std::map<std::string, std::vector<double>> eps;
        for (const auto& m : spec.modality_subset) {
            auto it = sample.modalities.find(m);
            if (it == sample.modalities.end() || !it->second.present) continue;
            std::vector<double> e(cfg.n_experts);
            for (double& v : e) v = noise_rng.normal();
            eps[m] = std::move(e);
        }
        const ForwardResult fr = moe_forward_graph(tape, b, sample, &eps);
        losses.push_back(task_loss_graph(tape, b, fr.logits, sample));
        for (const auto& [m, g] : fr.gates) dense[m].push_back(g.dense);
    }

    Tape::NodeId total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = tape.add(total, losses[i]);
    total = tape.scale(total, 1.0 / double(losses.size()));

    if (opt_.w_bal > 0.0)
        for (const auto& [m, gates] : dense)
            total = tape.add(total, tape.scale(balance_loss_graph(tape, gates), opt_.w_bal));

    if (opt_.w_div > 0.0 && dense.size() >= 2) {
        std::map<std::string, Tape::NodeId> means;
        for (const auto& [m, gates] : dense) {
            Tape::NodeId s = gates.front();
            for (std::size_t i = 1; i < gates.size(); ++i) s = tape.add(s, gates[i]);
            means[m] = tape.scale(s, 1.0 / double(gates.size()));
        }
        total = tape.add(total, tape.scale(divergence_loss_graph(tape, means,
                                                                 opt_.beta_for(task_id)),
                                           opt_.w_div));
    }

    if (bind_method == Method::ewc && opt_.ewc_lambda > 0.0 && !model_.fisher().empty()) {
        Tape::NodeId pen = -1;
        for (const ParamBinding& p : b.params) {
            auto fit = model_.fisher().find(p.name);
            if (fit == model_.fisher().end()) continue;
            const Tape::NodeId diff =
                tape.sub(p.node, tape.constant(model_.anchor().at(p.name)));
            const Tape::NodeId term =
                tape.sum_all(tape.hadamard(tape.constant(fit->second), tape.hadamard(diff, diff)));
            pen = pen < 0 ? term : tape.add(pen, term);
        }
        if (pen >= 0) total = tape.add(total, tape.scale(pen, 0.5 * opt_.ewc_lambda));
    }

    const double loss_value = tape.value(total)(0, 0);
    if (!std::isfinite(loss_value))
        throw training_error("divergent loss at stage " + std::to_string(stage) + ", task " +
                             task_id + ", seed " + std::to_string(seed_));

    tape.backward(total);

    for (const ParamBinding& p : b.params) {
        const Matrix& g = tape.grad(p.node);
        auto [it, fresh] = velocity_.try_emplace(p.name, Matrix(g.rows(), g.cols()));
        Matrix& v = it->second;
        if (opt_.momentum > 0.0) {
            v *= opt_.momentum;
            v += g;
        } else {
            v = g;
        }
        if (p.matrix) {
            *p.matrix -= v * lr_now;
        } else {
            *p.scalar -= lr_now * v(0, 0);
        }
    }
    return loss_value;
}



Metrics Trainer::evaluate_task(const std::string& task_id) const {
    return evaluate(model_, task_id, tasks_.at(task_id).eval, model_.cursor_of(task_id));
}

std::vector<Matrix> Trainer::predictions(const std::string& task_id) const {
    return eval_logits(model_, task_id, tasks_.at(task_id).eval, model_.cursor_of(task_id));
}

FlameModel pretrain_multitask(const std::map<std::string, TaskData>& tasks,
                              const std::vector<std::string>& stage0_tasks,
                              const ModelConfig& cfg, Method method, const TrainOptions& opt,
                              std::size_t epochs, std::uint64_t seed) {
    FlameModel model(cfg, method);
    Trainer trainer(model, tasks, opt, seed);
    StageSpec s0;
    s0.task_ids = stage0_tasks;
    s0.rank = cfg.r0;
    s0.epochs = epochs;
    trainer.pretrain(s0);
    return model;
}

Metrics evaluate(const FlameModel& model, const std::string& task_id, const Dataset& data,
                 Cursor cursor) {
    if (cursor != model.cursor_of(task_id))
        throw contract_error("evaluate: cursor " + std::to_string(cursor) +
                             " != k(" + task_id + ")");
    const Objective objective = model.task_specs().at(task_id).objective;
    const std::vector<Matrix> logits = eval_logits(model, task_id, data, cursor);
    std::vector<Matrix> scores;
    scores.reserve(logits.size());
    for (const Matrix& l : logits) scores.push_back(logits_to_scores(l, objective));
    return compute_metrics(scores, data, objective);
}

GroupCounts ParamCounts::stored_at(int stage, Method method) const {
    GroupCounts out;
    for (const auto& [s, g] : growth) {
        if (s > stage) continue;
        out.encoder += g.encoder;
        out.moe += g.moe;
        out.router += g.router;
        out.head += g.head;
    }
    if (method == Method::ewc) {
        // Fisher and anchor copies of every backbone tensor.
        auto it = growth.find(0);
        if (it != growth.end()) {
            out.encoder += 2 * it->second.encoder;
            out.moe += 2 * it->second.moe;
            out.router += 2 * it->second.router;
        }
    }
    return out;
}

ParamCounts count_params(const FlameModel& model) {
    ParamCounts pc;
    auto sw_group = [&](const StackableWeight& sw, bool is_encoder) {
        std::set<int> stages;
        if (sw.has_base()) stages.insert(sw.base_stage());
        for (const auto& s : sw.slices()) stages.insert(s.stage);
        for (const auto& b : sw.bias_deltas()) stages.insert(b.stage);
        for (int s : stages) {
            const std::size_t n = sw.stored_scalars_at_stage(s);
            if (is_encoder)
                pc.growth[s].encoder += n;
            else
                pc.growth[s].moe += n;
        }
    };
    for (const Expert& e : model.experts()) {
        sw_group(e.conv, false);
        sw_group(e.mlp1, false);
        sw_group(e.mlp2, false);
    }
    for (const auto& [id, enc] : model.encoders()) {
        sw_group(enc.w_in, true);
        sw_group(enc.w_q, true);
        sw_group(enc.w_k, true);
        sw_group(enc.w_v, true);
        for (const auto& d : enc.pos_scale.deltas) pc.growth[d.stage].encoder += 1;
    }
    for (const auto& [key, rh] : model.routers())
        pc.growth[rh.created_stage].router +=
            rh.w_gate.size() + rh.w_noise.size() + rh.query.size();
    for (const auto& [id, head] : model.heads()) {
        int stage = 0;
        auto it = model.task_cursor().find(id);
        if (it != model.task_cursor().end()) stage = it->second;
        pc.growth[stage].head += head.weight.size() + head.bias.size();
    }
    for (const auto& [key, ad] : model.lora()) {
        const int stage = model.task_cursor().count(key.second)
                              ? model.task_cursor().at(key.second)
                              : model.completed_stages() + 1;
        if (key.first.rfind("enc.", 0) == 0)
            pc.growth[stage].encoder += ad.a.size() + ad.b.size();
        else
            pc.growth[stage].moe += ad.a.size() + ad.b.size();
    }

    for (const StackableWeight* sw : model.stackable_weights())
        pc.backbone += sw->rows() * sw->cols() + sw->rows();
    pc.backbone += model.encoders().size();  // positional scales
    for (const auto& [key, rh] : model.routers())
        pc.backbone += rh.w_gate.size() + rh.w_noise.size() + rh.query.size();

    for (const auto& [name, m] : model.fisher()) pc.ewc_overhead += m.size();
    for (const auto& [name, m] : model.anchor()) pc.ewc_overhead += m.size();
    return pc;
}

} // namespace flame
