#include "flame/errors.hpp"
#include "flame/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

namespace flame {
namespace {

std::vector<std::string> sorted_ids(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    return ids;
}

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

} // namespace

StageLedger Trainer::stage_simple_ft(int stage, const StageSpec& spec, bool with_ewc) {
    if (with_ewc && model_.fisher().empty())
        throw contract_error("ewc: missing prior Fisher estimate");
    const std::vector<std::string> task_ids = sorted_ids(spec.task_ids);
    add_stage_tasks(stage, spec, false);

    StageLedger ledger;
    ledger.stage = stage;
    ledger.method = with_ewc ? Method::ewc : Method::simple_ft;
    {
        std::set<std::string> names;
        model_.set_active_stage(stage);
        for (const auto& id : task_ids) {
            Tape probe;
            BindMode mode{model_.method(), stage, true, id};
            const TaskBinding b = bind_task(probe, model_, id, mode);
            for (const auto& p : b.params) names.insert(p.name);
        }
        ledger.trainable.assign(names.begin(), names.end());
    }

    train_tasks(task_ids, stage, spec.epochs, model_.method());

    for (const auto& id : task_ids) model_.task_cursor()[id] = stage;
    model_.set_completed_stages(stage);
    model_.set_active_stage(-1);
    if (with_ewc) estimate_fisher(task_ids, stage);

    for (const auto& [key, rh] : model_.routers())
        if (rh.created_stage == stage) {
            ledger.router_gate_params += rh.w_gate.size();
            ledger.router_noise_params += rh.w_noise.size();
            ledger.router_query_params += rh.query.size();
        }
    for (const auto& m : modality_union(tasks_, task_ids)) {
        const Encoder& enc = model_.encoders().at(m);
        if (enc.first_stage == stage) {
            for (const StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v}) {
                ledger.encoder_slice_params += sw->rows() * sw->cols();
                ledger.encoder_bias_params += sw->rows();
            }
            ledger.encoder_bias_params += 1;  // positional scale
        }
    }
    for (const auto& id : task_ids)
        ledger.head_params +=
            model_.heads().at(id).weight.size() + model_.heads().at(id).bias.size();
    return ledger;
}

StageLedger Trainer::stage_lora(int stage, const StageSpec& spec) {
    const std::size_t r = spec.rank;
    if (r < 1) throw config_error("lora: adapter rank must be >= 1");
    const std::vector<std::string> task_ids = sorted_ids(spec.task_ids);
    add_stage_tasks(stage, spec, false);

    StageLedger ledger;
    ledger.stage = stage;
    ledger.method = Method::lora;

    SplitRng init = root_.split("lora_init").split(static_cast<std::uint64_t>(stage));
    for (const auto& id : task_ids) {
        const TaskSpec& tspec = tasks_.at(id).spec;
        std::vector<StackableWeight*> adapted;
        for (Expert& e : model_.experts())
            for (StackableWeight* sw : {&e.conv, &e.mlp1, &e.mlp2}) adapted.push_back(sw);
        for (const auto& m : tspec.modality_subset) {
            Encoder& enc = model_.encoders().at(m);
            if (enc.first_stage == stage) continue;  // fresh module, trained in full
            for (StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v})
                adapted.push_back(sw);
        }
        for (StackableWeight* sw : adapted) {
            const std::size_t rr = std::min(r, std::min(sw->rows(), sw->cols()));
            LoraAdapter ad;
            ad.a = Matrix(sw->rows(), rr);
            SplitRng ar = init.split(sw->name()).split(id);
            for (double& v : ad.a.raw()) v = ar.normal() / std::sqrt(double(rr));
            ad.b = Matrix(rr, sw->cols());  // zero-initialized
            ledger.adapter_params += ad.a.size() + ad.b.size();
            model_.lora()[{sw->name(), id}] = std::move(ad);
        }
    }

    {
        std::set<std::string> names;
        model_.set_active_stage(stage);
        for (const auto& id : task_ids) {
            Tape probe;
            BindMode mode{Method::lora, stage, true, id};
            const TaskBinding b = bind_task(probe, model_, id, mode);
            for (const auto& p : b.params) names.insert(p.name);
        }
        ledger.trainable.assign(names.begin(), names.end());
    }

    train_tasks(task_ids, stage, spec.epochs, Method::lora);

    for (const auto& id : task_ids) model_.task_cursor()[id] = stage;
    model_.set_completed_stages(stage);
    model_.set_active_stage(-1);

    for (const auto& [key, rh] : model_.routers())
        if (rh.created_stage == stage) {
            ledger.router_gate_params += rh.w_gate.size();
            ledger.router_noise_params += rh.w_noise.size();
            ledger.router_query_params += rh.query.size();
        }
    for (const auto& m : modality_union(tasks_, task_ids)) {
        const Encoder& enc = model_.encoders().at(m);
        if (enc.first_stage == stage) {
            for (const StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v}) {
                ledger.encoder_slice_params += sw->rows() * sw->cols();
                ledger.encoder_bias_params += sw->rows();
            }
            ledger.encoder_bias_params += 1;  // positional scale
        }
    }
    for (const auto& id : task_ids)
        ledger.head_params +=
            model_.heads().at(id).weight.size() + model_.heads().at(id).bias.size();
    return ledger;
}

void Trainer::estimate_fisher(const std::vector<std::string>& task_ids, int stage) {
    std::map<std::string, Matrix> acc;
    std::size_t count = 0;
    for (const auto& id : sorted_ids(task_ids)) {
        const TaskData& td = tasks_.at(id);
        for (const Sample& sample : td.train.samples) {
            Tape tape;
            BindMode mode{Method::ewc, stage, true, id};
            TaskBinding b = bind_task(tape, model_, id, mode);
            const ForwardResult fr = moe_forward_graph(tape, b, sample, nullptr);
            tape.backward(task_loss_graph(tape, b, fr.logits, sample));
            for (const ParamBinding& p : b.params) {
                if (p.name.rfind("head.", 0) == 0) continue;  // backbone only
                const Matrix& g = tape.grad(p.node);
                auto [it, fresh] = acc.try_emplace(p.name, Matrix(g.rows(), g.cols()));
                for (std::size_t i = 0; i < g.size(); ++i)
                    it->second.raw()[i] += g.raw()[i] * g.raw()[i];
            }
            ++count;
        }
    }
    model_.fisher().clear();
    model_.anchor().clear();
    for (auto& [name, m] : acc) {
        m *= 1.0 / double(std::max<std::size_t>(count, 1));
        model_.fisher()[name] = std::move(m);
    }
    // Anchor at the just-frozen parameter values.
    Tape tape;
    for (const auto& id : sorted_ids(task_ids)) {
        BindMode mode{Method::ewc, stage, true, id};
        TaskBinding b = bind_task(tape, model_, id, mode);
        for (const ParamBinding& p : b.params) {
            if (p.name.rfind("head.", 0) == 0) continue;
            if (model_.anchor().count(p.name)) continue;
            if (p.matrix)
                model_.anchor()[p.name] = *p.matrix;
            else {
                Matrix v(1, 1);
                v(0, 0) = *p.scalar;
                model_.anchor()[p.name] = std::move(v);
            }
        }
    }
}

// Spec-level one-stage wrappers. Reconstructing a Trainer is deterministic:
// every stream it draws from is keyed by (seed, stage).

StageLedger baseline_simple_ft(FlameModel& model, int stage, const StageSpec& spec,
                               const std::map<std::string, TaskData>& tasks,
                               const TrainOptions& opt, std::uint64_t seed) {
    if (model.method() != Method::simple_ft)
        throw contract_error("baseline_simple_ft: model method mismatch");
    Trainer t(model, tasks, opt, seed);
    return t.run_stage(stage, spec);
}

StageLedger baseline_ewc(FlameModel& model, int stage, const StageSpec& spec,
                         const std::map<std::string, TaskData>& tasks, TrainOptions opt,
                         double lambda, std::uint64_t seed) {
    if (model.method() != Method::ewc) throw contract_error("baseline_ewc: model method mismatch");
    opt.ewc_lambda = lambda;
    Trainer t(model, tasks, opt, seed);
    return t.run_stage(stage, spec);
}

StageLedger baseline_lora(FlameModel& model, int stage, StageSpec spec,
                          const std::map<std::string, TaskData>& tasks,
                          const TrainOptions& opt, std::size_t adapter_rank,
                          std::uint64_t seed) {
    if (model.method() != Method::lora) throw contract_error("baseline_lora: model method mismatch");
    spec.rank = adapter_rank;
    Trainer t(model, tasks, opt, seed);
    return t.run_stage(stage, spec);
}

double ewc_penalty(const Matrix& fisher, const Matrix& theta, const Matrix& anchor,
                   double lambda) {
    if (!fisher.same_shape(theta) || !theta.same_shape(anchor))
        throw precondition_error("ewc_penalty: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double d = theta.raw()[i] - anchor.raw()[i];
        acc += fisher.raw()[i] * d * d;
    }
    return 0.5 * lambda * acc;
}

} // namespace flame
