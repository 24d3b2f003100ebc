#include "flame/forward.hpp"

#include "flame/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace flame {
namespace {

// Frozen prefix below a live component's stage; zeros before stage 0.
Matrix frozen_prefix(const StackableWeight& sw, int live_stage) {
    if (live_stage <= 0) return Matrix(sw.rows(), sw.cols());
    return sw.effective(live_stage - 1);
}

Matrix frozen_bias_prefix(const StackableWeight& sw, int live_stage) {
    if (live_stage <= 0) return Matrix(1, sw.rows());
    return sw.effective_bias(live_stage - 1);
}

BoundWeight bind_stackable(Tape& tape, StackableWeight& sw, const BindMode& mode,
                           const std::string& task_id,
                           std::map<std::pair<std::string, std::string>, LoraAdapter>& lora,
                           std::vector<ParamBinding>& params) {
    BoundWeight out;
    switch (mode.method) {
        case Method::flame: {
            if (mode.train && sw.has_live() && sw.live_stage() == mode.cursor) {
                const Tape::NodeId prefix = tape.constant(frozen_prefix(sw, sw.live_stage()));
                const Tape::NodeId live = tape.param(sw.live());
                out.w = tape.add(prefix, live);
                params.push_back({sw.name(), live, &sw.live(), nullptr});
                const Tape::NodeId bprefix =
                    tape.constant(frozen_bias_prefix(sw, sw.live_stage()));
                const Tape::NodeId blive = tape.param(sw.live_bias());
                out.bias = tape.add(bprefix, blive);
                params.push_back({sw.name() + ".bias", blive, &sw.live_bias(), nullptr});
            } else {
                out.w = tape.constant(sw.effective(mode.cursor));
                out.bias = tape.constant(sw.effective_bias(mode.cursor));
            }
            break;
        }
        case Method::simple_ft:
        case Method::ewc: {
            // Flat models keep one dense matrix and one bias, mutated in place.
            if (mode.train) {
                out.w = tape.param(sw.base());
                params.push_back({sw.name(), out.w, &sw.base_mut(), nullptr});
                out.bias = tape.param(sw.effective_bias(sw.base_stage()));
                params.push_back({sw.name() + ".bias", out.bias, &sw.base_bias_mut(), nullptr});
            } else {
                out.w = tape.constant(sw.base());
                out.bias = tape.constant(sw.effective_bias(sw.base_stage()));
            }
            break;
        }
        case Method::lora: {
            const bool fresh = mode.train && sw.base_stage() == mode.cursor && mode.cursor > 0;
            if (fresh) {
                // Genuinely new module this stage: trained in full, no adapter.
                out.w = tape.param(sw.base());
                params.push_back({sw.name(), out.w, &sw.base_mut(), nullptr});
                out.bias = tape.param(sw.effective_bias(sw.base_stage()));
                params.push_back({sw.name() + ".bias", out.bias, &sw.base_bias_mut(), nullptr});
                break;
            }
            const Tape::NodeId base = tape.constant(sw.base());
            out.bias = tape.constant(sw.effective_bias(sw.base_stage()));
            auto it = lora.find({sw.name(), task_id});
            if (it == lora.end()) {
                out.w = base;
            } else if (mode.train && task_id == mode.lora_task) {
                const Tape::NodeId a = tape.param(it->second.a);
                const Tape::NodeId b = tape.param(it->second.b);
                params.push_back({sw.name() + ".lora_a." + task_id, a, &it->second.a, nullptr});
                params.push_back({sw.name() + ".lora_b." + task_id, b, &it->second.b, nullptr});
                out.w = tape.add(base, tape.matmul(a, b));
            } else {
                out.w = tape.constant(sw.base() + matmul(it->second.a, it->second.b));
            }
            break;
        }
    }
    return out;
}

std::vector<double> label_targets(const Sample& sample) { return sample.label; }

} // namespace

TaskBinding bind_task(Tape& tape, FlameModel& model, const std::string& task_id,
                      const BindMode& mode) {
    const TaskSpec& spec = model.task_specs().at(task_id);
    TaskBinding b;
    b.tape = &tape;
    b.model = &model;
    b.task_id = task_id;
    b.objective = spec.objective;
    b.class_count = spec.class_count;

    for (Expert& e : model.experts()) {
        for (StackableWeight* sw : {&e.conv, &e.mlp1, &e.mlp2})
            b.sw[sw->name()] =
                bind_stackable(tape, *sw, mode, task_id, model.lora(), b.params);
    }

    for (const std::string& m : spec.modality_subset) {
        Encoder& enc = model.encoders().at(m);
        for (StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v})
            b.sw[sw->name()] =
                bind_stackable(tape, *sw, mode, task_id, model.lora(), b.params);

        // Positional scale ledger mirrors the weight binding.
        Tape::NodeId pos;
        const bool flame_live = mode.method == Method::flame && mode.train &&
                                enc.pos_scale.live && enc.pos_scale.live_stage == mode.cursor;
        const bool flat_train =
            (mode.method == Method::simple_ft || mode.method == Method::ewc) && mode.train;
        const bool lora_fresh = mode.method == Method::lora && mode.train &&
                                enc.first_stage == mode.cursor && mode.cursor > 0;
        if (flame_live) {
            Matrix prefix(1, 1);
            prefix(0, 0) = enc.pos_scale.live_stage > 0
                               ? enc.pos_scale.effective(enc.pos_scale.live_stage - 1)
                               : 0.0;
            Matrix lv(1, 1);
            lv(0, 0) = *enc.pos_scale.live;
            const Tape::NodeId live = tape.param(lv);
            b.params.push_back(
                {"enc." + m + ".pos_scale", live, nullptr, &*enc.pos_scale.live});
            pos = tape.add(tape.constant(prefix), live);
        } else if ((flat_train || lora_fresh) && !enc.pos_scale.deltas.empty()) {
            Matrix v(1, 1);
            v(0, 0) = enc.pos_scale.deltas.front().value;
            pos = tape.param(v);
            b.params.push_back({"enc." + m + ".pos_scale", pos, nullptr,
                                &enc.pos_scale.deltas.front().value});
        } else {
            Matrix v(1, 1);
            v(0, 0) = enc.pos_scale.effective(mode.cursor);
            pos = tape.constant(v);
        }
        b.pos[m] = pos;

        // Router head for this task's routing stage.
        const int router_stage = (mode.method == Method::flame) ? mode.cursor : 0;
        auto rit = model.routers().find({m, router_stage});
        if (rit == model.routers().end())
            throw contract_error("bind_task: no router head for (" + m + ", stage " +
                                 std::to_string(router_stage) + ")");
        RouterHead& rh = rit->second;
        BoundRouter br;
        const bool router_trainable =
            mode.train && (mode.method == Method::simple_ft || mode.method == Method::ewc ||
                           (mode.method == Method::flame && rh.stage == mode.cursor &&
                            model.active_stage() == mode.cursor) ||
                           (mode.method == Method::lora &&
                            model.encoder_of(m).first_stage == mode.cursor && mode.cursor > 0));
        const std::string rname = "router." + m + ".s" + std::to_string(rh.stage);
        if (router_trainable) {
            br.w_gate = tape.param(rh.w_gate);
            br.w_noise = tape.param(rh.w_noise);
            br.query = tape.param(rh.query);
            b.params.push_back({rname + ".gate", br.w_gate, &rh.w_gate, nullptr});
            b.params.push_back({rname + ".noise", br.w_noise, &rh.w_noise, nullptr});
            b.params.push_back({rname + ".query", br.query, &rh.query, nullptr});
        } else {
            br.w_gate = tape.constant(rh.w_gate);
            br.w_noise = tape.constant(rh.w_noise);
            br.query = tape.constant(rh.query);
        }
        b.routers[m] = br;
    }

    TaskHead& head = model.heads().at(task_id);
    if (mode.train) {
        b.head.weight = tape.param(head.weight);
        b.head.bias = tape.param(head.bias);
        b.params.push_back({"head." + task_id + ".w", b.head.weight, &head.weight, nullptr});
        b.params.push_back({"head." + task_id + ".b", b.head.bias, &head.bias, nullptr});
    } else {
        b.head.weight = tape.constant(head.weight);
        b.head.bias = tape.constant(head.bias);
    }
    return b;
}

Tape::NodeId encode_graph(Tape& tape, const TaskBinding& b, const std::string& modality,
                          const ModalitySequence& x) {
    if (!x.present)
        throw contract_error("encode: modality '" + modality + "' absent; caller must skip");
    const Encoder& enc = b.model->encoder_of(modality);
    if (x.dim != enc.dim_in)
        throw contract_error("encode: dim mismatch for modality '" + modality + "'");
    const std::size_t d = b.model->config().d;
    const BoundWeight& w_in = b.sw.at(enc.w_in.name());
    const BoundWeight& w_q = b.sw.at(enc.w_q.name());
    const BoundWeight& w_k = b.sw.at(enc.w_k.name());
    const BoundWeight& w_v = b.sw.at(enc.w_v.name());

    const Tape::NodeId xin = tape.constant(x.values);
    Tape::NodeId proj =
        tape.add_row_broadcast(tape.matmul(xin, tape.transpose(w_in.w)), w_in.bias);
    const Tape::NodeId pe = tape.constant(positional_encoding(x.length(), d));
    proj = tape.add(proj, tape.scale_by(pe, b.pos.at(modality)));

    const Tape::NodeId q =
        tape.add_row_broadcast(tape.matmul(proj, tape.transpose(w_q.w)), w_q.bias);
    const Tape::NodeId k =
        tape.add_row_broadcast(tape.matmul(proj, tape.transpose(w_k.w)), w_k.bias);
    const Tape::NodeId v =
        tape.add_row_broadcast(tape.matmul(proj, tape.transpose(w_v.w)), w_v.bias);
    const Tape::NodeId scores =
        tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / std::sqrt(double(d)));
    const Tape::NodeId attn = tape.row_softmax(scores);
    return tape.add(tape.matmul(attn, v), proj);
}

Tape::NodeId tap_pool_graph(Tape& tape, Tape::NodeId z, Tape::NodeId query) {
    const std::size_t d = tape.value(z).cols();
    if (tape.value(z).rows() == 0) throw contract_error("tap_pool: empty sequence");
    const Tape::NodeId scores =
        tape.scale(tape.matmul(z, query), 1.0 / std::sqrt(double(d)));  // L x 1
    const Tape::NodeId alpha = tape.row_softmax(tape.transpose(scores));  // 1 x L
    return tape.matmul(alpha, z);                                          // 1 x d
}

GateDecisionNodes noisy_topk_gate_graph(Tape& tape, Tape::NodeId pooled, const BoundRouter& r,
                                        std::size_t k_top, const std::vector<double>* eps) {
    const std::size_t n = tape.value(r.w_gate).cols();
    if (k_top < 1 || k_top > n)
        throw precondition_error("noisy_topk_gate: K outside [1, N]");
    Tape::NodeId logits = tape.matmul(pooled, r.w_gate);  // 1 x N
    if (eps) {
        if (eps->size() != n) throw precondition_error("noisy_topk_gate: eps length != N");
        Matrix e(1, n);
        for (std::size_t i = 0; i < n; ++i) e(0, i) = (*eps)[i];
        const Tape::NodeId noise = tape.softplus(tape.matmul(pooled, r.w_noise));
        logits = tape.add(logits, tape.hadamard(tape.constant(std::move(e)), noise));
    }

    const Matrix& h = tape.value(logits);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Stable sort by logit keeps the lowest index on ties.
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t c) { return h(0, a) > h(0, c); });
    std::vector<std::size_t> selected(order.begin(), order.begin() + static_cast<long>(k_top));
    std::sort(selected.begin(), selected.end());

    GateDecisionNodes out;
    out.selected = selected;
    out.kept = tape.row_softmax(tape.gather_cols(logits, selected));
    out.dense = tape.scatter_cols(out.kept, selected, n);
    const Matrix& w = tape.value(out.kept);
    out.weights.assign(w.raw().begin(), w.raw().end());
    return out;
}

ExpertForwardNodes expert_forward_nodes(Tape& tape, const TaskBinding& b,
                                        std::size_t expert_index, Tape::NodeId z,
                                        std::size_t kappa) {
    const Expert& e = b.model->experts()[expert_index];
    const BoundWeight& conv = b.sw.at(e.conv.name());
    const BoundWeight& mlp1 = b.sw.at(e.mlp1.name());
    const BoundWeight& mlp2 = b.sw.at(e.mlp2.name());
    ExpertForwardNodes n;
    n.conv_in = tape.time_window(z, kappa);
    const Tape::NodeId c =
        tape.add_row_broadcast(tape.matmul(n.conv_in, tape.transpose(conv.w)), conv.bias);
    n.mlp1_in = tape.gelu(c);
    const Tape::NodeId h1 =
        tape.add_row_broadcast(tape.matmul(n.mlp1_in, tape.transpose(mlp1.w)), mlp1.bias);
    n.mlp2_in = tape.gelu(h1);
    n.out = tape.add_row_broadcast(tape.matmul(n.mlp2_in, tape.transpose(mlp2.w)), mlp2.bias);
    return n;
}

Tape::NodeId expert_forward_graph(Tape& tape, const TaskBinding& b, std::size_t expert_index,
                                  Tape::NodeId z, std::size_t kappa) {
    return expert_forward_nodes(tape, b, expert_index, z, kappa).out;
}

ForwardResult moe_forward_graph(Tape& tape, const TaskBinding& b, const Sample& sample,
                                const std::map<std::string, std::vector<double>>* eps) {
    const ModelConfig& cfg = b.model->config();
    const TaskSpec& spec = b.model->task_specs().at(b.task_id);
    ForwardResult out;
    Tape::NodeId fused = -1;

    for (const std::string& m : spec.modality_subset) {
        auto it = sample.modalities.find(m);
        if (it == sample.modalities.end() || !it->second.present) continue;
        const ModalitySequence& x = it->second;

        const Tape::NodeId z = encode_graph(tape, b, m, x);
        const Tape::NodeId pooled = tap_pool_graph(tape, z, b.routers.at(m).query);
        const std::vector<double>* mod_eps = nullptr;
        if (eps) {
            auto eit = eps->find(m);
            if (eit != eps->end()) mod_eps = &eit->second;
        }
        GateDecisionNodes gate =
            noisy_topk_gate_graph(tape, pooled, b.routers.at(m), cfg.k_top, mod_eps);

        // The same K-expert subset processes every time step of the sample.
        Tape::NodeId y = -1;
        for (std::size_t k = 0; k < gate.selected.size(); ++k) {
            const std::size_t ei = gate.selected[k];
            const ExpertForwardNodes en = expert_forward_nodes(tape, b, ei, z, cfg.kappa);
            out.traces.push_back({m, ei, en.conv_in, en.mlp1_in, en.mlp2_in});
            const Tape::NodeId weight_k = tape.gather_cols(gate.kept, {k});
            const Tape::NodeId contrib = tape.scale_by(en.out, weight_k);
            y = (y < 0) ? contrib : tape.add(y, contrib);
        }
        const Tape::NodeId pooled_y = tape.mean_rows(y);
        fused = (fused < 0) ? pooled_y : tape.add(fused, pooled_y);
        out.gates[m] = std::move(gate);
    }
    if (fused < 0)
        throw contract_error("moe_forward: all modalities absent for task " + b.task_id);

    out.fused = fused;
    out.logits = tape.add_row_broadcast(tape.matmul(fused, tape.transpose(b.head.weight)),
                                        b.head.bias);
    return out;
}

Tape::NodeId task_loss_graph(Tape& tape, const TaskBinding& b, Tape::NodeId logits,
                             const Sample& sample) {
    switch (b.objective) {
        case Objective::binary:
        case Objective::multilabel:
            return tape.bce_logits(logits, label_targets(sample));
        case Objective::multiclass:
            return tape.softmax_xent(logits, sample.label_index);
    }
    throw contract_error("task_loss: unknown objective");
}

Tape::NodeId balance_loss_graph(Tape& tape, const std::vector<Tape::NodeId>& dense_gates) {
    if (dense_gates.empty()) throw precondition_error("balance_loss: empty batch");
    Tape::NodeId importance = dense_gates[0];
    for (std::size_t i = 1; i < dense_gates.size(); ++i)
        importance = tape.add(importance, dense_gates[i]);
    double total = 0.0;
    for (double v : tape.value(importance).raw()) total += v;
    if (total <= 0.0) return tape.constant(Matrix(1, 1));  // empty gates: defined as 0
    const Tape::NodeId mean = tape.mean_all(importance);
    const Tape::NodeId diff = tape.sub_broadcast(importance, mean);
    const Tape::NodeId var = tape.mean_all(tape.hadamard(diff, diff));
    return tape.div_by(var, tape.hadamard(mean, mean));
}

Tape::NodeId divergence_loss_graph(Tape& tape,
                                   const std::map<std::string, Tape::NodeId>& mean_gates,
                                   int beta) {
    if (beta != 1 && beta != -1)
        throw precondition_error("divergence_loss: beta must be +1 or -1");
    std::vector<std::pair<std::string, Tape::NodeId>> gs(mean_gates.begin(), mean_gates.end());
    const std::size_t n = gs.size();
    if (n < 2) return tape.constant(Matrix(1, 1));
    Tape::NodeId sum = -1;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const Tape::NodeId a = gs[i].second, c = gs[j].second;
            const double na = frobenius_norm(tape.value(a));
            const double nc = frobenius_norm(tape.value(c));
            if (na <= 0.0 || nc <= 0.0) continue;  // zero mean gate: cosine defined as 0
            const Tape::NodeId num = tape.matmul(a, tape.transpose(c));
            const Tape::NodeId den = tape.hadamard(
                tape.sqrt_scalar(tape.matmul(a, tape.transpose(a))),
                tape.sqrt_scalar(tape.matmul(c, tape.transpose(c))));
            const Tape::NodeId cos = tape.div_by(num, den);
            sum = (sum < 0) ? cos : tape.add(sum, cos);
        }
    }
    if (sum < 0) return tape.constant(Matrix(1, 1));
    const double pairs = 0.5 * double(n) * double(n - 1);
    return tape.scale(sum, double(beta) / pairs);
}

// ---------------------------------------------------------------------------
// Numeric wrappers
// ---------------------------------------------------------------------------

Matrix tap_pool(const Matrix& z, const Matrix& query) {
    if (z.rows() == 0) throw contract_error("tap_pool: L must be >= 1");
    if (query.rows() != z.cols() || query.cols() != 1)
        throw precondition_error("tap_pool: query must be d x 1");
    Tape tape;
    const Tape::NodeId out =
        tap_pool_graph(tape, tape.constant(z), tape.constant(query));
    return tape.value(out);
}

GateDecision noisy_topk_gate(const Matrix& pooled, const RouterHead& head, std::size_t k_top,
                             bool train, SplitRng& rng) {
    Tape tape;
    BoundRouter r;
    r.w_gate = tape.constant(head.w_gate);
    r.w_noise = tape.constant(head.w_noise);
    r.query = tape.constant(head.query);
    std::vector<double> eps;
    if (train) {
        eps.resize(head.w_gate.cols());
        for (double& v : eps) v = rng.normal();
    }
    const GateDecisionNodes g = noisy_topk_gate_graph(tape, tape.constant(pooled), r, k_top,
                                                      train ? &eps : nullptr);
    GateDecision out;
    out.selected = g.selected;
    out.weights = g.weights;
    out.dense = tape.value(g.dense).raw();
    return out;
}

double balance_loss(const std::vector<GateDecision>& decisions) {
    if (decisions.empty()) throw precondition_error("balance_loss: empty batch");
    Tape tape;
    std::vector<Tape::NodeId> nodes;
    for (const GateDecision& d : decisions) {
        Matrix g(1, d.dense.size());
        for (std::size_t i = 0; i < d.dense.size(); ++i) g(0, i) = d.dense[i];
        nodes.push_back(tape.constant(std::move(g)));
    }
    return tape.value(balance_loss_graph(tape, nodes))(0, 0);
}

double divergence_loss(const std::map<std::string, std::vector<double>>& mean_gates, int beta) {
    Tape tape;
    std::map<std::string, Tape::NodeId> nodes;
    for (const auto& [m, g] : mean_gates) {
        Matrix v(1, g.size());
        for (std::size_t i = 0; i < g.size(); ++i) v(0, i) = g[i];
        nodes[m] = tape.constant(std::move(v));
    }
    return tape.value(divergence_loss_graph(tape, nodes, beta))(0, 0);
}

Matrix encode_seq(const FlameModel& model, const std::string& modality,
                  const ModalitySequence& x, Cursor cursor) {
    Tape tape;
    TaskBinding b;
    b.tape = &tape;
    b.model = &model;
    const Encoder& enc = model.encoder_of(modality);
    for (const StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v}) {
        BoundWeight bw;
        bw.w = tape.constant(sw->effective(cursor));
        bw.bias = tape.constant(sw->effective_bias(cursor));
        b.sw[sw->name()] = bw;
    }
    Matrix pos(1, 1);
    pos(0, 0) = enc.pos_scale.effective(cursor);
    b.pos[modality] = tape.constant(pos);
    return tape.value(encode_graph(tape, b, modality, x));
}

Matrix expert_forward(const FlameModel& model, std::size_t expert_index, const Matrix& z,
                      Cursor cursor) {
    if (z.rows() == 0) throw precondition_error("expert_forward: L must be >= 1");
    Tape tape;
    TaskBinding b;
    b.tape = &tape;
    b.model = &model;
    const Expert& e = model.experts()[expert_index];
    for (const StackableWeight* sw : {&e.conv, &e.mlp1, &e.mlp2}) {
        BoundWeight bw;
        bw.w = tape.constant(sw->effective(cursor));
        bw.bias = tape.constant(sw->effective_bias(cursor));
        b.sw[sw->name()] = bw;
    }
    return tape.value(
        expert_forward_graph(tape, b, expert_index, tape.constant(z), model.config().kappa));
}

EvalOutput eval_forward(const FlameModel& model, const std::string& task_id,
                        const Sample& sample, Cursor cursor, bool capture_traces) {
    Tape tape;
    BindMode mode;
    mode.method = model.method();
    mode.cursor = cursor;
    mode.train = false;
    if (model.method() == Method::lora) mode.lora_task = task_id;
    TaskBinding b = bind_task(tape, const_cast<FlameModel&>(model), task_id, mode);
    const ForwardResult r = moe_forward_graph(tape, b, sample, nullptr);

    EvalOutput out;
    out.logits = tape.value(r.logits);
    out.fused = tape.value(r.fused);
    for (const auto& [m, g] : r.gates) {
        GateDecision d;
        d.selected = g.selected;
        d.weights = g.weights;
        d.dense = tape.value(g.dense).raw();
        out.gates[m] = std::move(d);
    }
    if (capture_traces) {
        for (const ExpertTrace& t : r.traces) {
            EvalOutput::Trace tr;
            tr.modality = t.modality;
            tr.expert = t.expert;
            tr.conv_in = tape.value(t.conv_in);
            tr.mlp1_in = tape.value(t.mlp1_in);
            tr.mlp2_in = tape.value(t.mlp2_in);
            out.traces.push_back(std::move(tr));
        }
    }
    return out;
}

std::map<std::string, FingerprintEntry> routing_fingerprint(const FlameModel& model,
                                                            const std::string& task_id,
                                                            const Dataset& data, Cursor cursor) {
    if (data.empty()) throw precondition_error("routing_fingerprint: empty dataset");
    const std::size_t n = model.config().n_experts;

    struct Acc {
        std::vector<double> tokens_selected;
        std::vector<double> weight_sum;
        double tokens_total = 0.0;
    };
    std::map<std::string, Acc> acc;
    for_each_eval_output(model, task_id, data, cursor, false,
                         [&](std::size_t i, const EvalOutput& out) {
        const Sample& s = data.samples[i];
        for (const auto& [m, g] : out.gates) {
            auto [it, fresh] = acc.try_emplace(m);
            if (fresh) {
                it->second.tokens_selected.assign(n, 0.0);
                it->second.weight_sum.assign(n, 0.0);
            }
            const double len = double(s.modalities.at(m).length());
            it->second.tokens_total += len;
            for (std::size_t k = 0; k < g.selected.size(); ++k) {
                it->second.tokens_selected[g.selected[k]] += len;
                it->second.weight_sum[g.selected[k]] += len * g.weights[k];
            }
        }
    });

    std::map<std::string, FingerprintEntry> out;
    for (const auto& [m, a] : acc) {
        FingerprintEntry e;
        e.activation_ratio.assign(n, 0.0);
        e.mean_gate.assign(n, std::nullopt);
        for (std::size_t i = 0; i < n; ++i) {
            if (a.tokens_total > 0.0) e.activation_ratio[i] = a.tokens_selected[i] / a.tokens_total;
            if (a.tokens_selected[i] > 0.0)
                e.mean_gate[i] = a.weight_sum[i] / a.tokens_selected[i];
        }
        out[m] = std::move(e);
    }
    return out;
}

void for_each_eval_output(const FlameModel& model, const std::string& task_id,
                          const Dataset& data, Cursor cursor, bool capture_traces,
                          const std::function<void(std::size_t, const EvalOutput&)>& fn) {
    constexpr std::size_t kChunk = 32;
    BindMode mode;
    mode.method = model.method();
    mode.cursor = cursor;
    mode.train = false;
    if (model.method() == Method::lora) mode.lora_task = task_id;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        Tape tape;
        TaskBinding b = bind_task(tape, const_cast<FlameModel&>(model), task_id, mode);
        const std::size_t end = std::min(data.size(), start + kChunk);
        for (std::size_t i = start; i < end; ++i) {
            const ForwardResult r = moe_forward_graph(tape, b, data.samples[i], nullptr);
            EvalOutput out;
            out.logits = tape.value(r.logits);
            out.fused = tape.value(r.fused);
            for (const auto& [m, g] : r.gates) {
                GateDecision d;
                d.selected = g.selected;
                d.weights = g.weights;
                d.dense = tape.value(g.dense).raw();
                out.gates[m] = std::move(d);
            }
            if (capture_traces)
                for (const ExpertTrace& t : r.traces)
                    out.traces.push_back({t.modality, t.expert, tape.value(t.conv_in),
                                          tape.value(t.mlp1_in), tape.value(t.mlp2_in)});
            fn(i, out);
        }
    }
}

std::vector<Matrix> eval_logits(const FlameModel& model, const std::string& task_id,
                                const Dataset& data, Cursor cursor) {
    std::vector<Matrix> out(data.size());
    for_each_eval_output(model, task_id, data, cursor, false,
                         [&](std::size_t i, const EvalOutput& o) { out[i] = o.logits; });
    return out;
}

} // namespace flame
