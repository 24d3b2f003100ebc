#include "flame/model.hpp"

#include "flame/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace flame {

void ModelConfig::validate() const {
    if (d == 0 || d_h == 0 || n_experts == 0 || k_top == 0)
        throw config_error("model: d, d_h, N, K must all be positive");
    if (k_top > n_experts)
        throw config_error("model: K (" + std::to_string(k_top) + ") must be <= N (" +
                           std::to_string(n_experts) + ")");
    if (kappa % 2 == 0) throw config_error("model: kappa_conv must be odd");
}

StackableWeight::StackableWeight(std::string name, std::size_t rows, std::size_t cols)
    : name_(std::move(name)), rows_(rows), cols_(cols) {}

void StackableWeight::attach_live(int stage, Matrix weight_init, Matrix bias_init) {
    if (live_) throw contract_error(name_ + ": live component already attached");
    if (weight_init.rows() != rows_ || weight_init.cols() != cols_)
        throw precondition_error(name_ + ": live shape mismatch");
    if (bias_init.rows() != 1 || bias_init.cols() != rows_)
        throw precondition_error(name_ + ": live bias must be 1 x rows");
    if (last_stage() >= stage)
        throw contract_error(name_ + ": stage " + std::to_string(stage) + " already frozen");
    live_ = std::move(weight_init);
    live_bias_ = std::move(bias_init);
    live_stage_ = stage;
}

void StackableWeight::freeze_live_as_base(std::size_t rank) {
    if (!live_) throw contract_error(name_ + ": no live component to freeze");
    const std::size_t maxr = std::min(rows_, cols_);
    if (rank == 0 || rank >= maxr) {
        base_ = std::move(*live_);
    } else {
        base_ = truncated_svd(*live_, rank).expand();
    }
    base_stage_ = live_stage_;
    bias_deltas_.push_back({live_stage_, std::move(*live_bias_)});
    live_.reset();
    live_bias_.reset();
    live_stage_ = -1;
}

const SvdFactors& StackableWeight::compress_and_stack(std::size_t rank) {
    if (!live_) throw contract_error(name_ + ": no live component to compress");
    if (rank > std::min(rows_, cols_))
        throw precondition_error(name_ + ": rank exceeds min(p,d)");
    slices_.push_back({live_stage_, truncated_svd(*live_, rank)});
    bias_deltas_.push_back({live_stage_, std::move(*live_bias_)});
    live_.reset();
    live_bias_.reset();
    live_stage_ = -1;
    return slices_.back().factors;
}

Matrix StackableWeight::effective(Cursor cursor) const {
    if (cursor < 0 || (last_stage() >= 0 && cursor > std::max(last_stage(), live_stage_)))
        throw precondition_error(name_ + ": cursor " + std::to_string(cursor) +
                                 " beyond ledger");
    Matrix w(rows_, cols_);
    if (base_ && base_stage_ <= cursor) w += *base_;
    for (const Slice& s : slices_)
        if (s.stage <= cursor) w += s.factors.expand();
    return w;
}

Matrix StackableWeight::effective_bias(Cursor cursor) const {
    Matrix b(1, rows_);
    for (const BiasDelta& d : bias_deltas_)
        if (d.stage <= cursor) b += d.delta;
    return b;
}

Matrix& StackableWeight::base_bias_mut() {
    if (bias_deltas_.empty()) throw contract_error(name_ + ": no frozen bias to mutate");
    return bias_deltas_.front().delta;
}

int StackableWeight::last_stage() const {
    int last = base_ ? base_stage_ : -1;
    for (const Slice& s : slices_) last = std::max(last, s.stage);
    return last;
}

std::size_t StackableWeight::stored_scalars_at_stage(int stage) const {
    std::size_t n = 0;
    if (base_ && base_stage_ == stage) n += rows_ * cols_;
    for (const Slice& s : slices_)
        if (s.stage == stage) n += s.factors.rank() * (rows_ + cols_ + 1);
    for (const BiasDelta& d : bias_deltas_)
        if (d.stage == stage) n += rows_;
    return n;
}

void StackableWeight::restore_base(int stage, Matrix base) {
    base_ = std::move(base);
    base_stage_ = stage;
}

void StackableWeight::restore_slice(int stage, SvdFactors f) {
    slices_.push_back({stage, std::move(f)});
}

void StackableWeight::restore_bias_delta(int stage, Matrix delta) {
    bias_deltas_.push_back({stage, std::move(delta)});
}

double ScalarLedger::effective(Cursor cursor) const {
    double v = 0.0;
    for (const Delta& d : deltas)
        if (d.stage <= cursor) v += d.value;
    return v;
}

void ScalarLedger::freeze_live() {
    if (!live) throw contract_error("ScalarLedger: no live delta to freeze");
    deltas.push_back({live_stage, *live});
    live.reset();
    live_stage = -1;
}

const char* method_name(Method m) {
    switch (m) {
        case Method::flame: return "flame";
        case Method::simple_ft: return "simple_ft";
        case Method::ewc: return "ewc";
        case Method::lora: return "lora";
    }
    return "?";
}

Method method_from_name(const std::string& s) {
    if (s == "flame") return Method::flame;
    if (s == "simple_ft") return Method::simple_ft;
    if (s == "ewc") return Method::ewc;
    if (s == "lora") return Method::lora;
    throw config_error("unknown method '" + s + "'");
}

FlameModel::FlameModel(ModelConfig cfg, Method method) : cfg_(cfg), method_(method) {
    cfg_.validate();
}

Cursor FlameModel::cursor_of(const std::string& task_id) const {
    auto it = task_cursor_.find(task_id);
    if (it == task_cursor_.end())
        throw contract_error("model: task '" + task_id + "' has no cursor");
    return it->second;
}

const RouterHead& FlameModel::router_at(const std::string& modality, Cursor cursor) const {
    auto it = routers_.find({modality, cursor});
    if (it == routers_.end())
        throw contract_error("model: no router head for (" + modality + ", stage " +
                             std::to_string(cursor) + ")");
    return it->second;
}

const TaskHead& FlameModel::head_of(const std::string& task_id) const {
    auto it = heads_.find(task_id);
    if (it == heads_.end()) throw contract_error("model: no head for task '" + task_id + "'");
    return it->second;
}

const Encoder& FlameModel::encoder_of(const std::string& modality) const {
    auto it = encoders_.find(modality);
    if (it == encoders_.end())
        throw contract_error("model: no encoder for modality '" + modality + "'");
    return it->second;
}

std::vector<StackableWeight*> FlameModel::stackable_weights() {
    std::vector<StackableWeight*> out;
    for (Expert& e : experts_) {
        out.push_back(&e.conv);
        out.push_back(&e.mlp1);
        out.push_back(&e.mlp2);
    }
    for (auto& [id, enc] : encoders_) {
        out.push_back(&enc.w_in);
        out.push_back(&enc.w_q);
        out.push_back(&enc.w_k);
        out.push_back(&enc.w_v);
    }
    return out;
}

std::vector<const StackableWeight*> FlameModel::stackable_weights() const {
    std::vector<const StackableWeight*> out;
    for (const Expert& e : experts_) {
        out.push_back(&e.conv);
        out.push_back(&e.mlp1);
        out.push_back(&e.mlp2);
    }
    for (const auto& [id, enc] : encoders_) {
        out.push_back(&enc.w_in);
        out.push_back(&enc.w_q);
        out.push_back(&enc.w_k);
        out.push_back(&enc.w_v);
    }
    return out;
}

namespace {

Matrix gaussian_init(std::size_t rows, std::size_t cols, SplitRng& rng, double scale) {
    Matrix m(rows, cols);
    for (double& v : m.raw()) v = scale * rng.normal();
    return m;
}

} // namespace

Expert make_expert(const ModelConfig& cfg, std::size_t index, int stage, SplitRng& rng,
                   double init_scale) {
    const std::string prefix = "expert" + std::to_string(index);
    Expert e;
    e.conv = StackableWeight(prefix + ".conv", cfg.d, cfg.d * cfg.kappa);
    e.mlp1 = StackableWeight(prefix + ".mlp1", cfg.d_h, cfg.d);
    e.mlp2 = StackableWeight(prefix + ".mlp2", cfg.d, cfg.d_h);
    SplitRng r1 = rng.split(prefix + ".conv");
    SplitRng r2 = rng.split(prefix + ".mlp1");
    SplitRng r3 = rng.split(prefix + ".mlp2");
    e.conv.attach_live(stage,
                       gaussian_init(cfg.d, cfg.d * cfg.kappa, r1,
                                     init_scale / std::sqrt(double(cfg.d * cfg.kappa))),
                       Matrix(1, cfg.d));
    e.mlp1.attach_live(stage,
                       gaussian_init(cfg.d_h, cfg.d, r2, init_scale / std::sqrt(double(cfg.d))),
                       Matrix(1, cfg.d_h));
    e.mlp2.attach_live(stage,
                       gaussian_init(cfg.d, cfg.d_h, r3, init_scale / std::sqrt(double(cfg.d_h))),
                       Matrix(1, cfg.d));
    return e;
}

Encoder make_encoder(const ModelConfig& cfg, const std::string& modality, std::size_t dim_in,
                     int stage, SplitRng& rng, double init_scale) {
    const std::string prefix = "enc." + modality;
    Encoder enc;
    enc.modality_id = modality;
    enc.dim_in = dim_in;
    enc.first_stage = stage;
    enc.w_in = StackableWeight(prefix + ".w_in", cfg.d, dim_in);
    enc.w_q = StackableWeight(prefix + ".w_q", cfg.d, cfg.d);
    enc.w_k = StackableWeight(prefix + ".w_k", cfg.d, cfg.d);
    enc.w_v = StackableWeight(prefix + ".w_v", cfg.d, cfg.d);
    SplitRng ri = rng.split(prefix + ".w_in");
    SplitRng rq = rng.split(prefix + ".w_q");
    SplitRng rk = rng.split(prefix + ".w_k");
    SplitRng rv = rng.split(prefix + ".w_v");
    enc.w_in.attach_live(stage,
                         gaussian_init(cfg.d, dim_in, ri, init_scale / std::sqrt(double(dim_in))),
                         Matrix(1, cfg.d));
    enc.w_q.attach_live(stage,
                        gaussian_init(cfg.d, cfg.d, rq, init_scale / std::sqrt(double(cfg.d))),
                        Matrix(1, cfg.d));
    enc.w_k.attach_live(stage,
                        gaussian_init(cfg.d, cfg.d, rk, init_scale / std::sqrt(double(cfg.d))),
                        Matrix(1, cfg.d));
    enc.w_v.attach_live(stage,
                        gaussian_init(cfg.d, cfg.d, rv, init_scale / std::sqrt(double(cfg.d))),
                        Matrix(1, cfg.d));
    enc.pos_scale.live = 0.1;
    enc.pos_scale.live_stage = stage;
    return enc;
}

RouterHead make_router_head(const ModelConfig& cfg, const std::string& modality, int stage,
                            SplitRng& rng, double init_scale) {
    RouterHead h;
    h.modality_id = modality;
    h.stage = stage;
    h.created_stage = stage;
    SplitRng rg = rng.split("router." + modality + ".gate");
    SplitRng rn = rng.split("router." + modality + ".noise");
    SplitRng rq = rng.split("router." + modality + ".query");
    h.w_gate = gaussian_init(cfg.d, cfg.n_experts, rg, init_scale / std::sqrt(double(cfg.d)));
    h.w_noise = gaussian_init(cfg.d, cfg.n_experts, rn, init_scale / std::sqrt(double(cfg.d)));
    h.query = gaussian_init(cfg.d, 1, rq, init_scale);
    return h;
}

TaskHead make_task_head(const ModelConfig& cfg, const TaskSpec& task, int stage, SplitRng& rng,
                        double init_scale) {
    TaskHead h;
    h.task_id = task.task_id;
    h.stage = stage;
    SplitRng rw = rng.split("head." + task.task_id);
    h.weight = gaussian_init(task.class_count, cfg.d, rw, init_scale / std::sqrt(double(cfg.d)));
    h.bias = Matrix(1, task.class_count);
    return h;
}

std::map<std::string, Matrix> snapshot_tensors(const FlameModel& model) {
    std::map<std::string, Matrix> out;
    auto add_sw = [&](const StackableWeight& sw) {
        if (sw.has_base()) out[sw.name() + ".base"] = sw.base();
        for (const auto& s : sw.slices()) {
            const std::string p = sw.name() + ".slice" + std::to_string(s.stage);
            out[p + ".u"] = s.factors.u;
            Matrix sig(1, s.factors.sigma.size());
            for (std::size_t i = 0; i < s.factors.sigma.size(); ++i)
                sig(0, i) = s.factors.sigma[i];
            out[p + ".sigma"] = std::move(sig);
            out[p + ".vt"] = s.factors.vt;
        }
        for (const auto& b : sw.bias_deltas())
            out[sw.name() + ".bias" + std::to_string(b.stage)] = b.delta;
    };
    for (const Expert& e : model.experts()) {
        add_sw(e.conv);
        add_sw(e.mlp1);
        add_sw(e.mlp2);
    }
    for (const auto& [id, enc] : model.encoders()) {
        add_sw(enc.w_in);
        add_sw(enc.w_q);
        add_sw(enc.w_k);
        add_sw(enc.w_v);
        for (const auto& dlt : enc.pos_scale.deltas) {
            Matrix v(1, 1);
            v(0, 0) = dlt.value;
            out["enc." + id + ".pos_scale" + std::to_string(dlt.stage)] = std::move(v);
        }
    }
    for (const auto& [key, rh] : model.routers()) {
        const std::string p = "router." + key.first + ".s" + std::to_string(key.second);
        out[p + ".gate"] = rh.w_gate;
        out[p + ".noise"] = rh.w_noise;
        out[p + ".query"] = rh.query;
    }
    for (const auto& [id, head] : model.heads()) {
        out["head." + id + ".w"] = head.weight;
        out["head." + id + ".b"] = head.bias;
    }
    for (const auto& [key, ad] : model.lora()) {
        out[key.first + ".lora_a." + key.second] = ad.a;
        out[key.first + ".lora_b." + key.second] = ad.b;
    }
    return out;
}

Matrix positional_encoding(std::size_t len, std::size_t d) {
    Matrix pe(len, d);
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            const double freq =
                std::pow(10000.0, -2.0 * double(i / 2) / static_cast<double>(d));
            pe(t, i) = (i % 2 == 0) ? std::sin(double(t) * freq) : std::cos(double(t) * freq);
        }
    return pe;
}

} // namespace flame
