#include "flame/checkpoint.hpp"

#include "flame/errors.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace flame {
namespace {

constexpr char kMagic[8] = {'F', 'L', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw format_error(path + ": cannot open for writing");
    }
    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void i32(std::int32_t v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void matrix(const Matrix& m) {
        u64(m.rows());
        u64(m.cols());
        if (m.size()) bytes(m.data(), m.size() * sizeof(double));
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw format_error(path + ": cannot open");
    }
    void bytes(void* p, std::size_t n) {
        if (!in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n)))
            throw format_error(path_ + ": truncated checkpoint");
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, sizeof v);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, sizeof v);
        return v;
    }
    std::int32_t i32() {
        std::int32_t v;
        bytes(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, sizeof v);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        if (n) bytes(s.data(), n);
        return s;
    }
    Matrix matrix() {
        const std::uint64_t r = u64();
        const std::uint64_t c = u64();
        Matrix m(r, c);
        if (m.size()) bytes(m.data(), m.size() * sizeof(double));
        return m;
    }

private:
    std::ifstream in_;
    std::string path_;
};

void write_stackable(Writer& w, const StackableWeight& sw) {
    if (sw.has_live())
        throw contract_error(sw.name() + ": cannot checkpoint with a live component");
    w.str(sw.name());
    w.u64(sw.rows());
    w.u64(sw.cols());
    w.u32(sw.has_base() ? 1 : 0);
    if (sw.has_base()) {
        w.i32(sw.base_stage());
        w.matrix(sw.base());
    }
    w.u32(static_cast<std::uint32_t>(sw.slices().size()));
    for (const auto& s : sw.slices()) {
        w.i32(s.stage);
        w.matrix(s.factors.u);
        w.u32(static_cast<std::uint32_t>(s.factors.sigma.size()));
        for (double v : s.factors.sigma) w.f64(v);
        w.matrix(s.factors.vt);
    }
    w.u32(static_cast<std::uint32_t>(sw.bias_deltas().size()));
    for (const auto& b : sw.bias_deltas()) {
        w.i32(b.stage);
        w.matrix(b.delta);
    }
}

StackableWeight read_stackable(Reader& r) {
    const std::string name = r.str();
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    StackableWeight sw(name, rows, cols);
    if (r.u32()) {
        const int stage = r.i32();
        sw.restore_base(stage, r.matrix());
    }
    const std::uint32_t n_slices = r.u32();
    for (std::uint32_t i = 0; i < n_slices; ++i) {
        const int stage = r.i32();
        SvdFactors f;
        f.u = r.matrix();
        const std::uint32_t nr = r.u32();
        f.sigma.resize(nr);
        for (double& v : f.sigma) v = r.f64();
        f.vt = r.matrix();
        sw.restore_slice(stage, std::move(f));
    }
    const std::uint32_t n_bias = r.u32();
    for (std::uint32_t i = 0; i < n_bias; ++i) {
        const int stage = r.i32();
        sw.restore_bias_delta(stage, r.matrix());
    }
    return sw;
}

} // namespace

void save_checkpoint(const FlameModel& model, const std::string& path) {
    Writer w(path);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(model.method()));
    const ModelConfig& cfg = model.config();
    w.u64(cfg.d);
    w.u64(cfg.d_h);
    w.u64(cfg.n_experts);
    w.u64(cfg.k_top);
    w.u64(cfg.kappa);
    w.u64(cfg.r0);
    w.i32(model.completed_stages());

    w.u32(static_cast<std::uint32_t>(model.experts().size()));
    for (const Expert& e : model.experts()) {
        write_stackable(w, e.conv);
        write_stackable(w, e.mlp1);
        write_stackable(w, e.mlp2);
    }

    w.u32(static_cast<std::uint32_t>(model.encoders().size()));
    for (const auto& [id, enc] : model.encoders()) {
        w.str(id);
        w.u64(enc.dim_in);
        w.i32(enc.first_stage);
        write_stackable(w, enc.w_in);
        write_stackable(w, enc.w_q);
        write_stackable(w, enc.w_k);
        write_stackable(w, enc.w_v);
        if (enc.pos_scale.live)
            throw contract_error("encoder " + id + ": live positional delta at checkpoint");
        w.u32(static_cast<std::uint32_t>(enc.pos_scale.deltas.size()));
        for (const auto& d : enc.pos_scale.deltas) {
            w.i32(d.stage);
            w.f64(d.value);
        }
    }

    w.u32(static_cast<std::uint32_t>(model.routers().size()));
    for (const auto& [key, rh] : model.routers()) {
        w.str(key.first);
        w.i32(key.second);
        w.i32(rh.created_stage);
        w.matrix(rh.w_gate);
        w.matrix(rh.w_noise);
        w.matrix(rh.query);
    }

    w.u32(static_cast<std::uint32_t>(model.heads().size()));
    for (const auto& [id, head] : model.heads()) {
        w.str(id);
        w.i32(head.stage);
        w.matrix(head.weight);
        w.matrix(head.bias);
    }

    w.u32(static_cast<std::uint32_t>(model.task_cursor().size()));
    for (const auto& [id, cur] : model.task_cursor()) {
        w.str(id);
        w.i32(cur);
    }

    w.u32(static_cast<std::uint32_t>(model.task_specs().size()));
    for (const auto& [id, spec] : model.task_specs()) {
        w.str(id);
        w.u32(static_cast<std::uint32_t>(spec.objective));
        w.u64(spec.class_count);
        w.u32(static_cast<std::uint32_t>(spec.modality_subset.size()));
        for (const auto& m : spec.modality_subset) w.str(m);
    }

    w.u32(static_cast<std::uint32_t>(model.lora().size()));
    for (const auto& [key, ad] : model.lora()) {
        w.str(key.first);
        w.str(key.second);
        w.matrix(ad.a);
        w.matrix(ad.b);
    }
}

FlameModel load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw format_error(path + ": not a FLAME checkpoint");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw format_error(path + ": unsupported checkpoint version " +
                           std::to_string(version));
    const Method method = static_cast<Method>(r.u32());
    ModelConfig cfg;
    cfg.d = r.u64();
    cfg.d_h = r.u64();
    cfg.n_experts = r.u64();
    cfg.k_top = r.u64();
    cfg.kappa = r.u64();
    cfg.r0 = r.u64();
    FlameModel model(cfg, method);
    model.set_completed_stages(r.i32());

    const std::uint32_t n_experts = r.u32();
    for (std::uint32_t i = 0; i < n_experts; ++i) {
        Expert e;
        e.conv = read_stackable(r);
        e.mlp1 = read_stackable(r);
        e.mlp2 = read_stackable(r);
        model.experts().push_back(std::move(e));
    }

    const std::uint32_t n_enc = r.u32();
    for (std::uint32_t i = 0; i < n_enc; ++i) {
        Encoder enc;
        enc.modality_id = r.str();
        enc.dim_in = r.u64();
        enc.first_stage = r.i32();
        enc.w_in = read_stackable(r);
        enc.w_q = read_stackable(r);
        enc.w_k = read_stackable(r);
        enc.w_v = read_stackable(r);
        const std::uint32_t n_pos = r.u32();
        for (std::uint32_t k = 0; k < n_pos; ++k) {
            const int stage = r.i32();
            enc.pos_scale.deltas.push_back({stage, r.f64()});
        }
        model.encoders()[enc.modality_id] = std::move(enc);
    }

    const std::uint32_t n_routers = r.u32();
    for (std::uint32_t i = 0; i < n_routers; ++i) {
        const std::string m = r.str();
        const int stage = r.i32();
        RouterHead rh;
        rh.modality_id = m;
        rh.stage = stage;
        rh.created_stage = r.i32();
        rh.w_gate = r.matrix();
        rh.w_noise = r.matrix();
        rh.query = r.matrix();
        model.routers()[{m, stage}] = std::move(rh);
    }

    const std::uint32_t n_heads = r.u32();
    for (std::uint32_t i = 0; i < n_heads; ++i) {
        TaskHead h;
        h.task_id = r.str();
        h.stage = r.i32();
        h.weight = r.matrix();
        h.bias = r.matrix();
        model.heads()[h.task_id] = std::move(h);
    }

    const std::uint32_t n_cursor = r.u32();
    for (std::uint32_t i = 0; i < n_cursor; ++i) {
        const std::string id = r.str();
        model.task_cursor()[id] = r.i32();
    }

    const std::uint32_t n_specs = r.u32();
    for (std::uint32_t i = 0; i < n_specs; ++i) {
        TaskSpec spec;
        spec.task_id = r.str();
        spec.objective = static_cast<Objective>(r.u32());
        spec.class_count = r.u64();
        const std::uint32_t n_mods = r.u32();
        for (std::uint32_t k = 0; k < n_mods; ++k) spec.modality_subset.push_back(r.str());
        model.task_specs()[spec.task_id] = std::move(spec);
    }

    const std::uint32_t n_lora = r.u32();
    for (std::uint32_t i = 0; i < n_lora; ++i) {
        const std::string wname = r.str();
        const std::string task = r.str();
        LoraAdapter ad;
        ad.a = r.matrix();
        ad.b = r.matrix();
        model.lora()[{wname, task}] = std::move(ad);
    }
    return model;
}

} // namespace flame
