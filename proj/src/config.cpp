#include "flame/config.hpp"

#include "flame/errors.hpp"
#include "flame/idx.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace flame {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw config_error(path + ": " + what);
}

void expect_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) fail(path + "." + key, "unknown key");
}

template <typename T>
T get_or(const json& j, const std::string& path, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(path + "." + key, "wrong type");
    }
}

template <typename T>
T require(const json& j, const std::string& path, const std::string& key) {
    if (!j.contains(key)) fail(path + "." + key, "missing required key");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(path + "." + key, "wrong type");
    }
}

Objective parse_objective(const std::string& s, const std::string& path) {
    if (s == "binary") return Objective::binary;
    if (s == "multiclass") return Objective::multiclass;
    if (s == "multilabel") return Objective::multilabel;
    fail(path, "objective must be binary | multiclass | multilabel");
}

} // namespace

TrainOptions RunConfig::train_options() const {
    TrainOptions opt;
    opt.lr = lr;
    opt.momentum = momentum;
    opt.batch_size = batch_size;
    opt.w_bal = w_bal;
    opt.w_div = w_div;
    opt.beta = beta;
    opt.init_scale = init_scale;
    opt.ewc_lambda = ewc_lambda;
    return opt;
}

RunConfig parse_run_config(const std::string& json_text, const std::string& origin) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        fail(origin, std::string("JSON parse failure: ") + e.what());
    }
    expect_keys(root, origin,
                {"model", "losses", "optimizer", "stream", "tasks", "seed", "output_dir"});

    RunConfig cfg;
    const json& jm = root.contains("model") ? root.at("model") : json::object();
    expect_keys(jm, origin + ".model", {"d", "d_h", "N", "K", "kappa_conv", "r0"});
    cfg.model.d = get_or<std::size_t>(jm, origin + ".model", "d", 16);
    cfg.model.d_h = get_or<std::size_t>(jm, origin + ".model", "d_h", 2 * cfg.model.d);
    cfg.model.n_experts = get_or<std::size_t>(jm, origin + ".model", "N", 5);
    cfg.model.k_top = get_or<std::size_t>(jm, origin + ".model", "K", 2);
    cfg.model.kappa = get_or<std::size_t>(jm, origin + ".model", "kappa_conv", 3);
    cfg.model.r0 = get_or<std::size_t>(jm, origin + ".model", "r0", 0);
    if (cfg.model.k_top > cfg.model.n_experts)
        fail(origin + ".model.K", "constraint violated: K must be <= N");
    try {
        cfg.model.validate();
    } catch (const config_error& e) {
        fail(origin + ".model", e.what());
    }

    if (root.contains("losses")) {
        const json& jl = root.at("losses");
        expect_keys(jl, origin + ".losses", {"w_bal", "w_div", "beta"});
        cfg.w_bal = get_or<double>(jl, origin + ".losses", "w_bal", 0.01);
        cfg.w_div = get_or<double>(jl, origin + ".losses", "w_div", 0.1);
        if (jl.contains("beta")) {
            for (const auto& [task, value] : jl.at("beta").items()) {
                const int b = value.get<int>();
                if (b != 1 && b != -1)
                    fail(origin + ".losses.beta." + task, "beta must be +1 or -1");
                cfg.beta[task] = b;
            }
        }
    }

    if (root.contains("optimizer")) {
        const json& jo = root.at("optimizer");
        expect_keys(jo, origin + ".optimizer",
                    {"lr", "momentum", "epochs", "batch_size", "init_scale", "ewc_lambda"});
        cfg.lr = get_or<double>(jo, origin + ".optimizer", "lr", 0.05);
        cfg.momentum = get_or<double>(jo, origin + ".optimizer", "momentum", 0.9);
        cfg.epochs = get_or<std::size_t>(jo, origin + ".optimizer", "epochs", 100);
        cfg.batch_size = get_or<std::size_t>(jo, origin + ".optimizer", "batch_size", 16);
        cfg.init_scale = get_or<double>(jo, origin + ".optimizer", "init_scale", 1.0);
        cfg.ewc_lambda = get_or<double>(jo, origin + ".optimizer", "ewc_lambda", 1.0);
        if (cfg.batch_size < 1) fail(origin + ".optimizer.batch_size", "must be >= 1");
    }

    if (!root.contains("tasks") || !root.at("tasks").is_object() || root.at("tasks").empty())
        fail(origin + ".tasks", "at least one task is required");
    for (const auto& [id, jt] : root.at("tasks").items()) {
        const std::string tpath = origin + ".tasks." + id;
        TaskConfig tc;
        tc.type = get_or<std::string>(jt, tpath, "type", "synthetic");
        if (tc.type == "synthetic") {
            expect_keys(jt, tpath,
                        {"type", "objective", "classes", "n_train", "n_eval", "noise",
                         "latent_group", "label_margin", "modalities"});
            SyntheticTaskSpec& ts = tc.synthetic;
            ts.task_id = id;
            ts.objective = parse_objective(
                get_or<std::string>(jt, tpath, "objective", "binary"), tpath + ".objective");
            ts.class_count = get_or<std::size_t>(jt, tpath, "classes",
                                                 ts.objective == Objective::binary ? 1 : 2);
            ts.n_train = get_or<std::size_t>(jt, tpath, "n_train", 128);
            ts.n_eval = get_or<std::size_t>(jt, tpath, "n_eval", 64);
            ts.noise = get_or<double>(jt, tpath, "noise", 0.01);
            ts.latent_group = get_or<std::uint64_t>(jt, tpath, "latent_group", 0);
            ts.label_margin = get_or<double>(jt, tpath, "label_margin", 0.1);
            if (!jt.contains("modalities") || !jt.at("modalities").is_array() ||
                jt.at("modalities").empty())
                fail(tpath + ".modalities", "nonempty array required");
            for (std::size_t i = 0; i < jt.at("modalities").size(); ++i) {
                const json& jmod = jt.at("modalities").at(i);
                const std::string mpath = tpath + ".modalities[" + std::to_string(i) + "]";
                expect_keys(jmod, mpath, {"id", "dim", "length", "rank", "missing_prob"});
                ModalityGenSpec ms;
                ms.id = require<std::string>(jmod, mpath, "id");
                ms.dim = get_or<std::size_t>(jmod, mpath, "dim", 4);
                ms.length = get_or<std::size_t>(jmod, mpath, "length", 8);
                ms.latent_rank = get_or<std::size_t>(jmod, mpath, "rank", 2);
                ms.missing_prob = get_or<double>(jmod, mpath, "missing_prob", 0.0);
                if (ms.latent_rank > ms.dim)
                    fail(mpath + ".rank", "latent rank exceeds dim");
                ts.modalities.push_back(std::move(ms));
            }
            tc.n_train = ts.n_train;
            tc.n_eval = ts.n_eval;
        } else if (tc.type == "idx") {
            expect_keys(jt, tpath, {"type", "images", "labels", "n_train", "n_eval"});
            tc.images_path = require<std::string>(jt, tpath, "images");
            tc.labels_path = require<std::string>(jt, tpath, "labels");
            tc.n_train = get_or<std::size_t>(jt, tpath, "n_train", 128);
            tc.n_eval = get_or<std::size_t>(jt, tpath, "n_eval", 64);
        } else {
            fail(tpath + ".type", "must be synthetic | idx");
        }
        cfg.tasks[id] = std::move(tc);
    }

    if (!root.contains("stream") || !root.at("stream").is_array() || root.at("stream").empty())
        fail(origin + ".stream", "nonempty stage array required");
    for (std::size_t s = 0; s < root.at("stream").size(); ++s) {
        const json& js = root.at("stream").at(s);
        const std::string spath = origin + ".stream[" + std::to_string(s) + "]";
        expect_keys(js, spath, {"tasks", "rank", "epochs"});
        StageSpec st;
        st.task_ids = require<std::vector<std::string>>(js, spath, "tasks");
        st.rank = get_or<std::size_t>(js, spath, "rank", s == 0 ? cfg.model.r0 : 0);
        st.epochs = get_or<std::size_t>(js, spath, "epochs", cfg.epochs);
        if (s > 0 && st.rank < 1) fail(spath + ".rank", "r_t must be >= 1");
        for (const auto& id : st.task_ids)
            if (!cfg.tasks.count(id)) fail(spath + ".tasks", "unknown task id '" + id + "'");
        cfg.stream.stages.push_back(std::move(st));
    }
    try {
        cfg.stream.validate();
    } catch (const config_error& e) {
        fail(origin + ".stream", e.what());
    }

    cfg.seed = get_or<std::uint64_t>(root, origin, "seed", 0);
    cfg.output_dir = get_or<std::string>(root, origin, "output_dir", ".");
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error(path + ": cannot open config file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str(), path);
}

std::map<std::string, TaskData> build_task_data(const RunConfig& cfg) {
    std::map<std::string, TaskData> out;
    for (const auto& [id, tc] : cfg.tasks) {
        SyntheticTask task;
        if (tc.type == "synthetic") {
            task = make_synthetic_task(tc.synthetic, cfg.seed);
        } else {
            task = make_idx_task(id, tc.images_path, tc.labels_path, tc.n_train, tc.n_eval);
        }
        out[id] = TaskData{task.spec, std::move(task.train), std::move(task.eval)};
    }
    return out;
}

} // namespace flame
