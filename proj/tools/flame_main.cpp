#include "flame/baselines.hpp"
#include "flame/checkpoint.hpp"
#include "flame/config.hpp"
#include "flame/errors.hpp"
#include "flame/forward.hpp"
#include "flame/reports.hpp"
#include "flame/spectra.hpp"
#include "flame/trainer.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace {

using namespace flame;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitInvariant = 4;

std::string resolve_out_dir(const RunConfig& cfg) {
    if (const char* env = std::getenv("FLAME_OUT_DIR"); env && *env) return env;
    return cfg.output_dir;
}

std::filesystem::path prepare_out_dir(const RunConfig& cfg) {
    const std::filesystem::path dir = resolve_out_dir(cfg);
    std::filesystem::create_directories(dir);
    return dir;
}

ReportRow make_row(const FlameModel& model, const std::map<std::string, TaskData>& tasks,
                   const std::string& task_id, int stage) {
    ReportRow row;
    row.stage = stage;
    row.method = method_name(model.method());
    row.task = task_id;
    row.metrics = evaluate(model, task_id, tasks.at(task_id).eval, model.cursor_of(task_id));
    row.params = count_params(model).stored_at(stage, model.method());
    return row;
}

int cmd_pretrain(const std::string& config_path) {
    const RunConfig cfg = load_run_config(config_path);
    const std::map<std::string, TaskData> tasks = build_task_data(cfg);
    const std::filesystem::path out = prepare_out_dir(cfg);

    FlameModel model(cfg.model, Method::flame);
    Trainer trainer(model, tasks, cfg.train_options(), cfg.seed);
    const StageLedger ledger = trainer.pretrain(cfg.stream.stages.front());

    std::vector<ReportRow> rows;
    std::vector<std::string> ids = cfg.stream.stages.front().task_ids;
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) rows.push_back(make_row(model, tasks, id, 0));
    write_text_file((out / "metrics.csv").string(), render_report_csv(rows));
    write_text_file((out / "ledger.csv").string(), render_ledger_csv({ledger}));
    write_text_file((out / "ledger_counts.csv").string(), render_ledger_counts_csv({ledger}));
    save_checkpoint(model, (out / "checkpoint_stage0.bin").string());
    std::cout << "pretrain: wrote " << (out / "metrics.csv").string() << "\n";
    return kExitOk;
}

int cmd_continual(const std::string& config_path, const std::string& method_name_str) {
    const RunConfig cfg = load_run_config(config_path);
    if (cfg.stream.stages.size() < 2)
        throw config_error("continual: stream must have at least 2 stages");
    const Method method = method_from_name(method_name_str);
    const std::map<std::string, TaskData> tasks = build_task_data(cfg);
    const std::filesystem::path out = prepare_out_dir(cfg);

    FlameModel model(cfg.model, method);
    Trainer trainer(model, tasks, cfg.train_options(), cfg.seed);

    std::vector<ReportRow> rows;
    std::vector<StageLedger> ledgers;
    // first-seen prediction vectors, for the exact no-forgetting assertion
    std::map<std::string, std::vector<Matrix>> reference_preds;

    for (std::size_t stage = 0; stage < cfg.stream.stages.size(); ++stage) {
        const StageSpec& spec = cfg.stream.stages[stage];
        ledgers.push_back(stage == 0 ? trainer.pretrain(spec)
                                     : trainer.run_stage(static_cast<int>(stage), spec));

        for (const auto& [task_id, cursor] : model.task_cursor()) {
            rows.push_back(make_row(model, tasks, task_id, static_cast<int>(stage)));
            if (method != Method::flame) continue;
            const std::vector<Matrix> preds =
                eval_logits(model, task_id, tasks.at(task_id).eval, cursor);
            auto [it, fresh] = reference_preds.try_emplace(task_id, preds);
            if (fresh) continue;
            for (std::size_t i = 0; i < preds.size(); ++i) {
                if (bit_equal(preds[i], it->second[i])) continue;
                std::cerr << "no-forgetting violation: task " << task_id << " sample " << i
                          << " changed at stage " << stage << "\n";
                return kExitInvariant;
            }
        }
        save_checkpoint(model,
                        (out / ("checkpoint_stage" + std::to_string(stage) + ".bin")).string());
    }
    write_text_file((out / "report.csv").string(), render_report_csv(rows));
    write_text_file((out / "ledger.csv").string(), render_ledger_csv(ledgers));
    write_text_file((out / "ledger_counts.csv").string(), render_ledger_counts_csv(ledgers));
    std::cout << "continual(" << method_name_str << "): wrote "
              << (out / "report.csv").string() << "\n";
    return kExitOk;
}

int cmd_spectra(const std::string& checkpoint_path, const std::string& config_path, int cursor,
                double epsilon) {
    const RunConfig cfg = load_run_config(config_path);
    const std::map<std::string, TaskData> tasks = build_task_data(cfg);
    const std::filesystem::path out = prepare_out_dir(cfg);
    const FlameModel model = load_checkpoint(checkpoint_path);
    const auto reports = spectral_reports(model, tasks, cursor, epsilon);
    write_text_file((out / "spectra.csv").string(), render_spectra_csv(reports));
    write_text_file((out / "spectra_summary.csv").string(),
                    render_spectra_summary_csv(reports));
    std::cout << "spectra: wrote " << (out / "spectra.csv").string() << "\n";
    return kExitOk;
}

int cmd_fingerprint(const std::string& checkpoint_path, const std::string& config_path) {
    const RunConfig cfg = load_run_config(config_path);
    const std::map<std::string, TaskData> tasks = build_task_data(cfg);
    const std::filesystem::path out = prepare_out_dir(cfg);
    const FlameModel model = load_checkpoint(checkpoint_path);

    std::vector<std::pair<std::string, std::map<std::string, FingerprintEntry>>> per_task;
    for (const auto& [task_id, cursor] : model.task_cursor()) {
        if (!tasks.count(task_id)) continue;
        per_task.emplace_back(
            task_id, routing_fingerprint(model, task_id, tasks.at(task_id).eval, cursor));
    }
    write_text_file((out / "fingerprint.csv").string(), render_fingerprint_csv(per_task));
    std::cout << "fingerprint: wrote " << (out / "fingerprint.csv").string() << "\n";
    return kExitOk;
}

int cmd_params(const std::string& config_path, const std::string& method_filter) {
    const RunConfig cfg = load_run_config(config_path);
    const std::map<std::string, TaskData> tasks = build_task_data(cfg);
    const std::filesystem::path out = prepare_out_dir(cfg);

    std::vector<Method> methods;
    if (method_filter == "all")
        methods = {Method::flame, Method::simple_ft, Method::ewc, Method::lora};
    else
        methods = {method_from_name(method_filter)};

    std::string csv =
        "stage,method,encoder_params,moe_params,router_params,head_params,total\n";
    std::vector<StageLedger> ledgers;
    for (const Method method : methods) {
        // dry run: the exact shape construction with a zero-epoch budget
        FlameModel model(cfg.model, method);
        Trainer trainer(model, tasks, cfg.train_options(), cfg.seed);
        for (std::size_t stage = 0; stage < cfg.stream.stages.size(); ++stage) {
            StageSpec spec = cfg.stream.stages[stage];
            spec.epochs = 0;
            ledgers.push_back(stage == 0 ? trainer.pretrain(spec)
                                         : trainer.run_stage(static_cast<int>(stage), spec));
            const GroupCounts g =
                count_params(model).stored_at(static_cast<int>(stage), method);
            csv += std::to_string(stage) + "," + method_name(method) + "," +
                   std::to_string(g.encoder) + "," + std::to_string(g.moe) + "," +
                   std::to_string(g.router) + "," + std::to_string(g.head) + "," +
                   std::to_string(g.total()) + "\n";
        }
    }
    write_text_file((out / "params.csv").string(), csv);
    write_text_file((out / "params_growth.csv").string(), render_ledger_counts_csv(ledgers));
    std::cout << "params: wrote " << (out / "params.csv").string() << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"flexi-modal MoE with spectral compress-and-stack continual learning"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path;
    std::string method = "flame";
    int cursor = 0;
    double epsilon = 0.01;

    CLI::App* pretrain = app.add_subcommand("pretrain", "multitask pretraining (stage 0)");
    pretrain->add_option("config", config_path, "run configuration JSON")->required();

    CLI::App* continual =
        app.add_subcommand("continual", "full continual stream under one method");
    continual->add_option("config", config_path, "run configuration JSON")->required();
    continual->add_option("--method", method, "flame | simple_ft | ewc | lora");

    CLI::App* spectra = app.add_subcommand("spectra", "spectral report for a checkpoint");
    spectra->add_option("checkpoint", checkpoint_path, "model checkpoint")->required();
    spectra->add_option("config", config_path, "run configuration JSON")->required();
    spectra->add_option("--cursor", cursor, "weight cursor (default 0)");
    spectra->add_option("--epsilon", epsilon, "effective-rank tail budget");

    CLI::App* fingerprint =
        app.add_subcommand("fingerprint", "routing fingerprints for a checkpoint");
    fingerprint->add_option("checkpoint", checkpoint_path, "model checkpoint")->required();
    fingerprint->add_option("config", config_path, "run configuration JSON")->required();

    CLI::App* params = app.add_subcommand("params", "per-stage parameter accounting");
    params->add_option("config", config_path, "run configuration JSON")->required();
    params->add_option("--method", method, "flame | simple_ft | ewc | lora | all")
        ->default_val("all");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain->parsed()) return cmd_pretrain(config_path);
        if (continual->parsed()) return cmd_continual(config_path, method);
        if (spectra->parsed())
            return cmd_spectra(checkpoint_path, config_path, cursor, epsilon);
        if (fingerprint->parsed()) return cmd_fingerprint(checkpoint_path, config_path);
        if (params->parsed()) return cmd_params(config_path, method);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const format_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
