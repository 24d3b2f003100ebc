#include "flame/reports.hpp"

#include "flame/errors.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace flame {

std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string csv_field(const std::optional<double>& v) {
    return v ? format_g17(*v) : std::string();
}

std::string render_report_csv(const std::vector<ReportRow>& rows) {
    std::ostringstream out;
    out << "stage,method,task,auroc,auprc,accuracy,encoder_params,moe_params,router_params,"
           "head_params\n";
    for (const ReportRow& r : rows) {
        out << r.stage << ',' << r.method << ',' << r.task << ',' << csv_field(r.metrics.auroc)
            << ',' << csv_field(r.metrics.auprc) << ',' << format_g17(r.metrics.accuracy) << ','
            << r.params.encoder << ',' << r.params.moe << ',' << r.params.router << ','
            << r.params.head << '\n';
    }
    return out.str();
}

std::string render_fingerprint_csv(
    const std::vector<std::pair<std::string, std::map<std::string, FingerprintEntry>>>&
        per_task) {
    std::ostringstream out;
    out << "task,modality,expert,activation_ratio,mean_gate_weight\n";
    for (const auto& [task, fps] : per_task)
        for (const auto& [modality, entry] : fps)
            for (std::size_t e = 0; e < entry.activation_ratio.size(); ++e)
                out << task << ',' << modality << ',' << e << ','
                    << format_g17(entry.activation_ratio[e]) << ','
                    << csv_field(entry.mean_gate[e]) << '\n';
    return out.str();
}

std::string render_ledger_csv(const std::vector<StageLedger>& ledgers) {
    std::ostringstream out;
    out << "stage,tensor,status\n";
    for (const StageLedger& l : ledgers) {
        for (const auto& name : l.trainable) out << l.stage << ',' << name << ",trainable\n";
        for (const auto& name : l.frozen) out << l.stage << ',' << name << ",frozen\n";
    }
    return out.str();
}

std::string render_ledger_counts_csv(const std::vector<StageLedger>& ledgers) {
    std::ostringstream out;
    out << "stage,method,moe_slice_params,moe_bias_params,encoder_slice_params,"
           "encoder_bias_params,router_gate_params,router_noise_params,router_query_params,"
           "head_params,adapter_params,total\n";
    for (const StageLedger& l : ledgers) {
        out << l.stage << ',' << method_name(l.method) << ',' << l.moe_slice_params << ','
            << l.moe_bias_params << ',' << l.encoder_slice_params << ','
            << l.encoder_bias_params << ',' << l.router_gate_params << ','
            << l.router_noise_params << ',' << l.router_query_params << ',' << l.head_params
            << ',' << l.adapter_params << ',' << l.total() << '\n';
    }
    return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error(path + ": cannot open for writing");
    out << content;
}

} // namespace flame
