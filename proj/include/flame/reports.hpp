#pragma once

#include "flame/forward.hpp"
#include "flame/metrics.hpp"
#include "flame/trainer.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flame {

// Full 17-significant-digit decimal form so byte-level CSV comparisons see
// bit-level numeric differences.
std::string format_g17(double v);
std::string csv_field(const std::optional<double>& v);

struct ReportRow {
    int stage = 0;
    std::string method;
    std::string task;
    Metrics metrics;
    GroupCounts params;  // cumulative stored scalars at this stage
};

std::string render_report_csv(const std::vector<ReportRow>& rows);

std::string render_fingerprint_csv(
    const std::vector<std::pair<std::string, std::map<std::string, FingerprintEntry>>>&
        per_task);

std::string render_ledger_csv(const std::vector<StageLedger>& ledgers);
std::string render_ledger_counts_csv(const std::vector<StageLedger>& ledgers);

void write_text_file(const std::string& path, const std::string& content);

} // namespace flame
