#pragma once

#include "flame/flexdata.hpp"
#include "flame/matrix.hpp"

#include <optional>
#include <vector>

namespace flame {

struct Metrics {
    std::optional<double> auroc;  // absent when a class has a single label value
    std::optional<double> auprc;
    double accuracy = 0.0;
};

// Rank-statistic AUROC; tied scores earn 0.5 credit per positive-negative
// pair. Absent when labels are single-class.
std::optional<double> auroc(const std::vector<double>& scores,
                            const std::vector<int>& labels);

// Average precision by precision-recall step integration over descending
// score thresholds (tied scores grouped). Absent without positives.
std::optional<double> auprc(const std::vector<double>& scores,
                            const std::vector<int>& labels);

// Macro-averaged metrics of per-sample class scores against the dataset's
// labels; scores[i] is the 1 x classes score row for sample i (probabilities
// or any monotone transform of them).
Metrics compute_metrics(const std::vector<Matrix>& scores, const Dataset& data,
                        Objective objective);

// Turns raw logits into scores: sigmoid for binary/multilabel, softmax rows
// for multiclass.
Matrix logits_to_scores(const Matrix& logits, Objective objective);

} // namespace flame
