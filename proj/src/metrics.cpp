#include "flame/metrics.hpp"

#include "flame/errors.hpp"
#include "flame/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flame {

std::optional<double> auroc(const std::vector<double>& scores,
                            const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw precondition_error("auroc: score/label length mismatch");
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (int y : labels) pos += (y != 0);
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) return std::nullopt;

    // Mann-Whitney statistic via midranks.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * (double(i + 1) + double(j + 1));
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]] != 0) rank_sum_pos += midrank;
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * double(pos) * double(pos + 1);
    return u / (double(pos) * double(neg));
}

std::optional<double> auprc(const std::vector<double>& scores,
                            const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw precondition_error("auprc: score/label length mismatch");
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (int y : labels) pos += (y != 0);
    if (pos == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double ap = 0.0;
    double prev_recall = 0.0;
    std::size_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]] != 0)
                ++tp;
            else
                ++fp;
        }
        const double recall = double(tp) / double(pos);
        const double precision = double(tp) / double(tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    return ap;
}

Matrix logits_to_scores(const Matrix& logits, Objective objective) {
    Matrix s = logits;
    if (objective == Objective::multiclass) {
        double mx = s(0, 0);
        for (std::size_t j = 1; j < s.cols(); ++j) mx = std::max(mx, s(0, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < s.cols(); ++j) {
            s(0, j) = std::exp(s(0, j) - mx);
            sum += s(0, j);
        }
        for (std::size_t j = 0; j < s.cols(); ++j) s(0, j) /= sum;
    } else {
        for (double& v : s.raw()) v = sigmoid(v);
    }
    return s;
}

Metrics compute_metrics(const std::vector<Matrix>& scores, const Dataset& data,
                        Objective objective) {
    if (scores.size() != data.size())
        throw precondition_error("compute_metrics: score/sample count mismatch");
    if (data.empty()) throw precondition_error("compute_metrics: empty dataset");
    const std::size_t classes = scores.front().cols();
    Metrics m;

    if (objective == Objective::binary) {
        std::vector<double> s;
        std::vector<int> y;
        std::size_t correct = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            s.push_back(scores[i](0, 0));
            const int yi = data.samples[i].label[0] >= 0.5 ? 1 : 0;
            y.push_back(yi);
            correct += ((scores[i](0, 0) >= 0.5 ? 1 : 0) == yi);
        }
        m.auroc = auroc(s, y);
        m.auprc = auprc(s, y);
        m.accuracy = double(correct) / double(scores.size());
        return m;
    }

    // Macro averages over classes; classes with a single label value are
    // skipped for the rank metrics.
    double auroc_sum = 0.0, auprc_sum = 0.0;
    std::size_t auroc_n = 0, auprc_n = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<double> s;
        std::vector<int> y;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            s.push_back(scores[i](0, c));
            y.push_back(data.samples[i].label[c] >= 0.5 ? 1 : 0);
        }
        if (auto a = auroc(s, y)) {
            auroc_sum += *a;
            ++auroc_n;
        }
        if (auto p = auprc(s, y)) {
            auprc_sum += *p;
            ++auprc_n;
        }
    }
    if (auroc_n > 0) m.auroc = auroc_sum / double(auroc_n);
    if (auprc_n > 0) m.auprc = auprc_sum / double(auprc_n);

    if (objective == Objective::multiclass) {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (scores[i](0, c) > scores[i](0, best)) best = c;
            correct += (best == data.samples[i].label_index);
        }
        m.accuracy = double(correct) / double(scores.size());
    } else {
        double acc = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            std::size_t correct = 0;
            for (std::size_t i = 0; i < scores.size(); ++i) {
                const int pred = scores[i](0, c) >= 0.5 ? 1 : 0;
                const int yi = data.samples[i].label[c] >= 0.5 ? 1 : 0;
                correct += (pred == yi);
            }
            acc += double(correct) / double(scores.size());
        }
        m.accuracy = acc / double(classes);
    }
    return m;
}

} // namespace flame
