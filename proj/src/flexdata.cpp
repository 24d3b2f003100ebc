#include "flame/flexdata.hpp"

#include "flame/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

namespace flame {

bool TaskSpec::uses_modality(const std::string& m) const {
    return std::find(modality_subset.begin(), modality_subset.end(), m) !=
           modality_subset.end();
}

namespace {

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, SplitRng& rng, double scl) {
    Matrix m(rows, cols);
    for (double& v : m.raw()) v = scl * rng.normal();
    return m;
}

std::vector<double> sorted_uniform(std::size_t n, SplitRng& rng) {
    std::vector<double> t(n);
    for (double& v : t) v = rng.uniform();
    std::sort(t.begin(), t.end());
    return t;
}

struct LabelRule {
    Matrix weights;  // class_count x total_rank
    std::vector<double> offsets;
};

// Normalized per-class scores of a latent summary under the rule.
std::vector<double> rule_scores(const LabelRule& rule, const Matrix& latent) {
    const double lnorm = std::max(frobenius_norm(latent), 1e-12);
    std::vector<double> s(rule.weights.rows());
    for (std::size_t c = 0; c < rule.weights.rows(); ++c) {
        double acc = rule.offsets[c];
        for (std::size_t j = 0; j < rule.weights.cols(); ++j)
            acc += rule.weights(c, j) * latent(0, j);
        double wnorm = 0.0;
        for (std::size_t j = 0; j < rule.weights.cols(); ++j)
            wnorm += rule.weights(c, j) * rule.weights(c, j);
        s[c] = acc / (std::sqrt(std::max(wnorm, 1e-12)) * lnorm);
    }
    return s;
}

} // namespace

SyntheticTask make_synthetic_task(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    if (spec.modalities.empty())
        throw precondition_error("make_synthetic_task: modality subset must be nonempty");
    for (const auto& m : spec.modalities) {
        if (m.latent_rank > m.dim)
            throw precondition_error("make_synthetic_task: latent rank " +
                                     std::to_string(m.latent_rank) + " exceeds dim " +
                                     std::to_string(m.dim) + " for modality " + m.id);
        if (m.latent_rank == 0 || m.length == 0)
            throw precondition_error("make_synthetic_task: rank and length must be >= 1");
    }
    if (spec.class_count == 0)
        throw precondition_error("make_synthetic_task: class_count must be >= 1");

    SplitRng root(seed);
    // Loadings are keyed by (latent_group, modality) only, so tasks in the
    // same group see the same latent-to-token map.
    std::map<std::string, Matrix> loadings;
    std::size_t total_rank = 0;
    for (const auto& m : spec.modalities) {
        SplitRng lr = root.split("loadings").split(spec.latent_group).split(m.id);
        loadings[m.id] = gaussian_matrix(m.dim, m.latent_rank, lr, 1.0);
        total_rank += m.latent_rank;
    }

    SplitRng task_rng = root.split("task").split(spec.task_id);
    LabelRule rule;
    {
        SplitRng wr = task_rng.split("labelrule");
        rule.weights = gaussian_matrix(spec.class_count, total_rank, wr, 1.0);
        rule.offsets.assign(spec.class_count, 0.0);
    }

    TaskSpec ts;
    ts.task_id = spec.task_id;
    for (const auto& m : spec.modalities) ts.modality_subset.push_back(m.id);
    std::sort(ts.modality_subset.begin(), ts.modality_subset.end());
    ts.objective = spec.objective;
    ts.class_count = spec.objective == Objective::binary ? 1 : spec.class_count;

    const std::size_t n_total = spec.n_train + spec.n_eval;
    SyntheticTask out;
    out.spec = ts;

    SplitRng sample_rng = task_rng.split("samples");
    for (std::size_t s = 0; s < n_total; ++s) {
        SplitRng sr = sample_rng.split(s);
        Sample sample;
        Matrix latent(1, total_rank);
        for (int attempt = 0; attempt < 100; ++attempt) {
            sample.modalities.clear();
            std::size_t offset = 0;
            for (const auto& mspec : spec.modalities) {
                SplitRng mr = sr.split(mspec.id).split(static_cast<std::uint64_t>(attempt));
                const bool present = mspec.missing_prob <= 0.0 ||
                                     mr.uniform() >= mspec.missing_prob;
                Matrix u(mspec.length, mspec.latent_rank);
                for (double& v : u.raw()) v = mr.normal();
                // Latent summary feeds the label even when the observation is
                // missing; the model just does not get to see it.
                for (std::size_t j = 0; j < mspec.latent_rank; ++j) {
                    double mean = 0.0;
                    for (std::size_t t = 0; t < mspec.length; ++t) mean += u(t, j);
                    latent(0, offset + j) = mean / static_cast<double>(mspec.length);
                }
                offset += mspec.latent_rank;

                ModalitySequence seq;
                seq.modality_id = mspec.id;
                seq.dim = mspec.dim;
                seq.present = present;
                if (present) {
                    seq.values = matmul(u, transpose(loadings.at(mspec.id)));
                    if (spec.noise > 0.0)
                        for (double& v : seq.values.raw()) v += spec.noise * mr.normal();
                    seq.timestamps = sorted_uniform(mspec.length, mr);
                }
                sample.modalities[mspec.id] = std::move(seq);
            }

            const std::vector<double> scores = rule_scores(rule, latent);
            bool confident = false;
            if (spec.objective == Objective::multiclass) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < scores.size(); ++c)
                    if (scores[c] > scores[best]) best = c;
                double second = -1e300;
                for (std::size_t c = 0; c < scores.size(); ++c)
                    if (c != best) second = std::max(second, scores[c]);
                confident = scores.size() == 1 || scores[best] - second >= spec.label_margin;
                if (confident || attempt == 99) {
                    sample.label.assign(ts.class_count, 0.0);
                    sample.label[best] = 1.0;
                    sample.label_index = best;
                }
            } else {
                confident = true;
                for (double sc : scores)
                    if (std::fabs(sc) < spec.label_margin) confident = false;
                if (confident || attempt == 99) {
                    sample.label.clear();
                    for (double sc : scores) sample.label.push_back(sc >= 0.0 ? 1.0 : 0.0);
                    sample.label_index = sample.label[0] >= 0.5 ? 1 : 0;
                }
            }
            if (confident || attempt == 99) break;
        }
        sample.latent = std::move(latent);
        if (s < spec.n_train)
            out.train.samples.push_back(std::move(sample));
        else
            out.eval.samples.push_back(std::move(sample));
    }
    return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   std::uint64_t seed, std::uint64_t epoch) {
    if (batch_size < 1) throw precondition_error("make_batches: batch_size must be >= 1");
    std::vector<std::vector<std::size_t>> batches;
    if (n == 0) return batches;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    SplitRng rng = SplitRng(seed).split("batches").split(epoch);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(perm[i - 1], perm[j]);
    }
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        batches.emplace_back(perm.begin() + static_cast<long>(start),
                             perm.begin() + static_cast<long>(end));
    }
    return batches;
}

void StreamConfig::validate() const {
    std::set<std::string> seen;
    for (std::size_t s = 0; s < stages.size(); ++s) {
        const StageSpec& st = stages[s];
        if (st.task_ids.empty())
            throw config_error("stream.stages[" + std::to_string(s) + "].tasks: empty");
        for (const auto& id : st.task_ids)
            if (!seen.insert(id).second)
                throw config_error("stream: task id '" + id + "' appears in two stages");
        if (s > 0 && st.rank < 1)
            throw config_error("stream.stages[" + std::to_string(s) + "].rank: must be >= 1");
    }
}

} // namespace flame
