#pragma once

#include "flame/matrix.hpp"
#include "flame/rng.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace flame {

// One variable-length, irregularly sampled modality observation.
struct ModalitySequence {
    std::string modality_id;
    std::size_t dim = 0;                // d_m
    Matrix values;                      // L x d_m
    std::vector<double> timestamps;     // nondecreasing, length L
    bool present = true;

    std::size_t length() const { return values.rows(); }
};

enum class Objective { binary, multiclass, multilabel };

struct TaskSpec {
    std::string task_id;
    std::vector<std::string> modality_subset;  // sorted, nonempty
    Objective objective = Objective::binary;
    std::size_t class_count = 1;               // 1 for binary

    bool uses_modality(const std::string& m) const;
};

struct Sample {
    std::map<std::string, ModalitySequence> modalities;
    // binary: length 1; multilabel: length class_count; multiclass: one-hot.
    std::vector<double> label;
    std::size_t label_index = 0;  // multiclass target
    // Generator latents (1 x total latent rank); synthetic data only, kept for
    // probe-style oracles and never seen by the model.
    Matrix latent;
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

struct ModalityGenSpec {
    std::string id;
    std::size_t dim = 4;          // d_m
    std::size_t length = 8;       // L_m
    std::size_t latent_rank = 2;  // r*_m, must be <= dim
    double missing_prob = 0.0;
};

struct SyntheticTaskSpec {
    std::string task_id;
    std::vector<ModalityGenSpec> modalities;
    Objective objective = Objective::binary;
    std::size_t class_count = 1;
    std::size_t n_train = 128;
    std::size_t n_eval = 64;
    double noise = 0.01;          // sigma_noise on top of the factor model
    // Tasks sharing a latent_group share factor loadings, so their labels are
    // functions of the same latent structure.
    std::uint64_t latent_group = 0;
    // Minimum normalized decision margin; ambiguous samples are redrawn.
    double label_margin = 0.1;
};

struct SyntheticTask {
    TaskSpec spec;
    Dataset train;
    Dataset eval;
};

// Modality values are rank-r* factor trajectories plus isotropic noise;
// labels are a fixed random linear-threshold function of the per-sample
// latent summary. Fully determined by (spec, seed).
SyntheticTask make_synthetic_task(const SyntheticTaskSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// Deterministic shuffled batches for one epoch; the final short batch is
// retained. Empty dataset yields an empty stream.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   std::uint64_t seed, std::uint64_t epoch);

// ---------------------------------------------------------------------------
// Continual stream configuration
// ---------------------------------------------------------------------------

struct StageSpec {
    std::vector<std::string> task_ids;  // tasks introduced at this stage
    std::size_t rank = 0;               // reserved rank r_t (0 = lossless, stage 0 only)
    std::size_t epochs = 100;
};

struct StreamConfig {
    std::vector<StageSpec> stages;
    void validate() const;  // unique task ids, r_t >= 1 beyond stage 0
};

} // namespace flame
