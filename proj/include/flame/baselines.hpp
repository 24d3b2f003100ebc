#pragma once

#include "flame/trainer.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace flame {

// One continual stage under each comparison method, on a model pretrained
// with the matching Method tag. All three share the Trainer's step rule and
// random streams, so like-for-like comparisons are seed-exact.

StageLedger baseline_simple_ft(FlameModel& model, int stage, const StageSpec& spec,
                               const std::map<std::string, TaskData>& tasks,
                               const TrainOptions& opt, std::uint64_t seed);

StageLedger baseline_ewc(FlameModel& model, int stage, const StageSpec& spec,
                         const std::map<std::string, TaskData>& tasks, TrainOptions opt,
                         double lambda, std::uint64_t seed);

StageLedger baseline_lora(FlameModel& model, int stage, StageSpec spec,
                          const std::map<std::string, TaskData>& tasks,
                          const TrainOptions& opt, std::size_t adapter_rank,
                          std::uint64_t seed);

// (lambda/2) * sum_i F_i (theta_i - theta*_i)^2
double ewc_penalty(const Matrix& fisher, const Matrix& theta, const Matrix& anchor,
                   double lambda);

} // namespace flame
