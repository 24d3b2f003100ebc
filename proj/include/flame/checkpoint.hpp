#pragma once

#include "flame/model.hpp"

#include <string>

namespace flame {

// Single-archive binary checkpoint: versioned header, base matrices, factored
// slices, bias ledgers, router heads keyed by (modality, stage), task heads,
// the task->cursor map and adapters. Round-trips are bit-exact; live
// components must be frozen before saving.
void save_checkpoint(const FlameModel& model, const std::string& path);

FlameModel load_checkpoint(const std::string& path);

} // namespace flame
