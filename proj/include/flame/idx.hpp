#pragma once

#include "flame/flexdata.hpp"
#include "flame/matrix.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flame {

// IDX (big-endian) image/label files, the MNIST container format.
// Magic 0x00000803 = unsigned-byte images with 3 dims, 0x00000801 = labels.

struct IdxImages {
    std::size_t count = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> pixels;  // count*rows*cols bytes
};

IdxImages load_idx_images(const std::string& path);
std::vector<std::uint8_t> load_idx_labels(const std::string& path);

void write_idx_images(const std::string& path, const IdxImages& images);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

// Builds a two-modality flexi-modal task from an IDX image/label pair:
// modality "rows" is the image as a rows-step sequence of cols-dim vectors
// scaled to [0,1]; modality "colsum" is the derived column-sum sequence.
// Labels become a 10-way multiclass objective.
SyntheticTask make_idx_task(const std::string& task_id, const std::string& images_path,
                            const std::string& labels_path, std::size_t n_train,
                            std::size_t n_eval);

} // namespace flame
