#include "flame/idx.hpp"

#include "flame/errors.hpp"

#include <fstream>
#include <string>

namespace flame {
namespace {

constexpr std::uint32_t kImageMagic = 0x00000803u;
constexpr std::uint32_t kLabelMagic = 0x00000801u;

std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw format_error(path + ": truncated IDX header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error(path + ": cannot open");
    return in;
}

} // namespace

IdxImages load_idx_images(const std::string& path) {
    std::ifstream in = open_input(path);
    const std::uint32_t magic = read_u32_be(in, path);
    if (magic != kImageMagic)
        throw format_error(path + ": bad IDX image magic " + std::to_string(magic));
    IdxImages img;
    img.count = read_u32_be(in, path);
    img.rows = read_u32_be(in, path);
    img.cols = read_u32_be(in, path);
    img.pixels.resize(img.count * img.rows * img.cols);
    if (!in.read(reinterpret_cast<char*>(img.pixels.data()),
                 static_cast<std::streamsize>(img.pixels.size())))
        throw format_error(path + ": truncated IDX image payload");
    return img;
}

std::vector<std::uint8_t> load_idx_labels(const std::string& path) {
    std::ifstream in = open_input(path);
    const std::uint32_t magic = read_u32_be(in, path);
    if (magic != kLabelMagic)
        throw format_error(path + ": bad IDX label magic " + std::to_string(magic));
    const std::uint32_t count = read_u32_be(in, path);
    std::vector<std::uint8_t> labels(count);
    if (!in.read(reinterpret_cast<char*>(labels.data()),
                 static_cast<std::streamsize>(labels.size())))
        throw format_error(path + ": truncated IDX label payload");
    return labels;
}

void write_idx_images(const std::string& path, const IdxImages& images) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error(path + ": cannot open for writing");
    write_u32_be(out, kImageMagic);
    write_u32_be(out, static_cast<std::uint32_t>(images.count));
    write_u32_be(out, static_cast<std::uint32_t>(images.rows));
    write_u32_be(out, static_cast<std::uint32_t>(images.cols));
    out.write(reinterpret_cast<const char*>(images.pixels.data()),
              static_cast<std::streamsize>(images.pixels.size()));
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error(path + ": cannot open for writing");
    write_u32_be(out, kLabelMagic);
    write_u32_be(out, static_cast<std::uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size()));
}

SyntheticTask make_idx_task(const std::string& task_id, const std::string& images_path,
                            const std::string& labels_path, std::size_t n_train,
                            std::size_t n_eval) {
    const IdxImages img = load_idx_images(images_path);
    const std::vector<std::uint8_t> labels = load_idx_labels(labels_path);
    if (labels.size() != img.count)
        throw format_error(images_path + ": image/label count mismatch");
    const std::size_t want = n_train + n_eval;
    if (want > img.count)
        throw format_error(images_path + ": only " + std::to_string(img.count) +
                           " samples, need " + std::to_string(want));

    SyntheticTask task;
    task.spec.task_id = task_id;
    task.spec.modality_subset = {"colsum", "rows"};
    task.spec.objective = Objective::multiclass;
    task.spec.class_count = 10;

    for (std::size_t s = 0; s < want; ++s) {
        Sample sample;
        ModalitySequence rows;
        rows.modality_id = "rows";
        rows.dim = img.cols;
        rows.values = Matrix(img.rows, img.cols);
        for (std::size_t r = 0; r < img.rows; ++r) {
            rows.timestamps.push_back(static_cast<double>(r));
            for (std::size_t c = 0; c < img.cols; ++c)
                rows.values(r, c) =
                    static_cast<double>(img.pixels[(s * img.rows + r) * img.cols + c]) / 255.0;
        }
        ModalitySequence colsum;
        colsum.modality_id = "colsum";
        colsum.dim = 1;
        colsum.values = Matrix(img.cols, 1);
        for (std::size_t c = 0; c < img.cols; ++c) {
            colsum.timestamps.push_back(static_cast<double>(c));
            double acc = 0.0;
            for (std::size_t r = 0; r < img.rows; ++r) acc += rows.values(r, c);
            colsum.values(c, 0) = acc;
        }
        sample.modalities["rows"] = std::move(rows);
        sample.modalities["colsum"] = std::move(colsum);
        sample.label.assign(10, 0.0);
        const std::size_t y = labels[s];
        if (y > 9) throw format_error(labels_path + ": label byte out of range");
        sample.label[y] = 1.0;
        sample.label_index = y;
        if (s < n_train)
            task.train.samples.push_back(std::move(sample));
        else
            task.eval.samples.push_back(std::move(sample));
    }
    return task;
}

} // namespace flame
