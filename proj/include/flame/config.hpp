#pragma once

#include "flame/flexdata.hpp"
#include "flame/model.hpp"
#include "flame/trainer.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace flame {

struct TaskConfig {
    std::string type;  // "synthetic" | "idx"
    SyntheticTaskSpec synthetic;
    std::string images_path;  // idx only
    std::string labels_path;
    std::size_t n_train = 128;
    std::size_t n_eval = 64;
};

struct RunConfig {
    ModelConfig model;
    double w_bal = 0.01;
    double w_div = 0.1;
    std::map<std::string, int> beta;
    double lr = 0.05;
    double momentum = 0.9;
    std::size_t epochs = 100;  // default stage budget when a stage omits one
    std::size_t batch_size = 16;
    double init_scale = 1.0;
    double ewc_lambda = 1.0;
    StreamConfig stream;
    std::map<std::string, TaskConfig> tasks;
    std::uint64_t seed = 0;
    std::string output_dir = ".";

    TrainOptions train_options() const;
};

// Parses and validates the JSON run configuration; errors carry the key path.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& json_text, const std::string& origin);

// Generates synthetic tasks / loads IDX pairs for every configured task.
std::map<std::string, TaskData> build_task_data(const RunConfig& cfg);

} // namespace flame
