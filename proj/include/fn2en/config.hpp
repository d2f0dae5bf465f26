#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fn2en/data.hpp"
#include "fn2en/losses.hpp"
#include "fn2en/network.hpp"
#include "fn2en/trainer.hpp"

namespace fn2en {

// One experiment = one flat `key = value` file (UTF-8, `#` comments, dotted keys
// for the nested schedules). Unknown keys are config errors so typos surface
// immediately.
struct ExperimentConfig {
    std::string run_id = "run";
    std::uint64_t seed = 0;
    std::string out_dir = "out";

    std::string dataset_manifest;
    std::string teacher_checkpoint;
    std::string teacher_tap = "pool5";

    ExpNetSpec net;
    bool adapter_auto = true;  // match the teacher tap channels at command time

    RegressionLossConfig loss;
    TrainSchedule stage1 = TrainSchedule::stage1_defaults();
    TrainSchedule stage2 = TrainSchedule::stage2_defaults();

    std::size_t folds_k = 10;
    std::size_t eval_fold = 0;  // held-out fold index

    AugmentPolicy augment;

    std::vector<std::string> analyze_layers;
    std::size_t analyze_k = 100;
    std::size_t analyze_bins = 20;
    std::size_t visualize_k = 100;

    std::size_t snapshot_every = 0;  // stage-2 snapshot period in epochs; 0 = off
    bool wall_time = false;  // record real wall time in metrics (breaks byte-identical reruns)
};

ExperimentConfig parse_config_file(const std::string& path);
ExperimentConfig parse_config_string(const std::string& text, const std::string& origin = "<string>");

}  // namespace fn2en
