#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fn2en/checkpoint.hpp"
#include "fn2en/data.hpp"
#include "fn2en/losses.hpp"
#include "fn2en/network.hpp"

namespace fn2en {

struct TrainSchedule {
    int stage = 1;
    double base_lr = 1e-7;
    std::vector<std::size_t> lr_decay_steps;  // lr drops for epochs strictly after each step
    double lr_decay_factor = 0.1;
    std::size_t total_epochs = 300;
    std::size_t batch_size = 64;
    double momentum = 0.9;
    double dropout_rate = 0.5;
    std::uint64_t seed = 0;

    // Stage 1: lr 1e-7 decayed x0.1 after epoch 100, 300 epochs.
    static TrainSchedule stage1_defaults();
    // Stage 2: lr 1e-4 decayed x0.1 after epoch 20, 50 epochs.
    static TrainSchedule stage2_defaults();
};

double lr_at(const TrainSchedule& sched, std::size_t epoch);

struct MetricsRow {
    std::string run;
    int stage = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double accuracy = -1.0;  // < 0 renders as blank (stage 1)
    double seconds = 0.0;
};

// CSV schema: run,stage,epoch,lr,loss,accuracy,seconds. Deterministic formatting;
// accuracy is blank for stage-1 rows.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);
std::string metrics_csv_string(const std::vector<MetricsRow>& rows);

// Classical momentum: v <- momentum*v + grad; param <- param - lr*v. Missing
// velocity buffers are created zeroed. A non-finite gradient aborts training.
void sgd_step(const std::vector<Value<real>>& params,
              std::map<std::string, Tensor<real>>& velocity, double lr, double momentum);

struct Stage1Options {
    RegressionLossConfig loss;
    AugmentPolicy augment;
    std::string teacher_tap = "pool5";
    std::string run_id = "run";
};

// Teacher-supervised regression training of the student trunk. Labels are never
// read; the teacher is frozen and only student parameters move.
std::vector<MetricsRow> train_stage1(Network& student, const TeacherNet& teacher,
                                     const Dataset& data, const std::vector<std::size_t>& train_idx,
                                     const TrainSchedule& sched, const Stage1Options& opts);

struct Stage2Options {
    AugmentPolicy augment;
    std::string run_id = "run";
    // Epoch-boundary snapshot hook (state, completed epoch). Leave empty to skip.
    std::function<void(const TrainState&, std::size_t)> on_epoch;
};

struct Stage2Result {
    std::vector<MetricsRow> metrics;
    TrainState state;
};

// Joint supervised training of trunk plus head with cross-entropy, recording
// held-out accuracy per epoch. Passing a saved TrainState resumes bit-exactly
// from its epoch boundary.
Stage2Result train_stage2(Network& student, const Dataset& data,
                          const std::vector<std::size_t>& train_idx,
                          const std::vector<std::size_t>& eval_idx, const TrainSchedule& sched,
                          const Stage2Options& opts, const TrainState* resume = nullptr);

}  // namespace fn2en
