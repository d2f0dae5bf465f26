#include "fn2en/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "fn2en/analysis.hpp"
#include "fn2en/errors.hpp"

namespace fn2en {

TrainSchedule TrainSchedule::stage1_defaults() {
    TrainSchedule s;
    s.stage = 1;
    s.base_lr = 1e-7;
    s.lr_decay_steps = {100};
    s.lr_decay_factor = 0.1;
    s.total_epochs = 300;
    return s;
}

TrainSchedule TrainSchedule::stage2_defaults() {
    TrainSchedule s;
    s.stage = 2;
    s.base_lr = 1e-4;
    s.lr_decay_steps = {20};
    s.lr_decay_factor = 0.1;
    s.total_epochs = 50;
    return s;
}

double lr_at(const TrainSchedule& sched, std::size_t epoch) {
    if (epoch >= sched.total_epochs) {
        throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside schedule of " +
                            std::to_string(sched.total_epochs) + " epochs");
    }
    if (sched.base_lr <= 0.0) throw ConfigError("schedule: base lr must be positive");
    double lr = sched.base_lr;
    for (std::size_t step : sched.lr_decay_steps) {
        if (epoch > step) lr *= sched.lr_decay_factor;
    }
    return lr;
}

namespace {

std::string format_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

std::string metrics_csv_string(const std::vector<MetricsRow>& rows) {
    std::string out = "run,stage,epoch,lr,loss,accuracy,seconds\n";
    for (const auto& r : rows) {
        out += r.run + "," + std::to_string(r.stage) + "," + std::to_string(r.epoch) + "," +
               format_double(r.lr) + "," + format_double(r.loss) + ",";
        if (r.accuracy >= 0.0) out += format_double(r.accuracy);
        out += "," + format_double(r.seconds) + "\n";
    }
    return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("metrics: cannot open '" + path + "' for writing");
    os << metrics_csv_string(rows);
}

void sgd_step(const std::vector<Value<real>>& params,
              std::map<std::string, Tensor<real>>& velocity, double lr, double momentum) {
    for (const auto& p : params) {
        if (!p->trainable) continue;
        p->ensure_grad();
        auto [it, inserted] = velocity.try_emplace(p->name, Tensor<real>(p->value.dims));
        Tensor<real>& v = it->second;
        require_same_shape(v, p->value, "sgd_step velocity");
        const real m = static_cast<real>(momentum);
        const real step = static_cast<real>(lr);
        for (std::size_t i = 0; i < v.v.size(); ++i) {
            const real g = p->grad.v[i];
            if (!std::isfinite(g)) {
                throw NumericError("sgd_step: non-finite gradient in '" + p->name + "' at index " +
                                   std::to_string(i));
            }
            v.v[i] = m * v.v[i] + g;
            p->value.v[i] -= step * v.v[i];
        }
    }
}

namespace {

std::vector<Value<real>> trainable_params(Network& net) {
    std::vector<Value<real>> out;
    for (auto& [name, p] : net.params()) {
        if (p->trainable) out.push_back(p);
    }
    return out;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
    }
    return idx;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t at = 0; at < order.size(); at += batch_size) {
        const std::size_t end = std::min(order.size(), at + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;  // last partial batch kept
}

double checked_loss(const Value<real>& loss, int stage, std::size_t epoch) {
    const double v = static_cast<double>(loss->value.v[0]);
    if (!std::isfinite(v)) {
        throw NumericError("stage " + std::to_string(stage) + " epoch " + std::to_string(epoch) +
                           ": loss diverged (non-finite)");
    }
    return v;
}

}  // namespace

std::vector<MetricsRow> train_stage1(Network& student, const TeacherNet& teacher,
                                     const Dataset& data, const std::vector<std::size_t>& train_idx,
                                     const TrainSchedule& sched, const Stage1Options& opts) {
    if (has_head(student)) {
        throw ContractError("train_stage1: student must not have an FC head yet");
    }
    if (train_idx.empty()) throw DataError("train_stage1: empty training set");
    opts.augment.validate();

    // Shape compatibility is settled before any step runs.
    const std::size_t c = data.image(train_idx[0]).dims[0];
    const std::vector<std::size_t> in_chw = {c, opts.augment.crop_size, opts.augment.crop_size};
    auto student_shape = student.infer_shape(in_chw);
    auto tap_shape = teacher.tap_shape(in_chw, opts.teacher_tap);
    if (opts.loss.mode == FeatureMode::ChannelAverage
            ? student_shape.at(0) != tap_shape.at(0)
            : student_shape != tap_shape) {
        throw ConfigError("train_stage1: student output " + shape_to_string(student_shape) +
                          " does not match teacher tap " + shape_to_string(tap_shape) +
                          " (configure the adapter/upsampler)");
    }

    auto params = trainable_params(student);
    std::map<std::string, Tensor<real>> velocity;
    std::vector<MetricsRow> metrics;

    for (std::size_t epoch = 0; epoch < sched.total_epochs; ++epoch) {
        const double lr = lr_at(sched, epoch);
        Rng shuffle_rng = derive_rng(sched.seed, RngUse::Shuffle, 1, epoch);
        Rng aug_rng = derive_rng(sched.seed, RngUse::Augment, 1, epoch);
        const auto order = shuffled(train_idx, shuffle_rng);
        double loss_sum = 0.0;
        std::size_t sample_count = 0;
        for (const auto& batch : make_batches(order, sched.batch_size)) {
            Tensor<real> images = batch_images(data, batch, opts.augment, aug_rng, true);
            Tensor<real> target = teacher.features_batch(images, opts.teacher_tap);
            auto fwd = student.forward(images, Mode::Train, nullptr, 0.0);
            Value<real> loss = regression_loss(fwd.output, target, opts.loss);
            const double loss_v = checked_loss(loss, 1, epoch);
            student.zero_grads();
            backward(loss);
            sgd_step(params, velocity, lr, sched.momentum);
            loss_sum += loss_v * static_cast<double>(batch.size());
            sample_count += batch.size();
        }
        MetricsRow row;
        row.run = opts.run_id;
        row.stage = 1;
        row.epoch = epoch;
        row.lr = lr;
        row.loss = loss_sum / static_cast<double>(sample_count);
        metrics.push_back(row);
    }
    return metrics;
}

Stage2Result train_stage2(Network& student, const Dataset& data,
                          const std::vector<std::size_t>& train_idx,
                          const std::vector<std::size_t>& eval_idx, const TrainSchedule& sched,
                          const Stage2Options& opts, const TrainState* resume) {
    if (!has_head(student)) throw ContractError("train_stage2: attach_head first");
    if (train_idx.empty()) throw DataError("train_stage2: empty training set");
    opts.augment.validate();

    Stage2Result result;
    result.state.stage = 2;
    result.state.seed = sched.seed;
    std::size_t start_epoch = 0;
    if (resume) {
        if (resume->stage != 2) throw ContractError("train_stage2: resume state is not stage 2");
        result.state = *resume;
        start_epoch = resume->epoch;
    }

    auto params = trainable_params(student);
    for (std::size_t epoch = start_epoch; epoch < sched.total_epochs; ++epoch) {
        const double lr = lr_at(sched, epoch);
        Rng shuffle_rng = derive_rng(sched.seed, RngUse::Shuffle, 2, epoch);
        Rng aug_rng = derive_rng(sched.seed, RngUse::Augment, 2, epoch);
        Rng drop_rng = derive_rng(sched.seed, RngUse::Dropout, 2, epoch);
        const auto order = shuffled(train_idx, shuffle_rng);
        double loss_sum = 0.0;
        std::size_t sample_count = 0;
        for (const auto& batch : make_batches(order, sched.batch_size)) {
            Tensor<real> images = batch_images(data, batch, opts.augment, aug_rng, true);
            const std::vector<int> labels = batch_labels(data, batch);
            auto fwd = student.forward(images, Mode::Train, &drop_rng, sched.dropout_rate);
            Value<real> loss = cross_entropy(fwd.output, labels, Reduction::Mean);
            const double loss_v = checked_loss(loss, 2, epoch);
            student.zero_grads();
            backward(loss);
            sgd_step(params, result.state.velocity, lr, sched.momentum);
            loss_sum += loss_v * static_cast<double>(batch.size());
            sample_count += batch.size();
            ++result.state.step;
        }
        MetricsRow row;
        row.run = opts.run_id;
        row.stage = 2;
        row.epoch = epoch;
        row.lr = lr;
        row.loss = loss_sum / static_cast<double>(sample_count);
        if (!eval_idx.empty()) {
            row.accuracy = evaluate(student, data, eval_idx, opts.augment).accuracy;
        }
        result.metrics.push_back(row);
        result.state.epoch = epoch + 1;
        if (opts.on_epoch) opts.on_epoch(result.state, epoch);
    }
    return result;
}

}  // namespace fn2en
