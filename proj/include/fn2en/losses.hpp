#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fn2en/autodiff.hpp"
#include "fn2en/errors.hpp"
#include "fn2en/tensor.hpp"

namespace fn2en {

enum class Reduction { Sum, Mean };

enum class FeatureMode {
    FullMap,         // p-norm over the raw feature maps
    ChannelAverage,  // spatially average both sides per channel first
};

struct RegressionLossConfig {
    double p = 2.0;
    FeatureMode mode = FeatureMode::FullMap;
    Reduction reduction = Reduction::Mean;
};

// Exponential feature distribution with teacher-modeled mean. The normalization
// constant cancels in the MLE argmax and is carried symbolically only.
template <typename T>
struct DistributionModel {
    double p = 2.0;
    Tensor<T> mean;
    std::string normalization_constant = "C_p";
};

namespace detail {

// d(|d|^p)/dd with the subgradient at d == 0 taken as 0.
template <typename T>
inline T pow_p_derivative(T d, double p) {
    if (d == T(0)) return T(0);
    if (p == 2.0) return T(2) * d;
    if (p == 1.0) return d > T(0) ? T(1) : T(-1);
    const double a = std::abs(static_cast<double>(d));
    const double g = p * std::pow(a, p - 1.0);
    return static_cast<T>(d > T(0) ? g : -g);
}

template <typename T>
inline double pow_p(T d, double p) {
    if (p == 2.0) return static_cast<double>(d) * static_cast<double>(d);
    if (p == 1.0) return std::abs(static_cast<double>(d));
    return std::pow(std::abs(static_cast<double>(d)), p);
}

}  // namespace detail

// sum_i |s_i - t_i|^p, with the first dimension treated as the batch when rank >= 2
// (Mean divides by the batch size, not the element count). The teacher side is a
// plain tensor, i.e. structurally detached: gradient flows into the student only.
template <typename T>
Value<T> pnorm_loss(const Value<T>& student, Tensor<T> teacher, double p,
                    Reduction reduction = Reduction::Mean) {
    if (p <= 0.0) throw ConfigError("pnorm_loss: p must be positive, got " + std::to_string(p));
    require_same_shape(student->value, teacher, "pnorm_loss");
    const std::size_t batch = student->value.rank() >= 2 ? student->value.dims[0] : 1;
    double acc = 0.0;
    for (std::size_t i = 0; i < teacher.v.size(); ++i) {
        acc += detail::pow_p(student->value.v[i] - teacher.v[i], p);
    }
    if (reduction == Reduction::Mean) acc /= static_cast<double>(batch);
    Tensor<T> out({1}, std::vector<T>{static_cast<T>(acc)});
    return detail::make_op<T>(
        std::move(out), "pnorm_loss", {student},
        [teacher = std::move(teacher), p, reduction, batch](Node<T>& self) {
            auto& s = self.parents[0];
            if (!s->requires_grad) return;
            s->ensure_grad();
            T g = self.grad.v[0];
            if (reduction == Reduction::Mean) g /= static_cast<T>(batch);
            for (std::size_t i = 0; i < teacher.v.size(); ++i) {
                s->grad.v[i] += g * detail::pow_p_derivative(s->value.v[i] - teacher.v[i], p);
            }
        });
}

// Plain-tensor spatial average (per-channel mean over the spatial grid), the
// non-autodiff twin of the spatial_average op. CHW -> C or NCHW -> NC.
template <typename T>
Tensor<T> spatial_average_tensor(const Tensor<T>& x) {
    if (x.rank() != 3 && x.rank() != 4) {
        throw ShapeError("spatial_average: need CHW or NCHW input, got " + x.shape_str());
    }
    const bool batched = x.rank() == 4;
    const std::size_t n = batched ? x.dims[0] : 1;
    const std::size_t c = x.dims[batched ? 1 : 0];
    const std::size_t plane = x.dims[batched ? 2 : 1] * x.dims[batched ? 3 : 2];
    Tensor<T> y(batched ? std::vector<std::size_t>{n, c} : std::vector<std::size_t>{c});
    for (std::size_t i = 0; i < n * c; ++i) {
        T acc = T(0);
        const T* p = &x.v[i * plane];
        for (std::size_t j = 0; j < plane; ++j) acc += p[j];
        y.v[i] = acc / static_cast<T>(plane);
    }
    return y;
}

// Teacher-regression loss. In ChannelAverage mode both sides are spatially
// averaged per channel before the p-norm is taken.
template <typename T>
Value<T> regression_loss(const Value<T>& student, const Tensor<T>& teacher,
                         const RegressionLossConfig& cfg) {
    if (cfg.p <= 0.0) {
        throw ConfigError("regression_loss: p must be positive, got " + std::to_string(cfg.p));
    }
    if (cfg.mode == FeatureMode::ChannelAverage) {
        return pnorm_loss(spatial_average(student), spatial_average_tensor(teacher), cfg.p,
                          cfg.reduction);
    }
    return pnorm_loss(student, teacher, cfg.p, cfg.reduction);
}

template <typename T>
Value<T> regression_loss(const Value<T>& student, const Value<T>& teacher,
                         const RegressionLossConfig& cfg) {
    return regression_loss(student, teacher->value, cfg);
}

// Log of the model density up to the additive log C_p: -||X - mean||_p^p. Plain
// elementwise sum, so it is the exact negative of regression_loss under Sum
// reduction in FullMap mode.
template <typename T>
double log_density(const DistributionModel<T>& model, const Tensor<T>& x) {
    require_same_shape(x, model.mean, "log_density");
    if (model.p <= 0.0) throw ConfigError("log_density: p must be positive");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.v.size(); ++i) {
        acc += detail::pow_p(x.v[i] - model.mean.v[i], model.p);
    }
    return -acc;
}

// Row-wise log-softmax with max subtraction.
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& logits) {
    if (logits.rank() != 2) throw ShapeError("log_softmax: need N x M logits, got " + logits.shape_str());
    const std::size_t n = logits.dims[0], m = logits.dims[1];
    Tensor<T> out(logits.dims);
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = &logits.v[i * m];
        T mx = row[0];
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (std::size_t j = 0; j < m; ++j) lse += std::exp(static_cast<double>(row[j] - mx));
        const T log_z = mx + static_cast<T>(std::log(lse));
        for (std::size_t j = 0; j < m; ++j) out.v[i * m + j] = row[j] - log_z;
    }
    return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
    Tensor<T> out = log_softmax_rows(logits);
    for (auto& x : out.v) x = static_cast<T>(std::exp(static_cast<double>(x)));
    return out;
}

// Multi-class cross-entropy: -sum_i log softmax(logits)_{i, label_i}, reduced over
// the batch per cfg. Labels must lie in [0, M).
template <typename T>
Value<T> cross_entropy(const Value<T>& logits, const std::vector<int>& labels,
                       Reduction reduction = Reduction::Mean) {
    const Tensor<T>& lv = logits->value;
    if (lv.rank() != 2) throw ShapeError("cross_entropy: need N x M logits, got " + lv.shape_str());
    const std::size_t n = lv.dims[0], m = lv.dims[1];
    if (labels.size() != n) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= m) {
            throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                            std::to_string(m) + ")");
        }
    }
    Tensor<T> logp = log_softmax_rows(lv);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc -= static_cast<double>(logp.v[i * m + labels[i]]);
    if (reduction == Reduction::Mean) acc /= static_cast<double>(n);
    Tensor<T> out({1}, std::vector<T>{static_cast<T>(acc)});
    return detail::make_op<T>(
        std::move(out), "cross_entropy", {logits},
        [logp = std::move(logp), labels, reduction, n, m](Node<T>& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            p->ensure_grad();
            T g = self.grad.v[0];
            if (reduction == Reduction::Mean) g /= static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    T soft = static_cast<T>(std::exp(static_cast<double>(logp.v[i * m + j])));
                    if (j == static_cast<std::size_t>(labels[i])) soft -= T(1);
                    p->grad.v[i * m + j] += g * soft;
                }
            }
        });
}

}  // namespace fn2en
