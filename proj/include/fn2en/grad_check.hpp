#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fn2en/autodiff.hpp"

namespace fn2en {

// Central-finite-difference verification of reverse-mode gradients. Meant to run
// in double precision.
template <typename T>
struct GradCheckResult {
    T max_rel_error = T(0);
    std::size_t checked = 0;
    // Coordinates straddling a kink (the one-sided derivatives disagree), e.g. a
    // p=1 loss with an exactly zero diff. Reported, not failed.
    std::vector<std::pair<std::string, std::size_t>> excluded;
};

// rebuild() must re-run the forward pass from the current parameter values and
// return the scalar loss node; it must be a pure function of those values (fix
// any RNG inside it). Relative error is |analytic - numeric| / max(1, |numeric|).
template <typename T>
GradCheckResult<T> grad_check(const std::function<Value<T>()>& rebuild,
                              const std::vector<Value<T>>& params, T eps = T(1e-5),
                              T kink_tol = T(1e-3)) {
    GradCheckResult<T> result;
    for (auto& p : params) p->zero_grad();
    Value<T> loss = rebuild();
    backward(loss);
    std::vector<Tensor<T>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        p->ensure_grad();
        analytic.push_back(p->grad);
    }
    const T base = loss->value.v[0];
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (std::size_t i = 0; i < p->value.v.size(); ++i) {
            const T saved = p->value.v[i];
            p->value.v[i] = saved + eps;
            const T up = rebuild()->value.v[0];
            p->value.v[i] = saved - eps;
            const T down = rebuild()->value.v[0];
            p->value.v[i] = saved;

            const T fwd = (up - base) / eps;
            const T bwd = (base - down) / eps;
            if (std::abs(fwd - bwd) > kink_tol * std::max(T(1), std::abs(fwd) + std::abs(bwd))) {
                result.excluded.emplace_back(p->name.empty() ? "param" + std::to_string(pi) : p->name,
                                             i);
                continue;
            }
            const T numeric = (up - down) / (T(2) * eps);
            const T rel =
                std::abs(analytic[pi].v[i] - numeric) / std::max(T(1), std::abs(numeric));
            result.max_rel_error = std::max(result.max_rel_error, rel);
            ++result.checked;
        }
    }
    return result;
}

}  // namespace fn2en
