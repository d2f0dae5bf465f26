#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fn2en/errors.hpp"
#include "fn2en/rng.hpp"

namespace fn2en {

// Dense n-d array, row-major. Value semantics; once an op has produced a tensor it
// is treated as immutable (reads may be shared across threads, writes may not).
template <typename T>
struct Tensor {
    std::vector<std::size_t> dims;
    std::vector<T> v;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> d, T fill = T(0)) : dims(std::move(d)) {
        for (std::size_t e : dims) {
            if (e == 0) throw ShapeError("tensor: zero-extent dimension");
        }
        v.assign(numel(), fill);
    }

    Tensor(std::vector<std::size_t> d, std::vector<T> data) : dims(std::move(d)), v(std::move(data)) {
        if (numel() != v.size()) {
            throw ShapeError("tensor: dims " + shape_str() + " do not match " +
                             std::to_string(v.size()) + " values");
        }
    }

    std::size_t numel() const {
        return std::accumulate(dims.begin(), dims.end(), static_cast<std::size_t>(1),
                               std::multiplies<>());
    }

    std::size_t rank() const { return dims.size(); }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    bool is_scalar() const { return numel() == 1; }

    T scalar() const {
        if (!is_scalar()) throw ContractError("scalar() on tensor of shape " + shape_str());
        return v[0];
    }

    // 4-d (NCHW) accessors used by the conv/pool kernels.
    T& at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        return v[((n * dims[1] + c) * dims[2] + y) * dims[3] + x];
    }
    T at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return v[((n * dims[1] + c) * dims[2] + y) * dims[3] + x];
    }

    T& at2(std::size_t i, std::size_t j) { return v[i * dims[1] + j]; }
    T at2(std::size_t i, std::size_t j) const { return v[i * dims[1] + j]; }

    bool all_finite() const {
        for (T x : v) {
            if (!std::isfinite(static_cast<double>(x))) return false;
        }
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
        os << ']';
        return os.str();
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.dims = dims;
        out.v.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }

    static Tensor gaussian(std::vector<std::size_t> d, T stddev, Rng& rng) {
        Tensor t(std::move(d));
        for (auto& x : t.v) x = static_cast<T>(rng.normal() * static_cast<double>(stddev));
        return t;
    }
};

inline std::string shape_to_string(const std::vector<std::size_t>& dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
    os << ']';
    return os.str();
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

template <typename T>
inline T dot(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "dot");
    T s = T(0);
    for (std::size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * b.v[i];
    return s;
}

}  // namespace fn2en
