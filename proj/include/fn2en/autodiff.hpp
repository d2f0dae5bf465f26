#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fn2en/errors.hpp"
#include "fn2en/rng.hpp"
#include "fn2en/tensor.hpp"

namespace fn2en {

// Reverse-mode autodiff over a define-by-run graph. Each op appends a Node whose
// backprop closure scatters the node's gradient into its parents. backward() walks
// the recorded graph once, in reverse topological order.
//
// T is float for training and double for verification (finite-difference checks).

template <typename T>
struct Node;

template <typename T>
using Value = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until ensure_grad(); always same dims as value
    bool requires_grad = false;
    bool trainable = false;  // parameter flag; only these are touched by the optimizer
    std::string name;        // set for parameters
    std::string op;
    std::vector<Value<T>> parents;
    std::function<void(Node<T>&)> backprop;  // empty for leaves

    void ensure_grad() {
        if (grad.v.empty()) grad = Tensor<T>(value.dims);
    }

    void zero_grad() {
        if (!grad.v.empty()) std::fill(grad.v.begin(), grad.v.end(), T(0));
    }
};

template <typename T>
Value<T> constant(Tensor<T> t, std::string name = {}) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(t);
    n->name = std::move(name);
    n->op = "const";
    return n;
}

template <typename T>
Value<T> parameter(Tensor<T> t, std::string name = {}) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(t);
    n->requires_grad = true;
    n->trainable = true;
    n->name = std::move(name);
    n->op = "param";
    return n;
}

// Value copy with the gradient path severed.
template <typename T>
Value<T> detach(const Value<T>& x) {
    return constant(x->value);
}

namespace detail {

template <typename T>
Value<T> make_op(Tensor<T> out, const char* op, std::vector<Value<T>> parents,
                 std::function<void(Node<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(out);
    n->op = op;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    n->requires_grad = needs;
    n->parents = std::move(parents);
    if (needs) n->backprop = std::move(backprop);
    return n;
}

inline std::size_t ceil_pool_extent(std::size_t in, std::size_t k, std::size_t stride) {
    if (in >= k) return (in - k + stride - 1) / stride + 1;
    return 1;  // window clipped to the whole input
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / reduction ops
// ---------------------------------------------------------------------------

template <typename T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b->value.v[i];
    return detail::make_op<T>(std::move(out), "add", {a, b}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.v.size(); ++i) p->grad.v[i] += self.grad.v[i];
        }
    });
}

template <typename T>
Value<T> scale(const Value<T>& a, T c) {
    Tensor<T> out = a->value;
    for (auto& x : out.v) x *= c;
    return detail::make_op<T>(std::move(out), "scale", {a}, [c](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.v.size(); ++i) p->grad.v[i] += c * self.grad.v[i];
    });
}

template <typename T>
Value<T> sum(const Value<T>& a) {
    T s = T(0);
    for (T x : a->value.v) s += x;
    Tensor<T> out({1}, std::vector<T>{s});
    return detail::make_op<T>(std::move(out), "sum", {a}, [](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const T g = self.grad.v[0];
        for (auto& x : p->grad.v) x += g;
    });
}

template <typename T>
Value<T> relu(const Value<T>& a) {
    Tensor<T> out = a->value;
    for (auto& x : out.v) x = x > T(0) ? x : T(0);
    return detail::make_op<T>(std::move(out), "relu", {a}, [](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.v.size(); ++i) {
            if (p->value.v[i] > T(0)) p->grad.v[i] += self.grad.v[i];
        }
    });
}

// Inverted dropout: each unit is zeroed with probability `rate` and survivors are
// scaled by 1/(1-rate) at train time, so eval mode is an identity pass-through.
template <typename T>
Value<T> dropout(const Value<T>& a, double rate, Rng& rng, bool train) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }
    if (!train || rate == 0.0) {
        Tensor<T> out = a->value;
        return detail::make_op<T>(std::move(out), "dropout", {a}, [](Node<T>& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.v.size(); ++i) p->grad.v[i] += self.grad.v[i];
        });
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<std::uint8_t> mask(a->value.v.size());
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        mask[i] = rng.uniform() < rate ? 0 : 1;
        out.v[i] = mask[i] ? out.v[i] * keep_scale : T(0);
    }
    return detail::make_op<T>(
        std::move(out), "dropout", {a}, [mask = std::move(mask), keep_scale](Node<T>& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.v.size(); ++i) {
                if (mask[i]) p->grad.v[i] += keep_scale * self.grad.v[i];
            }
        });
}

// N x d1 x d2 ... -> N x (d1*d2*...). Row-major, so this is a reshape.
template <typename T>
Value<T> flatten(const Value<T>& a) {
    if (a->value.rank() < 2) throw ShapeError("flatten: need rank >= 2, got " + a->value.shape_str());
    const std::size_t n = a->value.dims[0];
    Tensor<T> out({n, a->value.numel() / n}, a->value.v);
    return detail::make_op<T>(std::move(out), "flatten", {a}, [](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.v.size(); ++i) p->grad.v[i] += self.grad.v[i];
    });
}

// ---------------------------------------------------------------------------
// Linear layer: y = x W^T + b, x: N x D, W: O x D, b: O
// ---------------------------------------------------------------------------

template <typename T>
Value<T> linear(const Value<T>& x, const Value<T>& w, const Value<T>& b) {
    if (x->value.rank() != 2 || w->value.rank() != 2) {
        throw ShapeError("linear: need x rank 2 and w rank 2, got " + x->value.shape_str() +
                         " and " + w->value.shape_str());
    }
    const std::size_t n = x->value.dims[0], d = x->value.dims[1], o = w->value.dims[0];
    if (w->value.dims[1] != d || b->value.rank() != 1 || b->value.dims[0] != o) {
        throw ShapeError("linear: incompatible shapes x" + x->value.shape_str() + " w" +
                         w->value.shape_str() + " b" + b->value.shape_str());
    }
    Tensor<T> out({n, o});
    for (std::size_t i = 0; i < n; ++i) {
        const T* xi = &x->value.v[i * d];
        for (std::size_t j = 0; j < o; ++j) {
            const T* wj = &w->value.v[j * d];
            T s = b->value.v[j];
            for (std::size_t k = 0; k < d; ++k) s += xi[k] * wj[k];
            out.at2(i, j) = s;
        }
    }
    return detail::make_op<T>(std::move(out), "linear", {x, w, b}, [n, d, o](Node<T>& self) {
        auto& x = self.parents[0];
        auto& w = self.parents[1];
        auto& b = self.parents[2];
        if (x->requires_grad) {
            x->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                T* dxi = &x->grad.v[i * d];
                for (std::size_t j = 0; j < o; ++j) {
                    const T g = self.grad.at2(i, j);
                    const T* wj = &w->value.v[j * d];
                    for (std::size_t k = 0; k < d; ++k) dxi[k] += g * wj[k];
                }
            }
        }
        if (w->requires_grad) {
            w->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T* xi = &x->value.v[i * d];
                for (std::size_t j = 0; j < o; ++j) {
                    const T g = self.grad.at2(i, j);
                    T* dwj = &w->grad.v[j * d];
                    for (std::size_t k = 0; k < d; ++k) dwj[k] += g * xi[k];
                }
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < o; ++j) b->grad.v[j] += self.grad.at2(i, j);
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution kernels (shared by conv2d forward/backward and deconv2d)
// ---------------------------------------------------------------------------

namespace detail {

// Valid ox range so that ix = ox*stride - pad + kx lands in [0, in_w).
inline void conv_ox_range(std::size_t out_w, std::size_t in_w, std::size_t stride, long pad,
                          long kx, std::size_t& ox_lo, std::size_t& ox_hi) {
    const long s = static_cast<long>(stride);
    long lo = pad - kx;  // need ox*s >= pad - kx
    lo = lo <= 0 ? 0 : (lo + s - 1) / s;
    long hi = static_cast<long>(in_w) - 1 + pad - kx;  // need ox*s <= this
    hi = hi < 0 ? -1 : hi / s;
    if (hi >= static_cast<long>(out_w)) hi = static_cast<long>(out_w) - 1;
    if (hi < lo) {
        ox_lo = 1;
        ox_hi = 0;  // empty
    } else {
        ox_lo = static_cast<std::size_t>(lo);
        ox_hi = static_cast<std::size_t>(hi);
    }
}

// y[n,o,oy,ox] = sum_{i,ky,kx} x[n,i,oy*s-p+ky,ox*s-p+kx] * w[o,i,ky,kx]
template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad,
                       std::size_t out_h, std::size_t out_w) {
    const std::size_t n = x.dims[0], ic = x.dims[1], ih = x.dims[2], iw = x.dims[3];
    const std::size_t oc = w.dims[0], kh = w.dims[2], kw = w.dims[3];
    Tensor<T> y({n, oc, out_h, out_w});
    const long p = static_cast<long>(pad);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t o = 0; o < oc; ++o) {
            T* yo = &y.v[((b * oc + o) * out_h) * out_w];
            for (std::size_t i = 0; i < ic; ++i) {
                const T* xi = &x.v[((b * ic + i) * ih) * iw];
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const T wv = w.v[((o * ic + i) * kh + ky) * kw + kx];
                        if (wv == T(0)) continue;
                        std::size_t ox_lo, ox_hi;
                        conv_ox_range(out_w, iw, stride, p, static_cast<long>(kx), ox_lo, ox_hi);
                        if (ox_lo > ox_hi) continue;
                        for (std::size_t oy = 0; oy < out_h; ++oy) {
                            const long iy = static_cast<long>(oy * stride) - p + static_cast<long>(ky);
                            if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                            const T* xrow = xi + static_cast<std::size_t>(iy) * iw;
                            T* yrow = yo + oy * out_w;
                            for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                const long ix = static_cast<long>(ox * stride) - p + static_cast<long>(kx);
                                yrow[ox] += wv * xrow[static_cast<std::size_t>(ix)];
                            }
                        }
                    }
                }
            }
        }
    }
    return y;
}

// dx[n,i,iy,ix] += sum_{o,ky,kx} dy[n,o,oy,ox] * w[o,i,ky,kx], the adjoint of conv_forward.
template <typename T>
void conv_backward_input(const Tensor<T>& dy, const Tensor<T>& w, std::size_t stride,
                         std::size_t pad, Tensor<T>& dx) {
    const std::size_t n = dx.dims[0], ic = dx.dims[1], ih = dx.dims[2], iw = dx.dims[3];
    const std::size_t oc = w.dims[0], kh = w.dims[2], kw = w.dims[3];
    const std::size_t out_h = dy.dims[2], out_w = dy.dims[3];
    const long p = static_cast<long>(pad);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t o = 0; o < oc; ++o) {
            const T* dyo = &dy.v[((b * oc + o) * out_h) * out_w];
            for (std::size_t i = 0; i < ic; ++i) {
                T* dxi = &dx.v[((b * ic + i) * ih) * iw];
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const T wv = w.v[((o * ic + i) * kh + ky) * kw + kx];
                        if (wv == T(0)) continue;
                        std::size_t ox_lo, ox_hi;
                        conv_ox_range(out_w, iw, stride, p, static_cast<long>(kx), ox_lo, ox_hi);
                        if (ox_lo > ox_hi) continue;
                        for (std::size_t oy = 0; oy < out_h; ++oy) {
                            const long iy = static_cast<long>(oy * stride) - p + static_cast<long>(ky);
                            if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                            T* dxrow = dxi + static_cast<std::size_t>(iy) * iw;
                            const T* dyrow = dyo + oy * out_w;
                            for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                const long ix = static_cast<long>(ox * stride) - p + static_cast<long>(kx);
                                dxrow[static_cast<std::size_t>(ix)] += wv * dyrow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

// dw[o,i,ky,kx] += sum_{n,oy,ox} x[n,i,oy*s-p+ky,ox*s-p+kx] * dy[n,o,oy,ox]
template <typename T>
void conv_backward_weight(const Tensor<T>& x, const Tensor<T>& dy, std::size_t stride,
                          std::size_t pad, Tensor<T>& dw) {
    const std::size_t n = x.dims[0], ic = x.dims[1], ih = x.dims[2], iw = x.dims[3];
    const std::size_t oc = dw.dims[0], kh = dw.dims[2], kw = dw.dims[3];
    const std::size_t out_h = dy.dims[2], out_w = dy.dims[3];
    const long p = static_cast<long>(pad);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t o = 0; o < oc; ++o) {
            const T* dyo = &dy.v[((b * oc + o) * out_h) * out_w];
            for (std::size_t i = 0; i < ic; ++i) {
                const T* xi = &x.v[((b * ic + i) * ih) * iw];
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        std::size_t ox_lo, ox_hi;
                        conv_ox_range(out_w, iw, stride, p, static_cast<long>(kx), ox_lo, ox_hi);
                        if (ox_lo > ox_hi) continue;
                        T acc = T(0);
                        for (std::size_t oy = 0; oy < out_h; ++oy) {
                            const long iy = static_cast<long>(oy * stride) - p + static_cast<long>(ky);
                            if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                            const T* xrow = xi + static_cast<std::size_t>(iy) * iw;
                            const T* dyrow = dyo + oy * out_w;
                            for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                const long ix = static_cast<long>(ox * stride) - p + static_cast<long>(kx);
                                acc += xrow[static_cast<std::size_t>(ix)] * dyrow[ox];
                            }
                        }
                        dw.v[((o * ic + i) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace detail

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
    if (in + 2 * pad < k) {
        throw ShapeError("conv2d: kernel " + std::to_string(k) + " does not fit padded extent " +
                         std::to_string(in + 2 * pad));
    }
    return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation. x: N x I x H x W, w: O x I x k x k, b: O.
template <typename T>
Value<T> conv2d(const Value<T>& x, const Value<T>& w, const Value<T>& b, std::size_t stride = 1,
                std::size_t pad = 0) {
    const Tensor<T>& xv = x->value;
    const Tensor<T>& wv = w->value;
    if (xv.rank() != 4 || wv.rank() != 4) {
        throw ShapeError("conv2d: need NCHW input and OIkk weight, got " + xv.shape_str() +
                         " and " + wv.shape_str());
    }
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    if (xv.dims[1] != wv.dims[1]) {
        throw ShapeError("conv2d: input channels " + std::to_string(xv.dims[1]) +
                         " != weight channels " + std::to_string(wv.dims[1]));
    }
    if (b->value.rank() != 1 || b->value.dims[0] != wv.dims[0]) {
        throw ShapeError("conv2d: bias shape " + b->value.shape_str() + " != output channels " +
                         std::to_string(wv.dims[0]));
    }
    const std::size_t out_h = conv_out_extent(xv.dims[2], wv.dims[2], stride, pad);
    const std::size_t out_w = conv_out_extent(xv.dims[3], wv.dims[3], stride, pad);
    Tensor<T> y = detail::conv_forward(xv, wv, stride, pad, out_h, out_w);
    const std::size_t oc = wv.dims[0];
    for (std::size_t n = 0; n < y.dims[0]; ++n)
        for (std::size_t o = 0; o < oc; ++o) {
            const T bias = b->value.v[o];
            T* plane = &y.v[((n * oc + o) * out_h) * out_w];
            for (std::size_t i = 0; i < out_h * out_w; ++i) plane[i] += bias;
        }
    return detail::make_op<T>(std::move(y), "conv2d", {x, w, b}, [stride, pad](Node<T>& self) {
        auto& x = self.parents[0];
        auto& w = self.parents[1];
        auto& b = self.parents[2];
        if (x->requires_grad) {
            x->ensure_grad();
            detail::conv_backward_input(self.grad, w->value, stride, pad, x->grad);
        }
        if (w->requires_grad) {
            w->ensure_grad();
            detail::conv_backward_weight(x->value, self.grad, stride, pad, w->grad);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            const std::size_t oc = w->value.dims[0];
            const std::size_t plane = self.grad.dims[2] * self.grad.dims[3];
            for (std::size_t n = 0; n < self.grad.dims[0]; ++n)
                for (std::size_t o = 0; o < oc; ++o) {
                    const T* g = &self.grad.v[(n * oc + o) * plane];
                    T acc = T(0);
                    for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                    b->grad.v[o] += acc;
                }
        }
    });
}

// Fractionally strided convolution, the exact adjoint of conv2d with padding 0:
// <conv2d(a, w, s), b> == <a, deconv2d(b, w, s)>. x: N x O x h x w, w: O x I x k x k,
// output: N x I x (h-1)*s+k x (w-1)*s+k.
template <typename T>
Value<T> deconv2d(const Value<T>& x, const Value<T>& w, std::size_t stride = 1) {
    const Tensor<T>& xv = x->value;
    const Tensor<T>& wv = w->value;
    if (xv.rank() != 4 || wv.rank() != 4) {
        throw ShapeError("deconv2d: need NCHW input and OIkk weight, got " + xv.shape_str() +
                         " and " + wv.shape_str());
    }
    if (stride == 0) throw ConfigError("deconv2d: stride must be positive");
    if (xv.dims[1] != wv.dims[0]) {
        throw ShapeError("deconv2d: input channels " + std::to_string(xv.dims[1]) +
                         " != weight output channels " + std::to_string(wv.dims[0]));
    }
    const std::size_t out_h = (xv.dims[2] - 1) * stride + wv.dims[2];
    const std::size_t out_w = (xv.dims[3] - 1) * stride + wv.dims[3];
    Tensor<T> y({xv.dims[0], wv.dims[1], out_h, out_w});
    detail::conv_backward_input(xv, wv, stride, 0, y);
    return detail::make_op<T>(std::move(y), "deconv2d", {x, w}, [stride](Node<T>& self) {
        auto& x = self.parents[0];
        auto& w = self.parents[1];
        if (x->requires_grad) {
            x->ensure_grad();
            Tensor<T> dx = detail::conv_forward(self.grad, w->value, stride, 0, x->value.dims[2],
                                                x->value.dims[3]);
            for (std::size_t i = 0; i < dx.v.size(); ++i) x->grad.v[i] += dx.v[i];
        }
        if (w->requires_grad) {
            w->ensure_grad();
            detail::conv_backward_weight(self.grad, x->value, stride, 0, w->grad);
        }
    });
}

// Ceil-mode max pooling with edge windows clipped to the input. The gradient is
// routed to the argmax position only (first one in row-major scan order on ties).
template <typename T>
Value<T> maxpool2d(const Value<T>& x, std::size_t k = 3, std::size_t stride = 2) {
    const Tensor<T>& xv = x->value;
    if (xv.rank() != 4) throw ShapeError("maxpool2d: need NCHW input, got " + xv.shape_str());
    if (k == 0 || stride == 0) throw ConfigError("maxpool2d: k and stride must be positive");
    const std::size_t n = xv.dims[0], c = xv.dims[1], ih = xv.dims[2], iw = xv.dims[3];
    const std::size_t oh = detail::ceil_pool_extent(ih, k, stride);
    const std::size_t ow = detail::ceil_pool_extent(iw, k, stride);
    Tensor<T> y({n, c, oh, ow});
    std::vector<std::uint32_t> argmax(y.v.size());
    std::size_t oi = 0;
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* plane = &xv.v[((b * c + ch) * ih) * iw];
            for (std::size_t oy = 0; oy < oh; ++oy) {
                const std::size_t y0 = oy * stride;
                const std::size_t y1 = std::min(y0 + k, ih);
                for (std::size_t ox = 0; ox < ow; ++ox, ++oi) {
                    const std::size_t x0 = ox * stride;
                    const std::size_t x1 = std::min(x0 + k, iw);
                    T best = plane[y0 * iw + x0];
                    std::size_t best_at = y0 * iw + x0;
                    for (std::size_t yy = y0; yy < y1; ++yy)
                        for (std::size_t xx = x0; xx < x1; ++xx) {
                            const T v = plane[yy * iw + xx];
                            if (v > best) {
                                best = v;
                                best_at = yy * iw + xx;
                            }
                        }
                    y.v[oi] = best;
                    argmax[oi] = static_cast<std::uint32_t>(best_at);
                }
            }
        }
    }
    return detail::make_op<T>(
        std::move(y), "maxpool2d", {x},
        [argmax = std::move(argmax), ih, iw, oh, ow](Node<T>& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            p->ensure_grad();
            const std::size_t planes = self.grad.dims[0] * self.grad.dims[1];
            for (std::size_t pl = 0; pl < planes; ++pl) {
                const T* g = &self.grad.v[pl * oh * ow];
                T* dx = &p->grad.v[pl * ih * iw];
                const std::uint32_t* am = &argmax[pl * oh * ow];
                for (std::size_t i = 0; i < oh * ow; ++i) dx[am[i]] += g[i];
            }
        });
}

// Per-channel mean over the spatial grid. Accepts C x H x W (single sample) or
// N x C x H x W, returning C or N x C.
template <typename T>
Value<T> spatial_average(const Value<T>& x) {
    const Tensor<T>& xv = x->value;
    if (xv.rank() != 3 && xv.rank() != 4) {
        throw ShapeError("spatial_average: need CHW or NCHW input, got " + xv.shape_str());
    }
    const bool batched = xv.rank() == 4;
    const std::size_t n = batched ? xv.dims[0] : 1;
    const std::size_t c = xv.dims[batched ? 1 : 0];
    const std::size_t plane = xv.dims[batched ? 2 : 1] * xv.dims[batched ? 3 : 2];
    Tensor<T> y(batched ? std::vector<std::size_t>{n, c} : std::vector<std::size_t>{c});
    for (std::size_t i = 0; i < n * c; ++i) {
        const T* p = &xv.v[i * plane];
        T acc = T(0);
        for (std::size_t j = 0; j < plane; ++j) acc += p[j];
        y.v[i] = acc / static_cast<T>(plane);
    }
    return detail::make_op<T>(std::move(y), "spatial_average", {x}, [plane](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.v.size(); ++i) {
            const T g = self.grad.v[i] / static_cast<T>(plane);
            T* dst = &p->grad.v[i * plane];
            for (std::size_t j = 0; j < plane; ++j) dst[j] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
std::vector<Node<T>*> topo_order(const Value<T>& root) {
    std::vector<Node<T>*> order;
    std::unordered_set<const Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    if (!seen.insert(root.get()).second) return order;
    stack.emplace_back(root.get(), 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* child = node->parents[next++].get();
            if (seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;  // parents before consumers
}

// Reverse-mode sweep from a scalar loss. Each op's backprop runs exactly once, in
// reverse topological order; gradients accumulate (+=) into every node that
// requires them.
template <typename T>
void backward(const Value<T>& loss) {
    if (!loss->value.is_scalar()) {
        throw ContractError("backward: loss must be scalar, got " + loss->value.shape_str());
    }
    if (!loss->requires_grad) return;
    auto order = topo_order(loss);
    loss->ensure_grad();
    loss->grad.v[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backprop && node->requires_grad) {
            node->ensure_grad();
            node->backprop(*node);
        }
    }
}

}  // namespace fn2en
