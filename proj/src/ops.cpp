#include "sgseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "sgseg/kernels.hpp"

namespace sgseg {

namespace {

constexpr std::int64_t kParallelMin = 1 << 14;

template <typename T>
using Impl = TensorImpl<T>;

template <typename T>
Impl<T>& input(const Impl<T>& out, std::size_t i) {
    return *out.node->inputs[i];
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
}

int normalize_axis(int axis, int ndim, const char* op) {
    if (axis < 0) axis += ndim;
    require(axis >= 0 && axis < ndim, std::string(op) + ": axis out of range");
    return axis;
}

// [outer, n, inner] decomposition around `axis`.
struct AxisSplit {
    std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
    AxisSplit r;
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    r.n = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

// Elementwise unary op: f(x) forward, df(x, y) local derivative.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& a, const char* name, F f, DF df) {
    const std::int64_t n = a.numel();
    std::vector<T> y(static_cast<std::size_t>(n));
    const T* x = a.data().data();
#pragma omp parallel for simd if (n > kParallelMin)
    for (std::int64_t i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = f(x[i]);
    return make_result<T>(a.shape(), std::move(y), name, {a}, [df](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        const std::int64_t m = static_cast<std::int64_t>(out.data.size());
#pragma omp parallel for simd if (m > kParallelMin)
        for (std::int64_t i = 0; i < m; ++i) g[i] += out.grad[i] * df(in.data[i], out.data[i]);
    });
}

template <typename T>
void add_into(Impl<T>& t, const std::vector<T>& g) {
    if (!t.requires_grad) return;
    auto& buf = t.grad_buffer();
    const std::int64_t n = static_cast<std::int64_t>(g.size());
#pragma omp parallel for simd if (n > kParallelMin)
    for (std::int64_t i = 0; i < n; ++i) buf[i] += g[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    const std::int64_t n = a.numel();
    std::vector<T> y(static_cast<std::size_t>(n));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#pragma omp parallel for simd if (n > kParallelMin)
    for (std::int64_t i = 0; i < n; ++i) y[i] = pa[i] + pb[i];
    return make_result<T>(a.shape(), std::move(y), "add", {a, b}, [](const Impl<T>& out) {
        add_into(input(out, 0), out.grad);
        add_into(input(out, 1), out.grad);
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    const std::int64_t n = a.numel();
    std::vector<T> y(static_cast<std::size_t>(n));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#pragma omp parallel for simd if (n > kParallelMin)
    for (std::int64_t i = 0; i < n; ++i) y[i] = pa[i] - pb[i];
    return make_result<T>(a.shape(), std::move(y), "sub", {a, b}, [](const Impl<T>& out) {
        add_into(input(out, 0), out.grad);
        auto& in = input(out, 1);
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    const std::int64_t n = a.numel();
    std::vector<T> y(static_cast<std::size_t>(n));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#pragma omp parallel for simd if (n > kParallelMin)
    for (std::int64_t i = 0; i < n; ++i) y[i] = pa[i] * pb[i];
    return make_result<T>(a.shape(), std::move(y), "mul", {a, b}, [](const Impl<T>& out) {
        auto& ia = input(out, 0);
        auto& ib = input(out, 1);
        const std::int64_t m = static_cast<std::int64_t>(out.grad.size());
        if (ia.requires_grad) {
            auto& g = ia.grad_buffer();
#pragma omp parallel for simd if (m > kParallelMin)
            for (std::int64_t i = 0; i < m; ++i) g[i] += out.grad[i] * ib.data[i];
        }
        if (ib.requires_grad) {
            auto& g = ib.grad_buffer();
#pragma omp parallel for simd if (m > kParallelMin)
            for (std::int64_t i = 0; i < m; ++i) g[i] += out.grad[i] * ia.data[i];
        }
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "div");
    const std::int64_t n = a.numel();
    std::vector<T> y(static_cast<std::size_t>(n));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#pragma omp parallel for simd if (n > kParallelMin)
    for (std::int64_t i = 0; i < n; ++i) y[i] = pa[i] / pb[i];
    return make_result<T>(a.shape(), std::move(y), "div", {a, b}, [](const Impl<T>& out) {
        auto& ia = input(out, 0);
        auto& ib = input(out, 1);
        const std::int64_t m = static_cast<std::int64_t>(out.grad.size());
        if (ia.requires_grad) {
            auto& g = ia.grad_buffer();
#pragma omp parallel for simd if (m > kParallelMin)
            for (std::int64_t i = 0; i < m; ++i) g[i] += out.grad[i] / ib.data[i];
        }
        if (ib.requires_grad) {
            auto& g = ib.grad_buffer();
#pragma omp parallel for simd if (m > kParallelMin)
            for (std::int64_t i = 0; i < m; ++i) g[i] -= out.grad[i] * out.data[i] / ib.data[i];
        }
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    return unary(a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    return unary(a, "mul_scalar", [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& a, T c) {
    return unary(a, "div_scalar", [c](T x) { return x / c; }, [c](T, T) { return T(1) / c; });
}

template <typename T>
Tensor<T> rsub_scalar(T c, const Tensor<T>& a) {
    return unary(a, "rsub_scalar", [c](T x) { return c - x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T e) {
    return unary(
        a, "pow_scalar", [e](T x) { return std::pow(x, e); },
        [e](T x, T) { return e * std::pow(x, e - T(1)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    return unary(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return unary(
        a, "relu", [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return unary(
        a, "sigmoid",
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    return unary(
        a, "clamp", [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
    require(!xs.empty(), "add_n: empty list");
    for (auto& x : xs) require_same_shape(xs.front(), x, "add_n");
    const std::int64_t n = xs.front().numel();
    std::vector<T> y(xs.front().data().begin(), xs.front().data().end());
    for (std::size_t k = 1; k < xs.size(); ++k) {
        const T* p = xs[k].data().data();
#pragma omp parallel for simd if (n > kParallelMin)
        for (std::int64_t i = 0; i < n; ++i) y[i] += p[i];
    }
    return make_result<T>(xs.front().shape(), std::move(y), "add_n", xs, [](const Impl<T>& out) {
        for (std::size_t k = 0; k < out.node->inputs.size(); ++k) add_into(input(out, k), out.grad);
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = 0;
    for (T v : a.data()) acc += v;
    return make_result<T>(Shape{}, {acc}, "sum", {a}, [](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        const T d = out.grad[0];
        for (auto& v : g) v += d;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    require(a.numel() > 0, "mean: empty tensor");
    T acc = 0;
    for (T v : a.data()) acc += v;
    const T inv = T(1) / static_cast<T>(a.numel());
    return make_result<T>(Shape{}, {acc * inv}, "mean", {a}, [inv](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        const T d = out.grad[0] * inv;
        for (auto& v : g) v += d;
    });
}

template <typename T>
Tensor<T> sum_last(const Tensor<T>& a, int count) {
    require(count >= 0 && count <= a.ndim(), "sum_last: bad axis count");
    Shape outer_shape(a.shape().begin(), a.shape().end() - count);
    std::int64_t inner = 1;
    for (int i = a.ndim() - count; i < a.ndim(); ++i) inner *= a.shape()[static_cast<std::size_t>(i)];
    const std::int64_t outer = shape_numel(outer_shape);
    std::vector<T> y(static_cast<std::size_t>(outer));
    const T* x = a.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        T acc = 0;
        for (std::int64_t i = 0; i < inner; ++i) acc += x[o * inner + i];
        y[static_cast<std::size_t>(o)] = acc;
    }
    return make_result<T>(outer_shape, std::move(y), "sum_last", {a}, [inner](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        const std::int64_t outer_n = static_cast<std::int64_t>(out.grad.size());
        for (std::int64_t o = 0; o < outer_n; ++o)
            for (std::int64_t i = 0; i < inner; ++i) g[o * inner + i] += out.grad[o];
    });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& a) {
    require(a.ndim() >= 3, "global_avg_pool: need [.., C, H, W], got " + shape_str(a.shape()));
    const std::int64_t hw = a.dim(-1) * a.dim(-2);
    require(hw > 0, "global_avg_pool: empty spatial extent");
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    const std::int64_t planes = shape_numel(out_shape);
    const T inv = T(1) / static_cast<T>(hw);
    std::vector<T> y(static_cast<std::size_t>(planes));
    const T* x = a.data().data();
    for (std::int64_t p = 0; p < planes; ++p) {
        T acc = 0;
        for (std::int64_t i = 0; i < hw; ++i) acc += x[p * hw + i];
        y[static_cast<std::size_t>(p)] = acc * inv;
    }
    return make_result<T>(out_shape, std::move(y), "global_avg_pool", {a}, [hw, inv](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        const std::int64_t planes_n = static_cast<std::int64_t>(out.grad.size());
        for (std::int64_t p = 0; p < planes_n; ++p) {
            const T d = out.grad[p] * inv;
            for (std::int64_t i = 0; i < hw; ++i) g[p * hw + i] += d;
        }
    });
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    require(shape_numel(shape) == a.numel(),
            "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<T> y(a.data().begin(), a.data().end());
    return make_result<T>(std::move(shape), std::move(y), "reshape", {a},
                          [](const Impl<T>& out) { add_into(input(out, 0), out.grad); });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    require(!xs.empty(), "concat: empty list");
    const int nd = xs.front().ndim();
    axis = normalize_axis(axis, nd, "concat");
    Shape out_shape = xs.front().shape();
    out_shape[static_cast<std::size_t>(axis)] = 0;
    std::vector<std::int64_t> sizes;
    for (auto& x : xs) {
        require(x.ndim() == nd, "concat: rank mismatch");
        for (int d = 0; d < nd; ++d)
            if (d != axis)
                require(x.shape()[static_cast<std::size_t>(d)] == xs.front().shape()[static_cast<std::size_t>(d)],
                        "concat: shape mismatch " + shape_str(x.shape()) + " vs " +
                            shape_str(xs.front().shape()));
        sizes.push_back(x.shape()[static_cast<std::size_t>(axis)]);
        out_shape[static_cast<std::size_t>(axis)] += sizes.back();
    }
    const AxisSplit whole = split_axis(out_shape, axis);
    std::vector<T> y(static_cast<std::size_t>(shape_numel(out_shape)));
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const T* src = xs[k].data().data();
        const std::int64_t chunk = sizes[k] * whole.inner;
        for (std::int64_t o = 0; o < whole.outer; ++o)
            std::copy(src + o * chunk, src + (o + 1) * chunk,
                      y.begin() + o * whole.n * whole.inner + offset * whole.inner);
        offset += sizes[k];
    }
    return make_result<T>(out_shape, std::move(y), "concat", xs, [sizes, whole](const Impl<T>& out) {
        std::int64_t off = 0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            auto& in = input(out, k);
            const std::int64_t chunk = sizes[k] * whole.inner;
            if (in.requires_grad) {
                auto& g = in.grad_buffer();
                for (std::int64_t o = 0; o < whole.outer; ++o) {
                    const T* src = out.grad.data() + o * whole.n * whole.inner + off * whole.inner;
                    for (std::int64_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
                }
            }
            off += sizes[k];
        }
    });
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& xs, int axis) {
    require(!xs.empty(), "stack: empty list");
    const int nd = xs.front().ndim();
    if (axis < 0) axis += nd + 1;
    require(axis >= 0 && axis <= nd, "stack: axis out of range");
    std::vector<Tensor<T>> expanded;
    expanded.reserve(xs.size());
    for (auto& x : xs) {
        require_same_shape(xs.front(), x, "stack");
        Shape s = x.shape();
        s.insert(s.begin() + axis, 1);
        expanded.push_back(reshape(x, s));
    }
    return concat(expanded, axis);
}

template <typename T>
Tensor<T> select(const Tensor<T>& a, int axis, std::int64_t index) {
    axis = normalize_axis(axis, a.ndim(), "select");
    const AxisSplit s = split_axis(a.shape(), axis);
    require(index >= 0 && index < s.n, "select: index out of range");
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + axis);
    std::vector<T> y(static_cast<std::size_t>(s.outer * s.inner));
    const T* x = a.data().data();
    for (std::int64_t o = 0; o < s.outer; ++o)
        std::copy(x + (o * s.n + index) * s.inner, x + (o * s.n + index + 1) * s.inner,
                  y.begin() + o * s.inner);
    return make_result<T>(out_shape, std::move(y), "select", {a}, [s, index](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        for (std::int64_t o = 0; o < s.outer; ++o)
            for (std::int64_t i = 0; i < s.inner; ++i)
                g[(o * s.n + index) * s.inner + i] += out.grad[o * s.inner + i];
    });
}

// ---------------------------------------------------------------------------
// nn
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
    axis = normalize_axis(axis, a.ndim(), "softmax");
    const AxisSplit s = split_axis(a.shape(), axis);
    std::vector<T> y(static_cast<std::size_t>(a.numel()));
    const T* x = a.data().data();
    for (std::int64_t o = 0; o < s.outer; ++o)
        for (std::int64_t i = 0; i < s.inner; ++i) {
            const std::int64_t base = o * s.n * s.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::int64_t k = 0; k < s.n; ++k) mx = std::max(mx, x[base + k * s.inner]);
            T total = 0;
            for (std::int64_t k = 0; k < s.n; ++k) {
                T e = std::exp(x[base + k * s.inner] - mx);
                y[static_cast<std::size_t>(base + k * s.inner)] = e;
                total += e;
            }
            for (std::int64_t k = 0; k < s.n; ++k) y[static_cast<std::size_t>(base + k * s.inner)] /= total;
        }
    return make_result<T>(a.shape(), std::move(y), "softmax", {a}, [s](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        for (std::int64_t o = 0; o < s.outer; ++o)
            for (std::int64_t i = 0; i < s.inner; ++i) {
                const std::int64_t base = o * s.n * s.inner + i;
                T dot = 0;
                for (std::int64_t k = 0; k < s.n; ++k)
                    dot += out.grad[base + k * s.inner] * out.data[base + k * s.inner];
                for (std::int64_t k = 0; k < s.n; ++k) {
                    const std::int64_t j = base + k * s.inner;
                    g[j] += out.data[j] * (out.grad[j] - dot);
                }
            }
    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride, int pad) {
    require(x.ndim() == 3 || x.ndim() == 4, "conv2d: input must be [C,H,W] or [B,C,H,W], got " +
                                                shape_str(x.shape()));
    require(w.ndim() == 4 && w.dim(2) == w.dim(3), "conv2d: weight must be [Cout,Cin,k,k], got " +
                                                       shape_str(w.shape()));
    require(stride >= 1 && pad >= 0 && w.dim(2) >= 1, "conv2d: need stride >= 1, pad >= 0, k >= 1");
    const bool batched = x.ndim() == 4;
    kernels::ConvGeometry g;
    g.batch = batched ? static_cast<int>(x.dim(0)) : 1;
    g.in_channels = static_cast<int>(x.dim(-3));
    g.height = static_cast<int>(x.dim(-2));
    g.width = static_cast<int>(x.dim(-1));
    g.out_channels = static_cast<int>(w.dim(0));
    g.kernel = static_cast<int>(w.dim(2));
    g.stride = stride;
    g.pad = pad;
    require(w.dim(1) == g.in_channels, "conv2d: weight expects " + std::to_string(w.dim(1)) +
                                           " input channels, input has " + std::to_string(g.in_channels));
    if (bias.defined())
        require(bias.ndim() == 1 && bias.dim(0) == g.out_channels, "conv2d: bias shape " +
                                                                       shape_str(bias.shape()));
    require(g.height + 2 * pad >= g.kernel && g.width + 2 * pad >= g.kernel,
            "conv2d: kernel larger than padded input");
    const int oh = g.out_height(), ow = g.out_width();
    require(oh > 0 && ow > 0, "conv2d: empty output");

    Shape out_shape = batched ? Shape{g.batch, g.out_channels, oh, ow} : Shape{g.out_channels, oh, ow};
    std::vector<T> y(static_cast<std::size_t>(shape_numel(out_shape)));
    kernels::parallel::conv2d_forward<T>(g, x.data().data(), w.data().data(),
                                         bias.defined() ? bias.data().data() : nullptr, y.data());
    std::vector<Tensor<T>> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<T>(std::move(out_shape), std::move(y), "conv2d", std::move(inputs),
                          [g](const Impl<T>& out) {
                              auto& ix = input(out, 0);
                              auto& iw = input(out, 1);
                              Impl<T>* ib = out.node->inputs.size() > 2 ? out.node->inputs[2].get() : nullptr;
                              if (ix.requires_grad) {
                                  std::vector<T> dx(ix.data.size());
                                  kernels::parallel::conv2d_backward_input<T>(g, out.grad.data(),
                                                                             iw.data.data(), dx.data());
                                  add_into(ix, dx);
                              }
                              const bool need_b = ib && ib->requires_grad;
                              if (iw.requires_grad || need_b) {
                                  std::vector<T> dw(iw.data.size());
                                  std::vector<T> db(static_cast<std::size_t>(g.out_channels));
                                  kernels::parallel::conv2d_backward_weight<T>(
                                      g, ix.data.data(), out.grad.data(), dw.data(), db.data());
                                  add_into(iw, dw);
                                  if (need_b) add_into(*ib, db);
                              }
                          });
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    require(x.ndim() == 1 || x.ndim() == 2, "fully_connected: input must be [D] or [B,D]");
    require(w.ndim() == 2, "fully_connected: weight must be [Dout,Din]");
    const bool batched = x.ndim() == 2;
    const std::int64_t batch = batched ? x.dim(0) : 1;
    const std::int64_t din = x.dim(-1), dout = w.dim(0);
    require(w.dim(1) == din, "fully_connected: weight " + shape_str(w.shape()) + " vs input " +
                                 shape_str(x.shape()));
    if (bias.defined()) require(bias.ndim() == 1 && bias.dim(0) == dout, "fully_connected: bias shape");
    std::vector<T> y(static_cast<std::size_t>(batch * dout));
    const T* px = x.data().data();
    const T* pw = w.data().data();
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t o = 0; o < dout; ++o) {
            T acc = bias.defined() ? bias[o] : T(0);
            for (std::int64_t i = 0; i < din; ++i) acc += pw[o * din + i] * px[b * din + i];
            y[static_cast<std::size_t>(b * dout + o)] = acc;
        }
    Shape out_shape = batched ? Shape{batch, dout} : Shape{dout};
    std::vector<Tensor<T>> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<T>(std::move(out_shape), std::move(y), "fully_connected", std::move(inputs),
                          [batch, din, dout](const Impl<T>& out) {
                              auto& ix = input(out, 0);
                              auto& iw = input(out, 1);
                              if (ix.requires_grad) {
                                  auto& g = ix.grad_buffer();
                                  for (std::int64_t b = 0; b < batch; ++b)
                                      for (std::int64_t o = 0; o < dout; ++o) {
                                          const T d = out.grad[b * dout + o];
                                          for (std::int64_t i = 0; i < din; ++i) g[b * din + i] += d * iw.data[o * din + i];
                                      }
                              }
                              if (iw.requires_grad) {
                                  auto& g = iw.grad_buffer();
                                  for (std::int64_t b = 0; b < batch; ++b)
                                      for (std::int64_t o = 0; o < dout; ++o) {
                                          const T d = out.grad[b * dout + o];
                                          for (std::int64_t i = 0; i < din; ++i) g[o * din + i] += d * ix.data[b * din + i];
                                      }
                              }
                              if (out.node->inputs.size() > 2 && out.node->inputs[2]->requires_grad) {
                                  auto& g = out.node->inputs[2]->grad_buffer();
                                  for (std::int64_t b = 0; b < batch; ++b)
                                      for (std::int64_t o = 0; o < dout; ++o) g[o] += out.grad[b * dout + o];
                              }
                          });
}

namespace {
template <typename T>
kernels::PlaneGeometry planes_of(const Tensor<T>& x, const char* op) {
    require(x.ndim() >= 2, std::string(op) + ": need at least 2 dims");
    kernels::PlaneGeometry g;
    g.height = static_cast<int>(x.dim(-2));
    g.width = static_cast<int>(x.dim(-1));
    std::int64_t planes = 1;
    for (int i = 0; i < x.ndim() - 2; ++i) planes *= x.dim(i);
    g.planes = static_cast<int>(planes);
    return g;
}

Shape with_spatial(const Shape& s, std::int64_t h, std::int64_t w) {
    Shape r = s;
    r[r.size() - 2] = h;
    r[r.size() - 1] = w;
    return r;
}
}  // namespace

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x) {
    const auto g = planes_of(x, "max_pool2");
    require(g.height % 2 == 0 && g.width % 2 == 0,
            "max_pool2: spatial dims must be even, got " + shape_str(x.shape()));
    Shape out_shape = with_spatial(x.shape(), g.height / 2, g.width / 2);
    const std::size_t n_out = static_cast<std::size_t>(shape_numel(out_shape));
    std::vector<T> y(n_out);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(n_out);
    kernels::parallel::max_pool2_forward<T>(g, x.data().data(), y.data(), argmax->data());
    return make_result<T>(std::move(out_shape), std::move(y), "max_pool2", {x}, [g, argmax](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        std::vector<T> dx(in.data.size());
        kernels::parallel::max_pool2_backward<T>(g, out.grad.data(), argmax->data(), dx.data());
        add_into(in, dx);
    });
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
    const auto g = planes_of(x, "avg_pool2");
    const int oh = g.height / 2, ow = g.width / 2;
    require(oh > 0 && ow > 0, "avg_pool2: input too small " + shape_str(x.shape()));
    Shape out_shape = with_spatial(x.shape(), oh, ow);
    std::vector<T> y(static_cast<std::size_t>(shape_numel(out_shape)));
    const T* px = x.data().data();
    for (int p = 0; p < g.planes; ++p)
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                const std::int64_t r0 = (static_cast<std::int64_t>(p) * g.height + 2 * i) * g.width + 2 * j;
                const std::int64_t r1 = r0 + g.width;
                y[(static_cast<std::size_t>(p) * oh + i) * ow + j] =
                    T(0.25) * (px[r0] + px[r0 + 1] + px[r1] + px[r1 + 1]);
            }
    return make_result<T>(std::move(out_shape), std::move(y), "avg_pool2", {x}, [g, oh, ow](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        auto& gx = in.grad_buffer();
        for (int p = 0; p < g.planes; ++p)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    const T d = T(0.25) * out.grad[(static_cast<std::size_t>(p) * oh + i) * ow + j];
                    const std::int64_t r0 = (static_cast<std::int64_t>(p) * g.height + 2 * i) * g.width + 2 * j;
                    const std::int64_t r1 = r0 + g.width;
                    gx[r0] += d;
                    gx[r0 + 1] += d;
                    gx[r1] += d;
                    gx[r1 + 1] += d;
                }
    });
}

template <typename T>
Tensor<T> upsample_bilinear2(const Tensor<T>& x) {
    const auto g = planes_of(x, "upsample_bilinear2");
    Shape out_shape = with_spatial(x.shape(), 2 * g.height, 2 * g.width);
    std::vector<T> y(static_cast<std::size_t>(shape_numel(out_shape)));
    kernels::parallel::upsample_bilinear2_forward<T>(g, x.data().data(), y.data());
    return make_result<T>(std::move(out_shape), std::move(y), "upsample_bilinear2", {x}, [g](const Impl<T>& out) {
        auto& in = input(out, 0);
        if (!in.requires_grad) return;
        std::vector<T> dx(in.data.size());
        kernels::parallel::upsample_bilinear2_backward<T>(g, out.grad.data(), dx.data());
        add_into(in, dx);
    });
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
    require(x.ndim() >= 2 && s.ndim() == x.ndim() - 2, "scale_channels: need x [..,C,H,W] and s [..,C]");
    for (int i = 0; i < s.ndim(); ++i)
        require(s.dim(i) == x.dim(i), "scale_channels: " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
    const std::int64_t planes = s.numel();
    const std::int64_t hw = x.numel() / std::max<std::int64_t>(planes, 1);
    std::vector<T> y(static_cast<std::size_t>(x.numel()));
    const T* px = x.data().data();
    const T* ps = s.data().data();
#pragma omp parallel for if (x.numel() > kParallelMin)
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < hw; ++i) y[p * hw + i] = px[p * hw + i] * ps[p];
    return make_result<T>(x.shape(), std::move(y), "scale_channels", {x, s}, [planes, hw](const Impl<T>& out) {
        auto& ix = input(out, 0);
        auto& is = input(out, 1);
        if (ix.requires_grad) {
            auto& g = ix.grad_buffer();
#pragma omp parallel for if (planes * hw > kParallelMin)
            for (std::int64_t p = 0; p < planes; ++p)
                for (std::int64_t i = 0; i < hw; ++i) g[p * hw + i] += out.grad[p * hw + i] * is.data[p];
        }
        if (is.requires_grad) {
            auto& g = is.grad_buffer();
#pragma omp parallel for if (planes * hw > kParallelMin)
            for (std::int64_t p = 0; p < planes; ++p) {
                T acc = 0;
                for (std::int64_t i = 0; i < hw; ++i) acc += out.grad[p * hw + i] * ix.data[p * hw + i];
                g[p] += acc;
            }
        }
    });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Mode mode, T eps, T momentum) {
    require(x.ndim() == 4, "batch_norm: input must be [B,C,H,W], got " + shape_str(x.shape()));
    require(eps > T(0), "batch_norm: eps must be positive");
    const std::int64_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
    require(gamma.ndim() == 1 && gamma.dim(0) == channels && beta.ndim() == 1 && beta.dim(0) == channels,
            "batch_norm: gamma/beta must be [" + std::to_string(channels) + "]");
    const std::int64_t count = batch * hw;
    const bool training = mode == Mode::train;
    if (!training)
        require(state.populated && state.running_mean.defined() && state.running_mean.numel() == channels,
                "batch_norm: eval mode requires populated running statistics");
    if (!state.running_mean.defined()) {
        state.running_mean = Tensor<T>::zeros({channels});
        state.running_var = Tensor<T>::full({channels}, T(1));
    }
    require(state.running_mean.numel() == channels && state.running_var.numel() == channels,
            "batch_norm: running statistics have wrong channel count");

    std::vector<T> y(static_cast<std::size_t>(x.numel()));
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(channels));
    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pb = beta.data().data();
    T* rm = state.running_mean.data().data();
    T* rv = state.running_var.data().data();

#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < channels; ++c) {
        double mu, var;
        if (training) {
            double acc = 0;
            for (std::int64_t b = 0; b < batch; ++b) {
                const T* plane = px + (b * channels + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) acc += plane[i];
            }
            mu = acc / static_cast<double>(count);
            double sq = 0;
            for (std::int64_t b = 0; b < batch; ++b) {
                const T* plane = px + (b * channels + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const double d = plane[i] - mu;
                    sq += d * d;
                }
            }
            var = sq / static_cast<double>(count);
            const double unbiased = count > 1 ? var * count / (count - 1) : var;
            rm[c] = static_cast<T>((1 - momentum) * rm[c] + momentum * mu);
            rv[c] = static_cast<T>((1 - momentum) * rv[c] + momentum * unbiased);
        } else {
            mu = rm[c];
            var = rv[c];
        }
        const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*inv_std)[static_cast<std::size_t>(c)] = istd;
        const T m = static_cast<T>(mu);
        for (std::int64_t b = 0; b < batch; ++b) {
            const std::int64_t off = (b * channels + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                const T h = (px[off + i] - m) * istd;
                (*xhat)[static_cast<std::size_t>(off + i)] = h;
                y[static_cast<std::size_t>(off + i)] = pg[c] * h + pb[c];
            }
        }
    }
    if (training) state.populated = true;

    return make_result<T>(x.shape(), std::move(y), "batch_norm", {x, gamma, beta},
                          [xhat, inv_std, batch, channels, hw, count, training](const Impl<T>& out) {
        auto& ix = input(out, 0);
        auto& ig = input(out, 1);
        auto& ib = input(out, 2);
        std::vector<T>* gx = ix.requires_grad ? &ix.grad_buffer() : nullptr;
        std::vector<T>* gg = ig.requires_grad ? &ig.grad_buffer() : nullptr;
        std::vector<T>* gb = ib.requires_grad ? &ib.grad_buffer() : nullptr;
#pragma omp parallel for schedule(static)
        for (std::int64_t c = 0; c < channels; ++c) {
            double sum_dy = 0, sum_dy_xhat = 0;
            for (std::int64_t b = 0; b < batch; ++b) {
                const std::int64_t off = (b * channels + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    sum_dy += out.grad[off + i];
                    sum_dy_xhat += out.grad[off + i] * (*xhat)[off + i];
                }
            }
            if (gg) (*gg)[c] += static_cast<T>(sum_dy_xhat);
            if (gb) (*gb)[c] += static_cast<T>(sum_dy);
            if (!gx) continue;
            const T gamma_c = ig.data[c];
            const T istd = (*inv_std)[c];
            if (training) {
                const double n = static_cast<double>(count);
                const double mean_dy = sum_dy / n;
                const double mean_dy_xhat = sum_dy_xhat / n;
                for (std::int64_t b = 0; b < batch; ++b) {
                    const std::int64_t off = (b * channels + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i)
                        (*gx)[off + i] += static_cast<T>(
                            gamma_c * istd * (out.grad[off + i] - mean_dy - (*xhat)[off + i] * mean_dy_xhat));
                }
            } else {
                for (std::int64_t b = 0; b < batch; ++b) {
                    const std::int64_t off = (b * channels + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) (*gx)[off + i] += out.grad[off + i] * gamma_c * istd;
                }
            }
        }
    });
}

#define SGSEG_INSTANTIATE_OPS(T)                                                                        \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                 \
    template Tensor<T> mul_scalar(const Tensor<T>&, T);                                                 \
    template Tensor<T> div_scalar(const Tensor<T>&, T);                                                 \
    template Tensor<T> rsub_scalar(T, const Tensor<T>&);                                                \
    template Tensor<T> pow_scalar(const Tensor<T>&, T);                                                 \
    template Tensor<T> square(const Tensor<T>&);                                                        \
    template Tensor<T> log(const Tensor<T>&);                                                           \
    template Tensor<T> relu(const Tensor<T>&);                                                          \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                       \
    template Tensor<T> clamp(const Tensor<T>&, T, T);                                                   \
    template Tensor<T> add_n(const std::vector<Tensor<T>>&);                                            \
    template Tensor<T> sum(const Tensor<T>&);                                                           \
    template Tensor<T> mean(const Tensor<T>&);                                                          \
    template Tensor<T> sum_last(const Tensor<T>&, int);                                                 \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                               \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                      \
    template Tensor<T> stack(const std::vector<Tensor<T>>&, int);                                       \
    template Tensor<T> select(const Tensor<T>&, int, std::int64_t);                                     \
    template Tensor<T> softmax(const Tensor<T>&, int);                                                  \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);          \
    template Tensor<T> fully_connected(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
    template Tensor<T> max_pool2(const Tensor<T>&);                                                     \
    template Tensor<T> avg_pool2(const Tensor<T>&);                                                     \
    template Tensor<T> upsample_bilinear2(const Tensor<T>&);                                            \
    template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                  BatchNormState<T>&, Mode, T, T);

SGSEG_INSTANTIATE_OPS(float)
SGSEG_INSTANTIATE_OPS(double)

#undef SGSEG_INSTANTIATE_OPS

}  // namespace sgseg
