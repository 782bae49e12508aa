#pragma once

// Differentiable tensor ops. Every function here records a backward closure
// when gradient recording is enabled and an input requires a gradient.

#include <vector>

#include "sgseg/tensor.hpp"

namespace sgseg {

enum class Mode { train, eval };

// ---- elementwise (identical shapes) ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T c);
template <typename T> Tensor<T> div_scalar(const Tensor<T>& a, T c);
// c - a
template <typename T> Tensor<T> rsub_scalar(T c, const Tensor<T>& a);
template <typename T> Tensor<T> pow_scalar(const Tensor<T>& a, T exponent);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
// Gradient passes through where lo <= a <= hi and is zero outside.
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);
// Sum of n same-shape tensors, accumulated left to right.
template <typename T> Tensor<T> add_n(const std::vector<Tensor<T>>& xs);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// ---- reductions ----
template <typename T> Tensor<T> sum(const Tensor<T>& a);   // -> scalar
template <typename T> Tensor<T> mean(const Tensor<T>& a);  // -> scalar
// Sum over the last `count` axes.
template <typename T> Tensor<T> sum_last(const Tensor<T>& a, int count);
// [.., C, H, W] -> [.., C]: per-channel spatial mean.
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& a);

// ---- shape ----
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);
template <typename T> Tensor<T> stack(const std::vector<Tensor<T>>& xs, int axis);
// Removes `axis` by picking one index along it.
template <typename T> Tensor<T> select(const Tensor<T>& a, int axis, std::int64_t index);

// ---- nn ----
template <typename T> Tensor<T> softmax(const Tensor<T>& a, int axis);
// x: [B,Cin,H,W] or [Cin,H,W]; w: [Cout,Cin,k,k]; bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride = 1,
                 int pad = 0);
// x: [B,Din] or [Din]; w: [Dout,Din]; bias: [Dout] or undefined.
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
template <typename T> Tensor<T> max_pool2(const Tensor<T>& x);
// 2x2 mean pooling, stride 2; a trailing odd row/column is dropped.
template <typename T> Tensor<T> avg_pool2(const Tensor<T>& x);
template <typename T> Tensor<T> upsample_bilinear2(const Tensor<T>& x);
// x: [B,C,H,W] scaled by s: [B,C] (or [C,H,W] by [C]).
template <typename T> Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);

template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    bool populated = false;
};

// x: [B,C,H,W]. Train mode normalizes with batch statistics and updates the
// running estimates (unbiased variance) with `momentum`.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Mode mode, T eps = T(1e-5), T momentum = T(0.1));

}  // namespace sgseg
