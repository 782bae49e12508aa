#pragma once

// Compute kernels behind the differentiable ops.
//
// `reference` holds straightforward serial loop nests; they are kept for
// testing and benchmarking. `parallel` holds the OpenMP versions used by the
// ops. Every parallel kernel assigns each output element to exactly one
// thread and reduces in a fixed order, so results do not depend on the
// thread count.

#include <cstdint>

namespace sgseg::kernels {

struct ConvGeometry {
    int batch = 1;
    int in_channels = 1;
    int height = 1;
    int width = 1;
    int out_channels = 1;
    int kernel = 1;
    int stride = 1;
    int pad = 0;

    int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
    int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

struct PlaneGeometry {
    int planes = 1;  // batch * channels
    int height = 1;
    int width = 1;
};

namespace reference {

// y[b,o,i,j] = bias[o] + sum_{c,u,v} w[o,c,u,v] x[b,c,i*s+u-p,j*s+v-p]
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);
// dx = dL/dx (overwritten)
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx);
// dw, dbias overwritten; dbias may be null
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* dbias);

// 2x2 / stride 2 max; argmax holds the flat input index per output.
template <typename T>
void max_pool2_forward(const PlaneGeometry& g, const T* x, T* y, std::int64_t* argmax);
template <typename T>
void max_pool2_backward(const PlaneGeometry& g, const T* dy, const std::int64_t* argmax, T* dx);

// 2x bilinear, half-pixel centres (align_corners = false), edge clamped.
template <typename T>
void upsample_bilinear2_forward(const PlaneGeometry& g, const T* x, T* y);
template <typename T>
void upsample_bilinear2_backward(const PlaneGeometry& g, const T* dy, T* dx);

// c[m,n] = a[m,k] b[k,n]
template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c);

}  // namespace reference

namespace parallel {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* dbias);

template <typename T>
void max_pool2_forward(const PlaneGeometry& g, const T* x, T* y, std::int64_t* argmax);
template <typename T>
void max_pool2_backward(const PlaneGeometry& g, const T* dy, const std::int64_t* argmax, T* dx);

template <typename T>
void upsample_bilinear2_forward(const PlaneGeometry& g, const T* x, T* y);
template <typename T>
void upsample_bilinear2_backward(const PlaneGeometry& g, const T* dy, T* dx);

// c[m,n] = a[m,k] b[k,n]           (overwrites c)
template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c);
// c[m,n] = a[k,m]^T b[k,n]         (overwrites c)
template <typename T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c);
// c[m,n] = a[m,k] b[n,k]^T         (overwrites c)
template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c);

template <typename T>
void im2col(const ConvGeometry& g, const T* x_sample, T* col);
// Accumulates col back into x_sample (+=).
template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* x_sample);

}  // namespace parallel

// Thread control for the parallel kernels. A value of 1 forces serial
// execution of every OpenMP region.
void set_num_threads(int n);
int num_threads();

}  // namespace sgseg::kernels
