#include "sgseg/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sgseg::kernels {

namespace {

struct AxisTap {
    int lo;
    int hi;
    double w_lo;
    double w_hi;
};

// Half-pixel-centre source taps for a 2x upsampled axis.
std::vector<AxisTap> bilinear_taps(int in_size) {
    std::vector<AxisTap> taps(static_cast<std::size_t>(2 * in_size));
    for (int d = 0; d < 2 * in_size; ++d) {
        double src = (d + 0.5) * 0.5 - 0.5;
        if (src < 0.0) src = 0.0;
        int lo = static_cast<int>(src);
        if (lo > in_size - 1) lo = in_size - 1;
        int hi = std::min(lo + 1, in_size - 1);
        double frac = src - lo;
        taps[static_cast<std::size_t>(d)] = {lo, hi, 1.0 - frac, frac};
    }
    return taps;
}

}  // namespace

void set_num_threads(int n) {
#ifdef _OPENMP
    omp_set_num_threads(std::max(1, n));
#else
    (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// ---------------------------------------------------------------------------
// reference
// ---------------------------------------------------------------------------
namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
    const int oh = g.out_height(), ow = g.out_width();
    for (int b = 0; b < g.batch; ++b)
        for (int o = 0; o < g.out_channels; ++o)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    T acc = bias ? bias[o] : T(0);
                    for (int c = 0; c < g.in_channels; ++c)
                        for (int u = 0; u < g.kernel; ++u)
                            for (int v = 0; v < g.kernel; ++v) {
                                int r = i * g.stride + u - g.pad;
                                int s = j * g.stride + v - g.pad;
                                if (r < 0 || r >= g.height || s < 0 || s >= g.width) continue;
                                acc += w[((o * g.in_channels + c) * g.kernel + u) * g.kernel + v] *
                                       x[((b * g.in_channels + c) * g.height + r) * g.width + s];
                            }
                    y[((b * g.out_channels + o) * oh + i) * ow + j] = acc;
                }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
    const int oh = g.out_height(), ow = g.out_width();
    std::fill(dx, dx + static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width, T(0));
    for (int b = 0; b < g.batch; ++b)
        for (int o = 0; o < g.out_channels; ++o)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    T d = dy[((b * g.out_channels + o) * oh + i) * ow + j];
                    for (int c = 0; c < g.in_channels; ++c)
                        for (int u = 0; u < g.kernel; ++u)
                            for (int v = 0; v < g.kernel; ++v) {
                                int r = i * g.stride + u - g.pad;
                                int s = j * g.stride + v - g.pad;
                                if (r < 0 || r >= g.height || s < 0 || s >= g.width) continue;
                                dx[((b * g.in_channels + c) * g.height + r) * g.width + s] +=
                                    d * w[((o * g.in_channels + c) * g.kernel + u) * g.kernel + v];
                            }
                }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* dbias) {
    const int oh = g.out_height(), ow = g.out_width();
    std::fill(dw, dw + static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel,
              T(0));
    if (dbias) std::fill(dbias, dbias + g.out_channels, T(0));
    for (int b = 0; b < g.batch; ++b)
        for (int o = 0; o < g.out_channels; ++o)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    T d = dy[((b * g.out_channels + o) * oh + i) * ow + j];
                    if (dbias) dbias[o] += d;
                    for (int c = 0; c < g.in_channels; ++c)
                        for (int u = 0; u < g.kernel; ++u)
                            for (int v = 0; v < g.kernel; ++v) {
                                int r = i * g.stride + u - g.pad;
                                int s = j * g.stride + v - g.pad;
                                if (r < 0 || r >= g.height || s < 0 || s >= g.width) continue;
                                dw[((o * g.in_channels + c) * g.kernel + u) * g.kernel + v] +=
                                    d * x[((b * g.in_channels + c) * g.height + r) * g.width + s];
                            }
                }
}

template <typename T>
void max_pool2_forward(const PlaneGeometry& g, const T* x, T* y, std::int64_t* argmax) {
    const int oh = g.height / 2, ow = g.width / 2;
    for (int p = 0; p < g.planes; ++p)
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                std::int64_t best = -1;
                T best_v{};
                for (int u = 0; u < 2; ++u)
                    for (int v = 0; v < 2; ++v) {
                        std::int64_t idx = (static_cast<std::int64_t>(p) * g.height + 2 * i + u) * g.width +
                                           2 * j + v;
                        if (best < 0 || x[idx] > best_v) {
                            best = idx;
                            best_v = x[idx];
                        }
                    }
                std::int64_t o = (static_cast<std::int64_t>(p) * oh + i) * ow + j;
                y[o] = best_v;
                argmax[o] = best;
            }
}

template <typename T>
void max_pool2_backward(const PlaneGeometry& g, const T* dy, const std::int64_t* argmax, T* dx) {
    const std::int64_t n_in = static_cast<std::int64_t>(g.planes) * g.height * g.width;
    const std::int64_t n_out = static_cast<std::int64_t>(g.planes) * (g.height / 2) * (g.width / 2);
    std::fill(dx, dx + n_in, T(0));
    for (std::int64_t o = 0; o < n_out; ++o) dx[argmax[o]] += dy[o];
}

template <typename T>
void upsample_bilinear2_forward(const PlaneGeometry& g, const T* x, T* y) {
    const int oh = 2 * g.height, ow = 2 * g.width;
    for (int p = 0; p < g.planes; ++p)
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                double sy = std::max(0.0, (i + 0.5) * g.height / oh - 0.5);
                double sx = std::max(0.0, (j + 0.5) * g.width / ow - 0.5);
                int y0 = std::min(static_cast<int>(sy), g.height - 1);
                int x0 = std::min(static_cast<int>(sx), g.width - 1);
                int y1 = std::min(y0 + 1, g.height - 1);
                int x1 = std::min(x0 + 1, g.width - 1);
                double fy = sy - y0, fx = sx - x0;
                const T* plane = x + static_cast<std::int64_t>(p) * g.height * g.width;
                double v = (1 - fy) * ((1 - fx) * plane[y0 * g.width + x0] + fx * plane[y0 * g.width + x1]) +
                           fy * ((1 - fx) * plane[y1 * g.width + x0] + fx * plane[y1 * g.width + x1]);
                y[(static_cast<std::int64_t>(p) * oh + i) * ow + j] = static_cast<T>(v);
            }
}

template <typename T>
void upsample_bilinear2_backward(const PlaneGeometry& g, const T* dy, T* dx) {
    const int oh = 2 * g.height, ow = 2 * g.width;
    std::fill(dx, dx + static_cast<std::int64_t>(g.planes) * g.height * g.width, T(0));
    for (int p = 0; p < g.planes; ++p)
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                double sy = std::max(0.0, (i + 0.5) * g.height / oh - 0.5);
                double sx = std::max(0.0, (j + 0.5) * g.width / ow - 0.5);
                int y0 = std::min(static_cast<int>(sy), g.height - 1);
                int x0 = std::min(static_cast<int>(sx), g.width - 1);
                int y1 = std::min(y0 + 1, g.height - 1);
                int x1 = std::min(x0 + 1, g.width - 1);
                double fy = sy - y0, fx = sx - x0;
                T* plane = dx + static_cast<std::int64_t>(p) * g.height * g.width;
                double d = dy[(static_cast<std::int64_t>(p) * oh + i) * ow + j];
                plane[y0 * g.width + x0] += static_cast<T>((1 - fy) * (1 - fx) * d);
                plane[y0 * g.width + x1] += static_cast<T>((1 - fy) * fx * d);
                plane[y1 * g.width + x0] += static_cast<T>(fy * (1 - fx) * d);
                plane[y1 * g.width + x1] += static_cast<T>(fy * fx * d);
            }
}

template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            T acc = 0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
}

}  // namespace reference

// ---------------------------------------------------------------------------
// parallel
// ---------------------------------------------------------------------------
namespace parallel {

namespace {
constexpr int kColBlock = 512;

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }
}  // namespace

template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c) {
    const int n_blocks = (n + kColBlock - 1) / kColBlock;
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < m; ++i)
        for (int jb = 0; jb < n_blocks; ++jb) {
            const int j0 = jb * kColBlock;
            const int j1 = std::min(n, j0 + kColBlock);
            T* __restrict crow = c + static_cast<std::int64_t>(i) * n;
            for (int j = j0; j < j1; ++j) crow[j] = T(0);
            for (int p = 0; p < k; ++p) {
                const T av = a[static_cast<std::int64_t>(i) * k + p];
                const T* __restrict brow = b + static_cast<std::int64_t>(p) * n;
                for (int j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
}

template <typename T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c) {
    const int n_blocks = (n + kColBlock - 1) / kColBlock;
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < m; ++i)
        for (int jb = 0; jb < n_blocks; ++jb) {
            const int j0 = jb * kColBlock;
            const int j1 = std::min(n, j0 + kColBlock);
            T* __restrict crow = c + static_cast<std::int64_t>(i) * n;
            for (int j = j0; j < j1; ++j) crow[j] = T(0);
            for (int p = 0; p < k; ++p) {
                const T av = a[static_cast<std::int64_t>(p) * m + i];
                const T* __restrict brow = b + static_cast<std::int64_t>(p) * n;
                for (int j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
}

template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c) {
    constexpr int kLanes = 8;
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            const T* __restrict ar = a + static_cast<std::int64_t>(i) * k;
            const T* __restrict br = b + static_cast<std::int64_t>(j) * k;
            T lane[kLanes] = {};
            int p = 0;
            for (; p + kLanes <= k; p += kLanes)
                for (int l = 0; l < kLanes; ++l) lane[l] += ar[p + l] * br[p + l];
            T acc = 0;
            for (int l = 0; l < kLanes; ++l) acc += lane[l];
            for (; p < k; ++p) acc += ar[p] * br[p];
            c[static_cast<std::int64_t>(i) * n + j] = acc;
        }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
    const int oh = g.out_height(), ow = g.out_width();
    const int kk = g.kernel * g.kernel;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < g.in_channels; ++c) {
        const T* plane = x + static_cast<std::int64_t>(c) * g.height * g.width;
        for (int u = 0; u < g.kernel; ++u)
            for (int v = 0; v < g.kernel; ++v) {
                T* row = col + (static_cast<std::int64_t>(c) * kk + u * g.kernel + v) * oh * ow;
                for (int i = 0; i < oh; ++i) {
                    const int r = i * g.stride + u - g.pad;
                    T* out = row + static_cast<std::int64_t>(i) * ow;
                    if (r < 0 || r >= g.height) {
                        std::fill(out, out + ow, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::int64_t>(r) * g.width;
                    for (int j = 0; j < ow; ++j) {
                        const int s = j * g.stride + v - g.pad;
                        out[j] = (s >= 0 && s < g.width) ? src[s] : T(0);
                    }
                }
            }
    }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
    const int oh = g.out_height(), ow = g.out_width();
    const int kk = g.kernel * g.kernel;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < g.in_channels; ++c) {
        T* plane = x + static_cast<std::int64_t>(c) * g.height * g.width;
        for (int u = 0; u < g.kernel; ++u)
            for (int v = 0; v < g.kernel; ++v) {
                const T* row = col + (static_cast<std::int64_t>(c) * kk + u * g.kernel + v) * oh * ow;
                for (int i = 0; i < oh; ++i) {
                    const int r = i * g.stride + u - g.pad;
                    if (r < 0 || r >= g.height) continue;
                    T* dst = plane + static_cast<std::int64_t>(r) * g.width;
                    const T* in = row + static_cast<std::int64_t>(i) * ow;
                    for (int j = 0; j < ow; ++j) {
                        const int s = j * g.stride + v - g.pad;
                        if (s >= 0 && s < g.width) dst[s] += in[j];
                    }
                }
            }
    }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
    const int p = g.out_height() * g.out_width();
    const int ckk = g.in_channels * g.kernel * g.kernel;
    const std::int64_t x_stride = static_cast<std::int64_t>(g.in_channels) * g.height * g.width;
    const std::int64_t y_stride = static_cast<std::int64_t>(g.out_channels) * p;
    std::vector<T> col;
    if (!is_pointwise(g)) col.resize(static_cast<std::size_t>(ckk) * p);
    for (int b = 0; b < g.batch; ++b) {
        const T* xb = x + b * x_stride;
        T* yb = y + b * y_stride;
        const T* colp = xb;
        if (!is_pointwise(g)) {
            im2col(g, xb, col.data());
            colp = col.data();
        }
        gemm(g.out_channels, p, ckk, w, colp, yb);
        if (bias) {
#pragma omp parallel for schedule(static)
            for (int o = 0; o < g.out_channels; ++o) {
                T* row = yb + static_cast<std::int64_t>(o) * p;
                for (int j = 0; j < p; ++j) row[j] += bias[o];
            }
        }
    }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
    const int p = g.out_height() * g.out_width();
    const int ckk = g.in_channels * g.kernel * g.kernel;
    const std::int64_t x_stride = static_cast<std::int64_t>(g.in_channels) * g.height * g.width;
    const std::int64_t y_stride = static_cast<std::int64_t>(g.out_channels) * p;
    if (is_pointwise(g)) {
        for (int b = 0; b < g.batch; ++b)
            gemm_tn(ckk, p, g.out_channels, w, dy + b * y_stride, dx + b * x_stride);
        return;
    }
    std::vector<T> dcol(static_cast<std::size_t>(ckk) * p);
    std::fill(dx, dx + g.batch * x_stride, T(0));
    for (int b = 0; b < g.batch; ++b) {
        gemm_tn(ckk, p, g.out_channels, w, dy + b * y_stride, dcol.data());
        col2im(g, dcol.data(), dx + b * x_stride);
    }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* dbias) {
    const int p = g.out_height() * g.out_width();
    const int ckk = g.in_channels * g.kernel * g.kernel;
    const std::int64_t x_stride = static_cast<std::int64_t>(g.in_channels) * g.height * g.width;
    const std::int64_t y_stride = static_cast<std::int64_t>(g.out_channels) * p;
    const std::size_t w_size = static_cast<std::size_t>(g.out_channels) * ckk;
    std::vector<T> col;
    if (!is_pointwise(g)) col.resize(static_cast<std::size_t>(ckk) * p);
    std::vector<T> partial(w_size);
    std::fill(dw, dw + w_size, T(0));
    if (dbias) std::fill(dbias, dbias + g.out_channels, T(0));
    for (int b = 0; b < g.batch; ++b) {
        const T* xb = x + b * x_stride;
        const T* dyb = dy + b * y_stride;
        const T* colp = xb;
        if (!is_pointwise(g)) {
            im2col(g, xb, col.data());
            colp = col.data();
        }
        gemm_nt(g.out_channels, ckk, p, dyb, colp, partial.data());
#pragma omp parallel for schedule(static)
        for (int o = 0; o < g.out_channels; ++o) {
            for (int q = 0; q < ckk; ++q)
                dw[static_cast<std::int64_t>(o) * ckk + q] += partial[static_cast<std::size_t>(o) * ckk + q];
            if (dbias) {
                const T* row = dyb + static_cast<std::int64_t>(o) * p;
                T acc = 0;
                for (int j = 0; j < p; ++j) acc += row[j];
                dbias[o] += acc;
            }
        }
    }
}

template <typename T>
void max_pool2_forward(const PlaneGeometry& g, const T* x, T* y, std::int64_t* argmax) {
    const int oh = g.height / 2, ow = g.width / 2;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < g.planes; ++p) {
        const std::int64_t base = static_cast<std::int64_t>(p) * g.height * g.width;
        for (int i = 0; i < oh; ++i) {
            const std::int64_t r0 = base + static_cast<std::int64_t>(2 * i) * g.width;
            const std::int64_t r1 = r0 + g.width;
            std::int64_t o = (static_cast<std::int64_t>(p) * oh + i) * ow;
            for (int j = 0; j < ow; ++j, ++o) {
                std::int64_t best = r0 + 2 * j;
                T v = x[best];
                if (x[r0 + 2 * j + 1] > v) { best = r0 + 2 * j + 1; v = x[best]; }
                if (x[r1 + 2 * j] > v) { best = r1 + 2 * j; v = x[best]; }
                if (x[r1 + 2 * j + 1] > v) { best = r1 + 2 * j + 1; v = x[best]; }
                y[o] = v;
                argmax[o] = best;
            }
        }
    }
}

template <typename T>
void max_pool2_backward(const PlaneGeometry& g, const T* dy, const std::int64_t* argmax, T* dx) {
    const std::int64_t in_plane = static_cast<std::int64_t>(g.height) * g.width;
    const std::int64_t out_plane = static_cast<std::int64_t>(g.height / 2) * (g.width / 2);
#pragma omp parallel for schedule(static)
    for (int p = 0; p < g.planes; ++p) {
        std::fill(dx + p * in_plane, dx + (p + 1) * in_plane, T(0));
        for (std::int64_t o = p * out_plane; o < (p + 1) * out_plane; ++o) dx[argmax[o]] += dy[o];
    }
}

template <typename T>
void upsample_bilinear2_forward(const PlaneGeometry& g, const T* x, T* y) {
    const auto ty = bilinear_taps(g.height);
    const auto tx = bilinear_taps(g.width);
    const int oh = 2 * g.height, ow = 2 * g.width;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < g.planes; ++p) {
        const T* plane = x + static_cast<std::int64_t>(p) * g.height * g.width;
        T* out = y + static_cast<std::int64_t>(p) * oh * ow;
        for (int i = 0; i < oh; ++i) {
            const AxisTap& a = ty[static_cast<std::size_t>(i)];
            const T* rlo = plane + static_cast<std::int64_t>(a.lo) * g.width;
            const T* rhi = plane + static_cast<std::int64_t>(a.hi) * g.width;
            for (int j = 0; j < ow; ++j) {
                const AxisTap& b = tx[static_cast<std::size_t>(j)];
                double top = b.w_lo * rlo[b.lo] + b.w_hi * rlo[b.hi];
                double bot = b.w_lo * rhi[b.lo] + b.w_hi * rhi[b.hi];
                out[static_cast<std::int64_t>(i) * ow + j] = static_cast<T>(a.w_lo * top + a.w_hi * bot);
            }
        }
    }
}

template <typename T>
void upsample_bilinear2_backward(const PlaneGeometry& g, const T* dy, T* dx) {
    const auto ty = bilinear_taps(g.height);
    const auto tx = bilinear_taps(g.width);
    const int oh = 2 * g.height, ow = 2 * g.width;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < g.planes; ++p) {
        T* plane = dx + static_cast<std::int64_t>(p) * g.height * g.width;
        const T* in = dy + static_cast<std::int64_t>(p) * oh * ow;
        std::fill(plane, plane + static_cast<std::int64_t>(g.height) * g.width, T(0));
        for (int i = 0; i < oh; ++i) {
            const AxisTap& a = ty[static_cast<std::size_t>(i)];
            T* rlo = plane + static_cast<std::int64_t>(a.lo) * g.width;
            T* rhi = plane + static_cast<std::int64_t>(a.hi) * g.width;
            for (int j = 0; j < ow; ++j) {
                const AxisTap& b = tx[static_cast<std::size_t>(j)];
                const double d = in[static_cast<std::int64_t>(i) * ow + j];
                rlo[b.lo] += static_cast<T>(a.w_lo * b.w_lo * d);
                rlo[b.hi] += static_cast<T>(a.w_lo * b.w_hi * d);
                rhi[b.lo] += static_cast<T>(a.w_hi * b.w_lo * d);
                rhi[b.hi] += static_cast<T>(a.w_hi * b.w_hi * d);
            }
        }
    }
}

}  // namespace parallel

#define SGSEG_INSTANTIATE_KERNELS(NS, T)                                                              \
    template void NS::conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);      \
    template void NS::conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);         \
    template void NS::conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*, T*);    \
    template void NS::max_pool2_forward<T>(const PlaneGeometry&, const T*, T*, std::int64_t*);       \
    template void NS::max_pool2_backward<T>(const PlaneGeometry&, const T*, const std::int64_t*, T*); \
    template void NS::upsample_bilinear2_forward<T>(const PlaneGeometry&, const T*, T*);             \
    template void NS::upsample_bilinear2_backward<T>(const PlaneGeometry&, const T*, T*);            \
    template void NS::gemm<T>(int, int, int, const T*, const T*, T*);

SGSEG_INSTANTIATE_KERNELS(reference, float)
SGSEG_INSTANTIATE_KERNELS(reference, double)
SGSEG_INSTANTIATE_KERNELS(parallel, float)
SGSEG_INSTANTIATE_KERNELS(parallel, double)

template void parallel::gemm_tn<float>(int, int, int, const float*, const float*, float*);
template void parallel::gemm_tn<double>(int, int, int, const double*, const double*, double*);
template void parallel::gemm_nt<float>(int, int, int, const float*, const float*, float*);
template void parallel::gemm_nt<double>(int, int, int, const double*, const double*, double*);
template void parallel::im2col<float>(const ConvGeometry&, const float*, float*);
template void parallel::im2col<double>(const ConvGeometry&, const double*, double*);
template void parallel::col2im<float>(const ConvGeometry&, const float*, float*);
template void parallel::col2im<double>(const ConvGeometry&, const double*, double*);

#undef SGSEG_INSTANTIATE_KERNELS

}  // namespace sgseg::kernels
