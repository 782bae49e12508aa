#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "sgseg/kernels.hpp"
#include "sgseg/rng.hpp"

using namespace sgseg;
using namespace sgseg::kernels;

namespace {

template <typename T>
std::vector<T> rand_vec(std::size_t n, Rng& rng) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-1, 1));
    return v;
}

template <typename T>
double max_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

template <typename T>
bool bitwise(const std::vector<T>& a, const std::vector<T>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

ConvGeometry random_geometry(Rng& rng) {
    ConvGeometry g;
    g.batch = 1 + static_cast<int>(rng.index(3));
    g.in_channels = 1 + static_cast<int>(rng.index(5));
    g.out_channels = 1 + static_cast<int>(rng.index(6));
    g.height = 3 + static_cast<int>(rng.index(14));
    g.width = 3 + static_cast<int>(rng.index(14));
    g.kernel = std::min({1 + 2 * static_cast<int>(rng.index(3)), g.height, g.width});
    g.stride = 1 + static_cast<int>(rng.index(2));
    g.pad = static_cast<int>(rng.index(static_cast<std::uint64_t>(g.kernel / 2 + 1)));
    return g;
}

struct ConvOut {
    std::vector<double> y, dx, dw, db;
};

ConvOut run_conv(bool parallel_impl, const ConvGeometry& g, const std::vector<double>& x, const std::vector<double>& w,
                 const std::vector<double>& b, const std::vector<double>& dy) {
    ConvOut o;
    const std::size_t ny = static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width();
    o.y.assign(ny, 0);
    o.dx.assign(x.size(), 0);
    o.dw.assign(w.size(), 0);
    o.db.assign(b.size(), 0);
    if (parallel_impl) {
        parallel::conv2d_forward(g, x.data(), w.data(), b.data(), o.y.data());
        parallel::conv2d_backward_input(g, dy.data(), w.data(), o.dx.data());
        parallel::conv2d_backward_weight(g, x.data(), dy.data(), o.dw.data(), o.db.data());
    } else {
        reference::conv2d_forward(g, x.data(), w.data(), b.data(), o.y.data());
        reference::conv2d_backward_input(g, dy.data(), w.data(), o.dx.data());
        reference::conv2d_backward_weight(g, x.data(), dy.data(), o.dw.data(), o.db.data());
    }
    return o;
}

}  // namespace

TEST_CASE("parallel conv2d agrees with the reference kernels") {
    for (int seed = 0; seed < 60; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        const auto g = random_geometry(rng);
        auto x = rand_vec<double>(static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width, rng);
        auto w = rand_vec<double>(static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel, rng);
        auto b = rand_vec<double>(static_cast<std::size_t>(g.out_channels), rng);
        auto dy = rand_vec<double>(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width(), rng);
        const auto r = run_conv(false, g, x, w, b, dy), p = run_conv(true, g, x, w, b, dy);
        CHECK(max_diff(r.y, p.y) < 1e-12);
        CHECK(max_diff(r.dx, p.dx) < 1e-12);
        CHECK(max_diff(r.dw, p.dw) < 1e-12);
        CHECK(max_diff(r.db, p.db) < 1e-12);
    }
}

TEST_CASE("parallel kernels give bitwise-identical results for any thread count") {
    const int saved = num_threads();
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed) + 99);
        auto g = random_geometry(rng);
        g.batch = 3;
        auto x = rand_vec<double>(static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width, rng);
        auto w = rand_vec<double>(static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel, rng);
        auto b = rand_vec<double>(static_cast<std::size_t>(g.out_channels), rng);
        auto dy = rand_vec<double>(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width(), rng);
        set_num_threads(1);
        const auto one = run_conv(true, g, x, w, b, dy);
        for (int t : {2, 3, 4}) {
            set_num_threads(t);
            const auto many = run_conv(true, g, x, w, b, dy);
            CHECK(bitwise(one.y, many.y));
            CHECK(bitwise(one.dx, many.dx));
            CHECK(bitwise(one.dw, many.dw));
            CHECK(bitwise(one.db, many.db));
        }
    }
    set_num_threads(saved);
}

TEST_CASE("pooling and upsampling kernels agree") {
    for (int seed = 0; seed < 40; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        PlaneGeometry g{1 + static_cast<int>(rng.index(6)), 2 * (1 + static_cast<int>(rng.index(8))),
                        2 * (1 + static_cast<int>(rng.index(8)))};
        const std::size_t n = static_cast<std::size_t>(g.planes) * g.height * g.width;
        auto x = rand_vec<float>(n, rng);
        std::vector<float> yr(n / 4), yp(n / 4);
        std::vector<std::int64_t> ar(n / 4), ap(n / 4);
        reference::max_pool2_forward(g, x.data(), yr.data(), ar.data());
        parallel::max_pool2_forward(g, x.data(), yp.data(), ap.data());
        CHECK(bitwise(yr, yp));
        CHECK(ar == ap);
        auto dy = rand_vec<float>(n / 4, rng);
        std::vector<float> dxr(n, 0), dxp(n, 0);
        reference::max_pool2_backward(g, dy.data(), ar.data(), dxr.data());
        parallel::max_pool2_backward(g, dy.data(), ap.data(), dxp.data());
        CHECK(bitwise(dxr, dxp));

        std::vector<float> ur(n * 4), up(n * 4);
        reference::upsample_bilinear2_forward(g, x.data(), ur.data());
        parallel::upsample_bilinear2_forward(g, x.data(), up.data());
        CHECK(max_diff(ur, up) < 1e-6);
        auto du = rand_vec<float>(n * 4, rng);
        std::vector<float> dr(n, 0), dp(n, 0);
        reference::upsample_bilinear2_backward(g, du.data(), dr.data());
        parallel::upsample_bilinear2_backward(g, du.data(), dp.data());
        CHECK(max_diff(dr, dp) < 1e-5);
    }
}

TEST_CASE("gemm variants agree with the reference product") {
    for (int seed = 0; seed < 30; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        const int m = 1 + static_cast<int>(rng.index(40)), n = 1 + static_cast<int>(rng.index(40)),
                  k = 1 + static_cast<int>(rng.index(40));
        auto a = rand_vec<double>(static_cast<std::size_t>(m * k), rng);
        auto b = rand_vec<double>(static_cast<std::size_t>(k * n), rng);
        std::vector<double> cr(static_cast<std::size_t>(m * n)), cp(cr.size()), ct(cr.size()), cn(cr.size());
        reference::gemm(m, n, k, a.data(), b.data(), cr.data());
        parallel::gemm(m, n, k, a.data(), b.data(), cp.data());
        CHECK(max_diff(cr, cp) < 1e-12);
        // a^T stored as [k,m], b^T stored as [n,k]
        std::vector<double> at(a.size()), bt(b.size());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < k; ++j) at[static_cast<std::size_t>(j * m + i)] = a[static_cast<std::size_t>(i * k + j)];
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < n; ++j) bt[static_cast<std::size_t>(j * k + i)] = b[static_cast<std::size_t>(i * n + j)];
        parallel::gemm_tn(m, n, k, at.data(), b.data(), ct.data());
        parallel::gemm_nt(m, n, k, a.data(), bt.data(), cn.data());
        CHECK(max_diff(cr, ct) < 1e-12);
        CHECK(max_diff(cr, cn) < 1e-12);
    }
}

TEST_CASE("im2col followed by col2im counts kernel overlaps") {
    ConvGeometry g;
    g.in_channels = 2;
    g.height = 5;
    g.width = 4;
    g.kernel = 3;
    g.pad = 1;
    std::vector<double> x(40, 1.0);
    std::vector<double> col(static_cast<std::size_t>(2 * 9 * g.out_height() * g.out_width()));
    parallel::im2col(g, x.data(), col.data());
    std::vector<double> back(40, 0.0);
    parallel::col2im(g, col.data(), back.data());
    // interior pixels are visited by 9 windows, corners by 4
    CHECK(back[0] == 4.0);
    CHECK(back[1 * 4 + 1] == 9.0);
    CHECK(back[20 + 4 * 4 + 3] == 4.0);
}
