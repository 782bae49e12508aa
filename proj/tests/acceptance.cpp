// Acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion ...]   (no arguments runs all of them)

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "sgseg/dataset.hpp"
#include "sgseg/gradcheck.hpp"
#include "sgseg/kernels.hpp"
#include "sgseg/ops.hpp"
#include "sgseg/pipeline.hpp"
#include "sgseg/segnet.hpp"
#include "sgseg/trainer.hpp"

using namespace sgseg;
using oracle::random;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            if (pass) detail = what;
            pass = false;
        }
    }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---- 1: gradients ----

using Case = std::pair<ScalarFn, std::vector<TensorD>>;
using CaseMaker = std::function<Case(Rng&, int)>;

struct Weighted {
    TensorD r;
    Weighted(const Shape& s, int seed) {
        Rng rng(static_cast<std::uint64_t>(seed) * 7919 + 1);
        r = random(s, rng, -1, 1, false);
    }
    TensorD operator()(const TensorD& y) const { return sum(mul(y, r)); }
};

TensorD binary_mask(const Shape& s, Rng& rng) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(s)));
    for (auto& v : d) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return TensorD(s, std::move(d));
}

SsimConfig ssim_cfg() {
    SsimConfig c;
    c.K = 11;
    c.C1 = 1e-4;
    c.C2 = 9e-4;
    return c;
}

// blob mask with a noisy soft prediction of it
std::pair<TensorD, TensorD> soft_pair(int H, int W, Rng& rng) {
    std::vector<double> g(static_cast<std::size_t>(H * W)), p(g.size());
    const double cr = rng.uniform(0.3, 0.7) * H, cc = rng.uniform(0.3, 0.7) * W, rad = rng.uniform(0.2, 0.4) * H;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            const double in = std::hypot(r - cr, c - cc) < rad ? 1.0 : 0.0;
            g[static_cast<std::size_t>(r * W + c)] = in;
            p[static_cast<std::size_t>(r * W + c)] = std::clamp(0.2 + 0.6 * in + rng.uniform(-0.15, 0.15), 0.02, 0.98);
        }
    return {TensorD({H, W}, p, true), TensorD({H, W}, g)};
}

std::vector<std::pair<std::string, CaseMaker>> gradient_cases() {
    std::vector<std::pair<std::string, CaseMaker>> cs;
    cs.emplace_back("conv2d", [](Rng& rng, int seed) {
        const int stride = 1 + seed % 2, pad = seed % 3 == 0 ? 0 : 1, o = (5 + 2 * pad - 3) / stride + 1;
        auto x = random({2, 2, 5, 5}, rng), w = random({3, 2, 3, 3}, rng), b = random({3}, rng);
        const Weighted ws({2, 3, o, o}, seed);
        return Case{[=](const std::vector<TensorD>& in) { return ws(conv2d(in[0], in[1], in[2], stride, pad)); },
                    {x, w, b}};
    });
    cs.emplace_back("batch_norm", [](Rng& rng, int seed) {
        auto x = random({2, 3, 3, 3}, rng), g = random({3}, rng, 0.5, 1.5), b = random({3}, rng);
        const Mode mode = seed % 2 ? Mode::eval : Mode::train;
        auto st = std::make_shared<BatchNormState<double>>(
            BatchNormState<double>{random({3}, rng, -0.5, 0.5, false), random({3}, rng, 0.5, 2, false), true});
        const Weighted ws({2, 3, 3, 3}, seed);
        return Case{[=](const std::vector<TensorD>& in) { return ws(batch_norm(in[0], in[1], in[2], *st, mode)); },
                    {x, g, b}};
    });
    cs.emplace_back("elementwise", [](Rng& rng, int seed) {
        auto a = random({3, 4}, rng), b = random({3, 4}, rng, 0.5, 2.0);
        const Weighted ws({3, 4}, seed);
        return Case{[=](const std::vector<TensorD>& in) {
                        return add_n<double>({ws(add(in[0], in[1])), ws(sub(in[0], in[1])), ws(mul(in[0], in[1])),
                                              ws(div(in[0], in[1]))});
                    },
                    {a, b}};
    });
    cs.emplace_back("scalar", [](Rng& rng, int seed) {
        auto a = random({2, 5}, rng, 0.2, 2.0);
        const Weighted ws({2, 5}, seed);
        return Case{[=](const std::vector<TensorD>& in) {
                        const auto& x = in[0];
                        return add_n<double>({ws(add_scalar(x, 0.3)), ws(mul_scalar(x, -1.7)), ws(div_scalar(x, 3.0)),
                                              ws(rsub_scalar(2.0, x)), ws(pow_scalar(x, 1.7)), ws(square(x)),
                                              ws(log(x))});
                    },
                    {a}};
    });
    cs.emplace_back("activations", [](Rng& rng, int seed) {
        auto a = oracle::random_off_zero({4, 4}, rng);
        for (auto& v : a.data())
            if (std::abs(std::abs(v) - 0.5) < 0.05) v += 0.1;
        const Weighted ws({4, 4}, seed);
        return Case{[=](const std::vector<TensorD>& in) {
                        return add_n<double>({ws(relu(in[0])), ws(sigmoid(mul_scalar(in[0], 3.0))),
                                              ws(clamp(in[0], -0.5, 0.5))});
                    },
                    {a}};
    });
    cs.emplace_back("add_n", [](Rng& rng, int seed) {
        auto a = random({3, 3}, rng), b = random({3, 3}, rng), c = random({3, 3}, rng);
        const Weighted ws({3, 3}, seed);
        return Case{[=](const std::vector<TensorD>& in) { return ws(add_n(in)); }, {a, b, c}};
    });
    cs.emplace_back("reductions", [](Rng& rng, int seed) {
        auto a = random({2, 3, 4, 2}, rng);
        const Weighted w1({2, 3}, seed), w2({2, 3, 4}, seed + 1);
        return Case{[=](const std::vector<TensorD>& in) {
                        const auto& x = in[0];
                        return add_n<double>({mul_scalar(sum(x), 0.3), mean(square(x)), w2(sum_last(x, 1)),
                                              w1(global_avg_pool(x))});
                    },
                    {a}};
    });
    cs.emplace_back("shape", [](Rng& rng, int seed) {
        auto a = random({2, 3, 2}, rng), b = random({2, 1, 2}, rng);
        const Weighted wc({2, 4, 2}, seed), ws({2, 2, 3, 2}, seed + 1), wr({6, 2}, seed + 2), wsel({2, 2}, seed + 3);
        return Case{[=](const std::vector<TensorD>& in) {
                        return add_n<double>({wc(concat<double>({in[0], in[1]}, 1)),
                                              ws(stack<double>({in[0], square(in[0])}, 1)), wr(reshape(in[0], {6, 2})),
                                              wsel(select(in[0], 1, 2))});
                    },
                    {a, b}};
    });
    cs.emplace_back("softmax", [](Rng& rng, int seed) {
        auto a = random({3, 4}, rng, -2, 2);
        const int axis = seed % 2;
        const Weighted ws({3, 4}, seed);
        return Case{[=](const std::vector<TensorD>& in) { return ws(softmax(in[0], axis)); }, {a}};
    });
    cs.emplace_back("fully_connected", [](Rng& rng, int seed) {
        auto x = random({3, 5}, rng), w = random({4, 5}, rng), b = random({4}, rng);
        const Weighted ws({3, 4}, seed);
        return Case{[=](const std::vector<TensorD>& in) { return ws(fully_connected(in[0], in[1], in[2])); }, {x, w, b}};
    });
    cs.emplace_back("max_pool2", [](Rng& rng, int seed) {
        std::vector<double> d(2 * 2 * 4 * 4);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(i) * 0.01;
        rng.shuffle(d);
        TensorD x({2, 2, 4, 4}, d, true);
        const Weighted ws({2, 2, 2, 2}, seed);
        return Case{[=](const std::vector<TensorD>& in) { return ws(max_pool2(in[0])); }, {x}};
    });
    cs.emplace_back("avg_pool2", [](Rng& rng, int seed) {
        auto x = random({1, 2, 5, 4}, rng);
        const Weighted ws({1, 2, 2, 2}, seed);
        return Case{[=](const std::vector<TensorD>& in) { return ws(avg_pool2(in[0])); }, {x}};
    });
    cs.emplace_back("upsample_bilinear2", [](Rng& rng, int seed) {
        auto x = random({1, 2, 3, 4}, rng);
        const Weighted ws({1, 2, 6, 8}, seed);
        return Case{[=](const std::vector<TensorD>& in) { return ws(upsample_bilinear2(in[0])); }, {x}};
    });
    cs.emplace_back("scale_channels", [](Rng& rng, int seed) {
        auto x = random({2, 3, 2, 2}, rng), s = random({2, 3}, rng);
        const Weighted ws({2, 3, 2, 2}, seed);
        return Case{[=](const std::vector<TensorD>& in) { return ws(scale_channels(in[0], in[1])); }, {x, s}};
    });
    cs.emplace_back("conv_block", [](Rng& rng, int seed) {
        const bool proj = seed % 2 == 1;
        const auto kind = seed % 4 == 2 ? BlockKind::basic : BlockKind::shortcut;
        auto blk = std::make_shared<ConvBlock<double>>(BlockConfig{2, proj ? 3 : 2, kind}, rng);
        auto x = random({2, 2, 4, 4}, rng);
        const Weighted ws({2, proj ? 3 : 2, 4, 4}, seed);
        std::vector<TensorD> in{x, blk->conv1.weight, blk->conv2.weight, blk->bn2.gamma};
        for (auto& t : in) t.set_requires_grad(true);
        return Case{[=](const std::vector<TensorD>& v) { return ws(blk->forward(v[0], Mode::train)); }, in};
    });
    cs.emplace_back("se_block", [](Rng& rng, int seed) {
        auto se = std::make_shared<SEBlock<double>>(5, 2, rng);
        for (auto& v : se->fc1.bias.data()) v = rng.uniform(0.1, 0.5);
        auto f = random({2, 5, 3, 3}, rng);
        const Weighted ws({2, 5, 3, 3}, seed);
        std::vector<TensorD> in{f, se->fc1.weight, se->fc2.weight, se->fc2.bias};
        for (auto& t : in) t.set_requires_grad(true);
        return Case{[=](const std::vector<TensorD>& v) { return ws(se->forward(v[0])); }, in};
    });
    cs.emplace_back("safs", [](Rng& rng, int seed) {
        const int n = 2 + seed % 3;
        auto m = std::make_shared<SafsModule<double>>(n, 4, 2, rng);
        for (auto& v : m->reduce.bias.data()) v = rng.uniform(0.2, 0.6);
        std::vector<TensorD> in;
        for (int i = 0; i < n; ++i) in.push_back(random({2, 4, 3, 3}, rng));
        in.push_back(m->reduce.weight);
        for (auto& fc : m->branch_fcs) in.push_back(fc.weight), in.push_back(fc.bias);
        for (auto& t : in) t.set_requires_grad(true);
        const Weighted ws({2, 4, 3, 3}, seed);
        return Case{[=](const std::vector<TensorD>& v) {
                        return ws(safs_fuse(*m, std::vector<TensorD>(v.begin(), v.begin() + n)).fused);
                    },
                    in};
    });
    cs.emplace_back("ce_loss", [](Rng& rng, int) {
        auto p = random({2, 1, 5, 5}, rng, 0.05, 0.95);
        auto g = binary_mask({2, 1, 5, 5}, rng);
        return Case{[=](const std::vector<TensorD>& in) { return ce_loss(in[0], g); }, {p}};
    });
    cs.emplace_back("iou_loss", [](Rng& rng, int) {
        auto p = random({2, 1, 5, 5}, rng, 0.0, 1.0);
        auto g = binary_mask({2, 1, 5, 5}, rng);
        return Case{[=](const std::vector<TensorD>& in) { return iou_loss(in[0], g); }, {p}};
    });
    cs.emplace_back("ssim_loss", [](Rng& rng, int seed) {
        auto p = random({1, 16, 16}, rng, 0.0, 1.0);
        auto g = seed % 2 ? binary_mask({1, 16, 16}, rng) : random({1, 16, 16}, rng, 0, 1, false);
        auto cfg = ssim_cfg();
        if (seed % 3 == 0) cfg.window = WindowKind::gaussian;
        return Case{[=](const std::vector<TensorD>& in) { return ssim_loss(in[0], g, cfg); }, {p}};
    });
    cs.emplace_back("ms_ssim_loss", [](Rng& rng, int) {
        auto [p, g] = soft_pair(22, 24, rng);
        auto cfg = ssim_cfg();
        cfg.ms_scales = 2;
        cfg.ms_weights = {0.4, 0.6};
        return Case{[=](const std::vector<TensorD>& in) { return ms_ssim_loss(in[0], g, cfg); }, {p}};
    });
    cs.emplace_back("combined_loss", [](Rng& rng, int) {
        auto [p, g] = soft_pair(16, 16, rng);
        auto spec = LossSpec::parse("ce+ssim+iou");
        spec.w_iou = 0.7;
        return Case{[=](const std::vector<TensorD>& in) { return combined_loss(in[0], g, spec, ssim_cfg()); }, {p}};
    });
    return cs;
}

Outcome gradient_suite() {
    Outcome out;
    const auto t0 = Clock::now();
    double worst = 0;
    std::string worst_name;
    for (const auto& [name, make] : gradient_cases())
        for (int seed = 0; seed < 20; ++seed) {
            Rng rng(static_cast<std::uint64_t>(seed) + 100);
            auto [fn, inputs] = make(rng, seed);
            const double e = check_gradients(fn, inputs);
            if (e > worst) worst = e, worst_name = name;
            out.require(e < 1e-4, name + " seed " + std::to_string(seed) + " rel error " + fmt("%.3g", e));
        }

    NetworkConfig cfg;
    cfg.input_height = cfg.input_width = 16;
    cfg.depth = 2;
    cfg.width = 4;
    cfg.fusion = Fusion::adaptive;
    cfg.n_scales = 2;
    auto model = std::make_shared<Model<double>>(Model<double>::build(cfg, 1));
    Rng rng(3);
    auto x = random({2, 3, 16, 16}, rng, 0, 1);
    auto r = random({2, 1, 16, 16}, rng, -1, 1, false);
    std::vector<TensorD> inputs{x};
    for (auto& p : model->parameters().params()) inputs.push_back(p.tensor);
    const double e2e = check_gradients(
        [=](const std::vector<TensorD>& in) { return sum(mul(model->forward(in[0], Mode::train), r)); }, inputs);
    out.require(e2e < 1e-3, "end-to-end rel error " + fmt("%.3g", e2e));

    const double s = seconds_since(t0);
    out.require(s < 120, "runtime " + fmt("%.1f s", s));
    if (out.pass)
        out.detail = "ops/losses worst " + fmt("%.2g", worst) + " (" + worst_name + "), network " + fmt("%.2g", e2e) +
                     ", " + fmt("%.1f s", s);
    return out;
}

// ---- 2: ssim ----

Outcome ssim_oracle() {
    Outcome out;
    const auto t0 = Clock::now();
    const auto cfg = ssim_cfg();
    double worst = 0;
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed) + 4000);
        const int H = 16 + static_cast<int>(rng.index(17)), W = 16 + static_cast<int>(rng.index(17));
        auto p = random({H, W}, rng, 0, 1, false);
        auto g = seed % 2 ? binary_mask({H, W}, rng) : random({H, W}, rng, 0, 1, false);
        const std::vector<double> pv(p.data().begin(), p.data().end()), gv(g.data().begin(), g.data().end());
        const double fast = ssim_loss(p, g, cfg).item();
        const double brute = oracle::ssim_loss_brute(pv, gv, H, W, 11, 1e-4, 9e-4);
        worst = std::max(worst, std::abs(fast - brute));
    }
    const double s = seconds_since(t0);
    out.require(worst < 1e-9, "max |fast - brute| " + fmt("%.3g", worst));
    out.require(s < 30, "runtime " + fmt("%.1f s", s));
    if (out.pass) out.detail = "50 pairs, max diff " + fmt("%.2g", worst) + ", " + fmt("%.2f s", s);
    return out;
}

// ---- 3: SAFS ----

Outcome safs_invariants() {
    Outcome out;
    const auto t0 = Clock::now();
    // weights are a per-channel convex combination, fused map stays within the branch range
    for (int n = 1; n <= 4; ++n)
        for (int seed = 0; seed < 25; ++seed) {
            Rng rng(static_cast<std::uint64_t>(seed * 7 + n));
            const int C = 1 + static_cast<int>(rng.index(20));
            SafsModule<double> m(n, C, 8, rng);
            for (auto& fc : m.branch_fcs)
                for (auto& v : fc.bias.data()) v = rng.uniform(-2, 2);
            std::vector<TensorD> maps;
            for (int i = 0; i < n; ++i) maps.push_back(random({2, C, 4, 4}, rng, -1, 1, false));
            const auto r = safs_fuse(m, maps);
            for (std::int64_t b = 0; b < 2; ++b) {
                const auto q = r.weights_of(b);
                for (int c = 0; c < C; ++c) {
                    double s = 0;
                    for (int i = 0; i < n; ++i) {
                        out.require(q.at(i, c) >= 0.0, "negative branch weight");
                        s += q.at(i, c);
                    }
                    out.require(std::abs(s - 1.0) < 1e-6, "branch weights sum to " + fmt("%.9f", s));
                }
            }
            for (std::int64_t k = 0; k < r.fused.numel(); ++k) {
                double lo = INFINITY, hi = -INFINITY;
                for (auto& mp : maps) lo = std::min(lo, mp[k]), hi = std::max(hi, mp[k]);
                out.require(r.fused[k] >= lo - 1e-6 && r.fused[k] <= hi + 1e-6, "fused value outside branch range");
            }
        }
    {
        Rng rng(6);
        SafsModule<double> m(1, 4, 8, rng);
        auto f = random({4, 3, 3}, rng, -1, 1, false);
        const auto r = safs_fuse(m, {f});
        for (double v : r.weights_of().q) out.require(v == 1.0, "n=1 weight not 1");
        for (std::int64_t i = 0; i < f.numel(); ++i) out.require(r.fused[i] == f[i], "n=1 output differs from input");
    }
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        SafsModule<double> m(2, 6, 2, rng);
        auto& a = m.branch_fcs[0];
        auto& b = m.branch_fcs[1];
        std::copy(a.weight.data().begin(), a.weight.data().end(), b.weight.data().begin());
        std::copy(a.bias.data().begin(), a.bias.data().end(), b.bias.data().begin());
        auto f = random({6, 4, 4}, rng, -1, 1, false);
        const auto r = safs_fuse(m, {f, f});
        for (double v : r.weights_of().q) out.require(v == 0.5, "tied parameters: weight " + fmt("%.17g", v));
        for (std::int64_t i = 0; i < f.numel(); ++i) out.require(r.fused[i] == f[i], "tied parameters: output differs");
    }
    for (int n : {2, 3})
        for (int seed = 0; seed < 20; ++seed) {
            Rng rng(static_cast<std::uint64_t>(seed * 10 + n));
            const int C = 1 + static_cast<int>(rng.index(16));
            SafsModule<double> m(n, C, 1 + static_cast<int>(rng.index(8)), rng);
            for (auto& v : m.reduce.bias.data()) v = rng.uniform(-0.3, 0.3);
            std::vector<TensorD> maps;
            for (int i = 0; i < n; ++i) maps.push_back(random({C, 3, 5}, rng, -1, 1, false));
            const auto r = safs_fuse(m, maps);
            const auto q = r.weights_of();
            for (int c = 0; c < C; ++c)
                for (int k = 0; k < 15; ++k) {
                    double s = 0;
                    for (int i = 0; i < n; ++i) s += q.at(i, c) * maps[static_cast<std::size_t>(i)][c * 15 + k];
                    out.require(r.fused[c * 15 + k] == s, "fused map differs from the weighted-sum loop");
                }
            const auto o = oracle::safs_naive(m, maps);
            for (std::size_t i = 0; i < o.q.size(); ++i)
                out.require(std::abs(o.q[i] - q.q[i]) < 1e-12, "weights differ from the loop oracle");
            for (std::size_t i = 0; i < o.fused.size(); ++i)
                out.require(std::abs(o.fused[i] - r.fused.data()[i]) < 1e-12, "fused map differs from the loop oracle");
        }
    const double s = seconds_since(t0);
    out.require(s < 30, "runtime " + fmt("%.1f s", s));
    if (out.pass) out.detail = "convexity, bounds, n=1, tied, loop oracle n=2,3; " + fmt("%.2f s", s);
    return out;
}

// ---- 4: metrics ----

Outcome metrics_oracle() {
    Outcome out;
    auto ratio = [](double a, double b) { return b == 0 ? 1.0 : a / b; };
    for (int seed = 0; seed < 200; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        const auto n = static_cast<std::size_t>((1 + rng.index(32)) * (1 + rng.index(32)));
        const double ps = rng.uniform(), pg = rng.uniform();
        std::vector<std::uint8_t> s(n), g(n);
        for (auto& v : s) v = rng.bernoulli(ps);
        for (auto& v : g) v = rng.bernoulli(pg);
        const auto c = confusion(s, g);
        out.require(c == oracle::count_pixels(s, g), "confusion counts differ on pair " + std::to_string(seed));
        const auto m = derive_metrics(c);
        const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), tn = static_cast<double>(c.tn),
                     fn = static_cast<double>(c.fn);
        out.require(m.sp == ratio(tn, tn + fp) && m.pc == ratio(tp, tp + fp) && m.rc == ratio(tp, tp + fn) &&
                        m.js == ratio(tp, tp + fp + fn) && m.dc == ratio(2 * tp, 2 * tp + fp + fn),
                    "derived metric differs on pair " + std::to_string(seed));
        out.require(std::abs(m.dc - 2 * m.js / (1 + m.js)) < 1e-12, "DC != 2JS/(1+JS)");
    }
    out.require(clipped_js(0.65) == 0.65, "clipped_js(0.65) != 0.65");
    out.require(clipped_js(0.64) == 0.0, "clipped_js(0.64) != 0");
    out.require(clipped_js(std::nextafter(0.65, 0.0)) == 0.0, "clipped_js just below 0.65 != 0");
    const double sw = s_wsi(std::vector<double>{0.9, 0.64, 0.66});
    out.require(std::abs(sw - 0.52) < 1e-12, "s_wsi example gives " + fmt("%.17g", sw));
    if (out.pass) out.detail = "200 pairs exact, clipped Jaccard boundary, s_wsi example";
    return out;
}

// ---- 5: pipeline ----

Outcome pipeline_roundtrips() {
    Outcome out;
    Rng rng(11);
    for (int i = 0; i < 300; ++i) {
        const int ps = 1 + static_cast<int>(rng.index(64));
        const int ov = static_cast<int>(rng.index(static_cast<std::uint64_t>(ps)));
        const int H = ps + static_cast<int>(rng.index(200)), W = ps + static_cast<int>(rng.index(200));
        const auto grid = make_grid(H, W, ps, ov);
        std::vector<int> cover(static_cast<std::size_t>(H * W), 0);
        for (auto [r, c] : grid.positions) {
            out.require(r >= 0 && c >= 0 && r + ps <= H && c + ps <= W, "patch outside the image");
            for (int y = r; y < r + ps; ++y)
                for (int x = c; x < c + ps; ++x) ++cover[static_cast<std::size_t>(y * W + x)];
        }
        out.require(std::all_of(cover.begin(), cover.end(), [](int v) { return v > 0; }), "uncovered pixel");
    }
    for (int i = 0; i < 20; ++i) {
        const int ps = 8 + static_cast<int>(rng.index(24)), ov = static_cast<int>(rng.index(static_cast<std::uint64_t>(ps)));
        const int H = ps + static_cast<int>(rng.index(60)), W = ps + static_cast<int>(rng.index(60));
        Image img(1 + 2 * static_cast<int>(rng.index(2)), H, W);
        for (auto& v : img.data) v = static_cast<float>(rng.uniform());
        const auto grid = make_grid(H, W, ps, ov);
        const auto back = stitch(extract(img, grid), grid);
        double worst = 0;
        for (std::size_t k = 0; k < img.data.size(); ++k)
            worst = std::max(worst, static_cast<double>(std::abs(back.data[k] - img.data[k])));
        out.require(worst < 1e-6, "stitch(extract) differs by " + fmt("%.3g", worst));
    }
    const auto big = make_grid(1000, 1000, 400, 200);
    out.require(big.positions.size() == 16, "1000/400/200 grid has " + std::to_string(big.positions.size()) + " patches");

    std::vector<std::string> ids;
    for (int i = 0; i < 50; ++i) ids.push_back("wsi" + std::to_string(i));
    const auto folds = kfold_split(ids, 5, 3);
    for (int f = 0; f < 5; ++f)
        out.require(folds.members(f).size() == 10, "fold " + std::to_string(f) + " has " +
                                                        std::to_string(folds.members(f).size()) + " slides");
    const auto ds = synth_slides(10, 96, 48, 16, 4, 5);
    for (const auto& s : ds.samples) {
        const auto it = std::find_if(ds.slides.begin(), ds.slides.end(), [&](const Slide& sl) { return sl.wsi == s.wsi; });
        out.require(it != ds.slides.end() && it->fold == s.fold, "patch " + s.id + " not in its slide's fold");
    }
    if (out.pass) out.detail = "grid coverage 300 cases, stitch identity, 16 patches, 5x10 folds, co-located patches";
    return out;
}

// ---- 6: determinism through the command-line tool ----

int run_cli(const std::string& args, std::string* output = nullptr) {
    const std::string cmd = std::string(SGSEG_CLI_PATH) + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return -1;
    std::string text;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, p)) text += buf;
    const int status = pclose(p);
    if (output) *output = text;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

Outcome determinism() {
    Outcome out;
    const auto dir = fs::temp_directory_path() / "sgseg_acceptance_det";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::string log;
    out.require(run_cli("synth --n 30 --size 32 --folds 3 --seed 9 --out " + (dir / "data").string(), &log) == 0,
                "synth failed: " + log);
    std::ofstream(dir / "cfg.txt") << "input_size = 32\ndepth = 3\nwidth = 4\nepochs = 3\ndecay_epochs = 2\n"
                                      "lr = 1e-3\nbatch_size = 4\nloss = ce+ssim+iou\nfusion = adaptive\n"
                                      "n_scales = 2\nrecord_time = false\n";
    for (const char* run : {"a", "b"})
        out.require(run_cli("--threads 1 train --config " + (dir / "cfg.txt").string() + " --data " +
                                (dir / "data").string() + " --fold 0 --seed 4 --out " + (dir / run).string(),
                            &log) == 0,
                    "train failed: " + log);
    for (const char* f : {"losses.csv", "best.sgck", "final.sgck"}) {
        const auto a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
        out.require(!a.empty() && a == b, std::string(f) + " differs between runs");
    }
    if (out.pass) out.detail = "losses.csv, best.sgck, final.sgck byte-identical";
    fs::remove_all(dir);
    return out;
}

// ---- 7: learning smoke test ----

Outcome smoke_test() {
    Outcome out;
    const auto t0 = Clock::now();
    // 250 samples in 5 folds: fold 0 validates on 50, the rest train on 200
    const auto ds = synth_generate(250, 64, 2024, 5);
    TrainConfig cfg;
    cfg.net.input_height = cfg.net.input_width = 64;
    cfg.net.depth = 3;
    cfg.net.width = 8;
    cfg.epochs = 30;
    cfg.loss = LossSpec::parse("ce");
    cfg.seed = 1;
    cfg.record_time = false;
    auto result = train(ds, 0, cfg);
    const auto eval = evaluate(model_predictor(result.model), ds, 0, cfg.metrics);
    const double s = seconds_since(t0);
    const double dice = eval.patch_metrics.dc;
    out.require(dice >= 0.90, "validation Dice " + fmt("%.4f", dice));
    out.require(s < 900, "runtime " + fmt("%.0f s", s));
    out.detail = "final validation Dice " + fmt("%.4f", dice) + " (best epoch " + std::to_string(result.best_epoch) +
                 ": " + fmt("%.4f", result.best_val_dice) + "), " + fmt("%.0f s", s);
    return out;
}

// ---- 8: directional trends ----

// A trend holds when the mean of `a` is at least the mean of `b`. One seed may
// disagree: the comparison is repeated without the seed most unfavourable to `a`.
bool trend_holds(const std::vector<double>& a, const std::vector<double>& b, std::string& note) {
    auto mean_without = [&](const std::vector<double>& v, std::size_t skip) {
        double s = 0;
        int n = 0;
        for (std::size_t i = 0; i < v.size(); ++i)
            if (i != skip) s += v[i], ++n;
        return s / n;
    };
    const std::size_t none = a.size();
    if (mean_without(a, none) >= mean_without(b, none)) {
        note = "holds on the mean";
        return true;
    }
    std::size_t worst = 0;
    for (std::size_t i = 1; i < a.size(); ++i)
        if (b[i] - a[i] > b[worst] - a[worst]) worst = i;
    const bool ok = mean_without(a, worst) >= mean_without(b, worst);
    note = ok ? "holds after dropping seed " + std::to_string(worst) : "fails even after dropping one seed";
    return ok;
}

std::string series(const std::vector<double>& v) {
    std::string s;
    double m = 0;
    for (double x : v) s += (s.empty() ? "" : " ") + fmt("%.3f", x), m += x;
    return "[" + s + "] mean " + fmt("%.4f", m / static_cast<double>(v.size()));
}

TrainConfig trend_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.net.input_height = cfg.net.input_width = 64;
    cfg.net.depth = 3;
    cfg.net.width = 8;
    cfg.net.n_scales = 2;
    cfg.net.fusion = Fusion::adaptive;
    cfg.epochs = 8;
    cfg.decay_epochs = 8;
    cfg.adam.lr = 1e-3;
    cfg.loss = LossSpec::parse("ce");
    cfg.seed = seed;
    cfg.record_time = false;
    return cfg;
}

double slide_score(const Dataset& ds, const TrainConfig& cfg) {
    auto result = train(ds, 0, cfg);
    return evaluate(model_predictor(result.model), ds, 0, cfg.metrics).s_wsi;
}

Outcome trends() {
    Outcome out;
    const auto t0 = Clock::now();
    std::vector<double> adaptive, average, ce, ce_ssim;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        // 15 slides of 160x160 with distractor blobs, tiled into 64x64 patches
        const auto ds = synth_slides(15, 160, 64, 16, 100 + seed, 5);
        auto cfg = trend_config(seed);
        adaptive.push_back(slide_score(ds, cfg));
        cfg.net.fusion = Fusion::average;
        average.push_back(slide_score(ds, cfg));
        cfg.net.fusion = Fusion::single;
        cfg.net.n_scales = 1;
        ce.push_back(slide_score(ds, cfg));
        cfg.loss = LossSpec::parse("ce+ssim");
        ce_ssim.push_back(slide_score(ds, cfg));
    }
    std::string na, nb;
    const bool a = trend_holds(adaptive, average, na), b = trend_holds(ce_ssim, ce, nb);
    out.require(a, "(a) adaptive < average");
    out.require(b, "(b) ce+ssim < ce");
    std::cout << "     (a) adaptive " << series(adaptive) << "\n         average  " << series(average) << "\n         "
              << na << "\n";
    std::cout << "     (b) ce+ssim  " << series(ce_ssim) << "\n         ce       " << series(ce) << "\n         " << nb
              << "\n";
    const std::string time = fmt("%.0f s", seconds_since(t0));
    out.detail = out.pass ? "both trends hold, " + time : out.detail + ", " + time;
    return out;
}

// ---- 9: parameter count ----

Outcome parameter_count() {
    Outcome out;
    NetworkConfig cfg;
    cfg.input_height = cfg.input_width = 400;
    cfg.depth = 5;
    cfg.width = 32;
    const double n = static_cast<double>(expected_param_count(cfg));
    const double ratio = n / 8.768e6;
    out.require(std::abs(ratio - 1) <= 0.15, "outside +-15%");
    out.detail = fmt("%.0f", n) + " parameters, " + fmt("%.1f%%", ratio * 100) + " of 8.768M (informational)";
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    kernels::set_num_threads(1);

    struct Criterion {
        int id;
        const char* name;
        Outcome (*run)();
        bool blocking;
    };
    const Criterion all[] = {
        {1, "gradient suite", gradient_suite, true},
        {2, "ssim oracle", ssim_oracle, true},
        {3, "safs invariants", safs_invariants, true},
        {4, "metrics oracle", metrics_oracle, true},
        {5, "pipeline round-trips", pipeline_roundtrips, true},
        {6, "determinism", determinism, true},
        {7, "learning smoke test", smoke_test, true},
        {8, "directional trends", trends, true},
        {9, "parameter count", parameter_count, false},
    };
    int failures = 0;
    for (const auto& c : all) {
        if (!only.empty() && !only.count(c.id)) continue;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS " : "FAIL ") << c.id << " " << c.name << ": " << o.detail << std::endl;
        if (!o.pass && c.blocking) ++failures;
    }
    return failures == 0 ? 0 : 1;
}
