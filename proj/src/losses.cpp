#include "sgseg/losses.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sgseg {

void SsimConfig::validate() const {
    if (K < 3 || K % 2 == 0) throw std::invalid_argument("SSIM window K must be odd and >= 3");
    if (!(C1 > 0) || !(C2 > 0)) throw std::invalid_argument("SSIM constants must be positive");
    if (window == WindowKind::gaussian && !(sigma > 0)) throw std::invalid_argument("SSIM sigma must be positive");
    if (ms_scales < 1) throw std::invalid_argument("ms_scales must be >= 1");
    if (!ms_weights.empty()) {
        if (static_cast<int>(ms_weights.size()) != ms_scales)
            throw std::invalid_argument("ms_weights needs one weight per scale");
        double s = 0;
        for (double w : ms_weights) {
            if (w < 0) throw std::invalid_argument("ms_weights must be non-negative");
            s += w;
        }
        if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("ms_weights must sum to 1");
    }
}

std::vector<double> SsimConfig::window_weights() const {
    const auto n = static_cast<std::size_t>(K) * K;
    std::vector<double> w(n, 1.0 / static_cast<double>(n));
    if (window == WindowKind::gaussian) {
        std::vector<double> g(static_cast<std::size_t>(K));
        const int c = K / 2;
        double s = 0;
        for (int i = 0; i < K; ++i) {
            g[static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
            s += g[static_cast<std::size_t>(i)];
        }
        for (auto& v : g) v /= s;
        for (int i = 0; i < K; ++i)
            for (int j = 0; j < K; ++j)
                w[static_cast<std::size_t>(i * K + j)] = g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(j)];
    }
    return w;
}

std::vector<double> SsimConfig::scale_weights() const {
    if (!ms_weights.empty()) return ms_weights;
    return std::vector<double>(static_cast<std::size_t>(ms_scales), 1.0 / ms_scales);
}

WindowStats window_stats(std::span<const double> x, std::span<const double> y, const SsimConfig& cfg) {
    const auto w = cfg.window_weights();
    if (x.size() != w.size() || y.size() != w.size())
        throw std::invalid_argument("ssim window must have K*K samples");
    WindowStats s;
    for (std::size_t i = 0; i < w.size(); ++i) {
        s.mu_x += w[i] * x[i];
        s.mu_y += w[i] * y[i];
    }
    double vx = 0, vy = 0, cxy = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double dx = x[i] - s.mu_x, dy = y[i] - s.mu_y;
        vx += w[i] * dx * dx;
        vy += w[i] * dy * dy;
        cxy += w[i] * dx * dy;
    }
    s.sigma_x = std::sqrt(vx);
    s.sigma_y = std::sqrt(vy);
    s.sigma_xy = cxy;
    return s;
}

double ssim_index(std::span<const double> x, std::span<const double> y, const SsimConfig& cfg) {
    const auto s = window_stats(x, y, cfg);
    const double num = (2 * s.mu_x * s.mu_y + cfg.C1) * (2 * s.sigma_xy + cfg.C2);
    const double den = (s.mu_x * s.mu_x + s.mu_y * s.mu_y + cfg.C1) *
                       (s.sigma_x * s.sigma_x + s.sigma_y * s.sigma_y + cfg.C2);
    return num / den;
}

LossSpec LossSpec::parse(const std::string& text) {
    LossSpec s;
    s.ce = s.ssim = s.iou = false;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, '+')) {
        std::string t;
        for (char c : item)
            if (!std::isspace(static_cast<unsigned char>(c))) t += c;
        if (t == "ce") s.ce = true;
        else if (t == "ssim") s.ssim = true;
        else if (t == "iou") s.iou = true;
        else throw std::invalid_argument("unknown loss term '" + t + "' (ce|ssim|iou)");
    }
    s.validate();
    return s;
}

std::string LossSpec::to_string() const {
    std::string out;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!out.empty()) out += '+';
        out += name;
    };
    add(ce, "ce");
    add(ssim, "ssim");
    add(iou, "iou");
    return out;
}

void LossSpec::validate() const {
    if (!ce && !ssim && !iou) throw std::invalid_argument("loss spec has no terms");
    if ((ce && !(w_ce > 0)) || (ssim && !(w_ssim > 0)) || (iou && !(w_iou > 0)))
        throw std::invalid_argument("loss weights must be positive");
}

namespace {

// [H,W] / [1,H,W] / [B,1,H,W] -> [B,1,H,W]
template <typename T>
Tensor<T> as_batch(const Tensor<T>& m) {
    switch (m.ndim()) {
        case 2: return reshape(m, {1, 1, m.dim(0), m.dim(1)});
        case 3:
            if (m.dim(0) != 1) break;
            return reshape(m, {1, 1, m.dim(1), m.dim(2)});
        case 4:
            if (m.dim(1) != 1) break;
            return m;
        default: break;
    }
    throw ShapeError("loss expects [H,W], [1,H,W] or [B,1,H,W], got " + shape_str(m.shape()));
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
Tensor<T> window_kernel(const SsimConfig& cfg) {
    const auto w = cfg.window_weights();
    return Tensor<T>({1, 1, cfg.K, cfg.K}, std::vector<T>(w.begin(), w.end()));
}

// Per-pixel luminance and contrast-structure maps, [B,1,H-K+1,W-K+1].
template <typename T>
struct SsimMaps {
    Tensor<T> lum;
    Tensor<T> cs;
};

template <typename T>
SsimMaps<T> ssim_maps(const Tensor<T>& x, const Tensor<T>& y, const SsimConfig& cfg) {
    if (x.dim(2) < cfg.K || x.dim(3) < cfg.K)
        throw std::invalid_argument("ssim: image " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                                    " smaller than window " + std::to_string(cfg.K));
    const auto w = window_kernel<T>(cfg);
    const Tensor<T> none;
    const auto mx = conv2d(x, w, none), my = conv2d(y, w, none);
    const auto mxx = square(mx), myy = square(my), mxy = mul(mx, my);
    const auto vx = sub(conv2d(square(x), w, none), mxx);
    const auto vy = sub(conv2d(square(y), w, none), myy);
    const auto cxy = sub(conv2d(mul(x, y), w, none), mxy);
    const T c1 = static_cast<T>(cfg.C1), c2 = static_cast<T>(cfg.C2);
    SsimMaps<T> m;
    m.lum = div(add_scalar(mul_scalar(mxy, T(2)), c1), add_scalar(add(mxx, myy), c1));
    m.cs = div(add_scalar(mul_scalar(cxy, T(2)), c2), add_scalar(add(vx, vy), c2));
    return m;
}

// [B,1,h,w] -> [B] spatial means.
template <typename T>
Tensor<T> per_sample_mean(const Tensor<T>& m) {
    const auto flat = reshape(m, {m.dim(0), m.dim(2) * m.dim(3)});
    return div_scalar(sum_last(flat, 1), static_cast<T>(m.dim(2) * m.dim(3)));
}

}  // namespace

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& mp, const Tensor<T>& mg) {
    require_same(mp, mg, "ce_loss");
    const T eps = static_cast<T>(1e-7);
    const auto p = clamp(mp, eps, T(1) - eps);
    const auto pos = mul(mg, log(p));
    const auto neg = mul(rsub_scalar(T(1), mg), log(rsub_scalar(T(1), p)));
    return mul_scalar(mean(add(pos, neg)), T(-1));
}

template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& mp, const Tensor<T>& mg, const SsimConfig& cfg) {
    require_same(mp, mg, "ssim_loss");
    cfg.validate();
    const auto x = as_batch(mp), y = as_batch(mg);
    const auto m = ssim_maps(x, y, cfg);
    return rsub_scalar(T(1), mean(mul(m.lum, m.cs)));
}

template <typename T>
Tensor<T> ms_ssim_loss(const Tensor<T>& mp, const Tensor<T>& mg, const SsimConfig& cfg) {
    require_same(mp, mg, "ms_ssim_loss");
    cfg.validate();
    if (cfg.ms_scales == 1) return ssim_loss(mp, mg, cfg);
    auto x = as_batch(mp), y = as_batch(mg);
    const std::int64_t need = static_cast<std::int64_t>(cfg.K) << (cfg.ms_scales - 1);
    if (x.dim(2) < need || x.dim(3) < need)
        throw std::invalid_argument("ms_ssim: image " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                                    " too small for " + std::to_string(cfg.ms_scales) + " scales (need " +
                                    std::to_string(need) + ")");
    const auto weights = cfg.scale_weights();
    const T floor_v = static_cast<T>(1e-6);
    Tensor<T> index;
    for (int j = 0; j < cfg.ms_scales; ++j) {
        const auto m = ssim_maps(x, y, cfg);
        const bool last = j == cfg.ms_scales - 1;
        auto mu = per_sample_mean(last ? mul(m.lum, m.cs) : m.cs);
        auto term = pow_scalar(clamp(mu, floor_v, static_cast<T>(1e30)), static_cast<T>(weights[static_cast<std::size_t>(j)]));
        index = j == 0 ? term : mul(index, term);
        if (!last) {
            x = avg_pool2(x);
            y = avg_pool2(y);
        }
    }
    return rsub_scalar(T(1), mean(index));
}

template <typename T>
Tensor<T> iou_loss(const Tensor<T>& mp, const Tensor<T>& mg) {
    require_same(mp, mg, "iou_loss");
    const auto p = as_batch(mp), g = as_batch(mg);
    const auto gp = mul(g, p);
    const auto flat = [](const Tensor<T>& t) { return reshape(t, {t.dim(0), t.dim(2) * t.dim(3)}); };
    const auto inter = sum_last(flat(gp), 1);
    const auto uni = sum_last(flat(sub(add(g, p), gp)), 1);
    // empty union: both maps are zero, loss 0 by convention
    std::vector<T> guard(static_cast<std::size_t>(uni.numel()));
    for (std::size_t i = 0; i < guard.size(); ++i) guard[i] = uni.data()[i] == T(0) ? T(1) : T(0);
    const auto safe = add(uni, Tensor<T>(uni.shape(), std::move(guard)));
    return mean(div(sub(uni, inter), safe));
}

template <typename T>
Tensor<T> structural_loss(const Tensor<T>& mp, const Tensor<T>& mg, const SsimConfig& cfg) {
    return cfg.ms_scales > 1 ? ms_ssim_loss(mp, mg, cfg) : ssim_loss(mp, mg, cfg);
}

template <typename T>
LossTerms<T> combined_loss_detailed(const Tensor<T>& mp, const Tensor<T>& mg, const LossSpec& spec,
                                    const SsimConfig& cfg) {
    spec.validate();
    LossTerms<T> r;
    std::vector<Tensor<T>> parts;
    auto term = [&](bool on, double weight, double& out, auto&& fn) {
        if (on) {
            auto v = fn();
            out = static_cast<double>(v.item());
            parts.push_back(weight == 1.0 ? v : mul_scalar(v, static_cast<T>(weight)));
        } else {
            NoGradGuard ng;
            out = static_cast<double>(fn().item());
        }
    };
    term(spec.ce, spec.w_ce, r.ce, [&] { return ce_loss(mp, mg); });
    term(spec.ssim, spec.w_ssim, r.ssim, [&] { return structural_loss(mp, mg, cfg); });
    term(spec.iou, spec.w_iou, r.iou, [&] { return iou_loss(mp, mg); });
    r.total = parts.size() == 1 ? parts.front() : add_n(parts);
    return r;
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& mp, const Tensor<T>& mg, const LossSpec& spec, const SsimConfig& cfg) {
    spec.validate();
    std::vector<Tensor<T>> parts;
    if (spec.ce) parts.push_back(mul_scalar(ce_loss(mp, mg), static_cast<T>(spec.w_ce)));
    if (spec.ssim) parts.push_back(mul_scalar(structural_loss(mp, mg, cfg), static_cast<T>(spec.w_ssim)));
    if (spec.iou) parts.push_back(mul_scalar(iou_loss(mp, mg), static_cast<T>(spec.w_iou)));
    return parts.size() == 1 ? parts.front() : add_n(parts);
}

#define SGSEG_INSTANTIATE_LOSSES(T)                                                                      \
    template Tensor<T> ce_loss(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> ssim_loss(const Tensor<T>&, const Tensor<T>&, const SsimConfig&);                 \
    template Tensor<T> ms_ssim_loss(const Tensor<T>&, const Tensor<T>&, const SsimConfig&);              \
    template Tensor<T> iou_loss(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> structural_loss(const Tensor<T>&, const Tensor<T>&, const SsimConfig&);           \
    template Tensor<T> combined_loss(const Tensor<T>&, const Tensor<T>&, const LossSpec&, const SsimConfig&); \
    template LossTerms<T> combined_loss_detailed(const Tensor<T>&, const Tensor<T>&, const LossSpec&,    \
                                                 const SsimConfig&);

SGSEG_INSTANTIATE_LOSSES(float)
SGSEG_INSTANTIATE_LOSSES(double)

#undef SGSEG_INSTANTIATE_LOSSES

}  // namespace sgseg
