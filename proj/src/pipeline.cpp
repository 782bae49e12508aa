#include "sgseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace sgseg {

namespace {

std::vector<int> axis_positions(int dim, int patch, int stride) {
    std::vector<int> out;
    for (int p = 0; p + patch <= dim; p += stride) out.push_back(p);
    if (out.back() != dim - patch) out.push_back(dim - patch);
    return out;
}

}  // namespace

TileGrid make_grid(int height, int width, int patch_size, int overlap) {
    if (patch_size < 1) throw std::invalid_argument("patch size must be >= 1");
    if (overlap < 0 || overlap >= patch_size)
        throw std::invalid_argument("overlap must be in [0, patch size), got " + std::to_string(overlap));
    if (patch_size > std::min(height, width))
        throw std::invalid_argument("patch " + std::to_string(patch_size) + " larger than image " +
                                    std::to_string(height) + "x" + std::to_string(width));
    TileGrid g{height, width, patch_size, overlap, {}};
    const auto rows = axis_positions(height, patch_size, g.stride());
    const auto cols = axis_positions(width, patch_size, g.stride());
    for (int r : rows)
        for (int c : cols) g.positions.emplace_back(r, c);
    return g;
}

std::vector<Image> extract(const Image& image, const TileGrid& grid) {
    if (image.height != grid.height || image.width != grid.width)
        throw std::invalid_argument("extract: image " + std::to_string(image.height) + "x" +
                                    std::to_string(image.width) + " does not match grid");
    std::vector<Image> out;
    out.reserve(grid.positions.size());
    const int p = grid.patch_size;
    for (auto [r0, c0] : grid.positions) {
        Image patch(image.channels, p, p);
        for (int ch = 0; ch < image.channels; ++ch)
            for (int r = 0; r < p; ++r)
                std::copy_n(&image.data[image.index(ch, r0 + r, c0)], p, &patch.data[patch.index(ch, r, 0)]);
        out.push_back(std::move(patch));
    }
    return out;
}

Image stitch(const std::vector<Image>& patch_maps, const TileGrid& grid) {
    if (patch_maps.size() != grid.positions.size())
        throw std::invalid_argument("stitch: " + std::to_string(patch_maps.size()) + " maps for " +
                                    std::to_string(grid.positions.size()) + " grid positions");
    if (patch_maps.empty()) throw std::invalid_argument("stitch: empty grid");
    const int channels = patch_maps.front().channels, p = grid.patch_size;
    std::vector<double> acc(static_cast<std::size_t>(channels) * grid.height * grid.width, 0.0);
    std::vector<int> count(static_cast<std::size_t>(grid.height) * grid.width, 0);
    for (std::size_t i = 0; i < patch_maps.size(); ++i) {
        const auto& m = patch_maps[i];
        if (m.channels != channels || m.height != p || m.width != p)
            throw std::invalid_argument("stitch: patch " + std::to_string(i) + " has the wrong shape");
        const auto [r0, c0] = grid.positions[i];
        for (int r = 0; r < p; ++r)
            for (int c = 0; c < p; ++c) {
                const auto px = static_cast<std::size_t>(r0 + r) * grid.width + (c0 + c);
                ++count[px];
                for (int ch = 0; ch < channels; ++ch)
                    acc[static_cast<std::size_t>(ch) * grid.height * grid.width + px] += m.at(ch, r, c);
            }
    }
    Image out(channels, grid.height, grid.width);
    const std::size_t plane = out.plane();
    for (int ch = 0; ch < channels; ++ch)
        for (std::size_t px = 0; px < plane; ++px) {
            if (count[px] == 0) throw std::invalid_argument("stitch: grid leaves pixels uncovered");
            out.data[ch * plane + px] = static_cast<float>(acc[ch * plane + px] / count[px]);
        }
    return out;
}

std::string grid_to_json(const TileGrid& grid) {
    nlohmann::json j;
    j["image_size"] = {grid.height, grid.width};
    j["patch_size"] = grid.patch_size;
    j["overlap"] = grid.overlap;
    auto pos = nlohmann::json::array();
    for (auto [r, c] : grid.positions) pos.push_back({r, c});
    j["positions"] = pos;
    return j.dump(2) + "\n";
}

TileGrid grid_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        TileGrid g;
        g.height = j.at("image_size").at(0).get<int>();
        g.width = j.at("image_size").at(1).get<int>();
        g.patch_size = j.at("patch_size").get<int>();
        g.overlap = j.at("overlap").get<int>();
        for (const auto& p : j.at("positions")) {
            const int r = p.at(0).get<int>(), c = p.at(1).get<int>();
            if (r < 0 || c < 0 || r + g.patch_size > g.height || c + g.patch_size > g.width)
                throw std::invalid_argument("grid position outside the image");
            g.positions.emplace_back(r, c);
        }
        return g;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("bad grid manifest: ") + e.what());
    }
}

void save_grid(const std::filesystem::path& path, const TileGrid& grid) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << grid_to_json(grid);
}

TileGrid load_grid(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::invalid_argument("cannot read grid manifest " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return grid_from_json(ss.str());
}

int FoldAssignment::fold_of(const std::string& wsi) const {
    const auto it = wsi_to_fold.find(wsi);
    if (it == wsi_to_fold.end()) throw std::out_of_range("no fold for slide '" + wsi + "'");
    return it->second;
}

std::vector<std::string> FoldAssignment::members(int fold) const {
    std::vector<std::string> out;
    for (const auto& [w, f] : wsi_to_fold)
        if (f == fold) out.push_back(w);
    return out;
}

FoldAssignment kfold_split(const std::vector<std::string>& wsi_ids, int k, std::uint64_t seed) {
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    if (static_cast<int>(wsi_ids.size()) < k)
        throw std::invalid_argument("kfold_split: " + std::to_string(wsi_ids.size()) + " slides for " +
                                    std::to_string(k) + " folds");
    if (std::set<std::string>(wsi_ids.begin(), wsi_ids.end()).size() != wsi_ids.size())
        throw std::invalid_argument("kfold_split: duplicate slide ids");
    auto order = wsi_ids;
    Rng rng(seed);
    rng.shuffle(order);
    FoldAssignment a;
    a.k = k;
    for (std::size_t i = 0; i < order.size(); ++i) a.wsi_to_fold[order[i]] = static_cast<int>(i % k);
    return a;
}

void AugmentConfig::validate() const {
    if (!(p >= 0 && p <= 1)) throw std::invalid_argument("augment p must be in [0,1]");
    if (brightness < 0 || contrast < 0 || saturation < 0 || hue < 0)
        throw std::invalid_argument("jitter ranges must be >= 0");
}

Image rotate90(const Image& img, int quarter_turns) {
    const int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return img;
    const bool swap = k % 2 == 1;
    Image out(img.channels, swap ? img.width : img.height, swap ? img.height : img.width);
    const int H = img.height, W = img.width;
    for (int ch = 0; ch < img.channels; ++ch)
        for (int r = 0; r < out.height; ++r)
            for (int c = 0; c < out.width; ++c) {
                int sr, sc;
                if (k == 1) sr = c, sc = W - 1 - r;
                else if (k == 2) sr = H - 1 - r, sc = W - 1 - c;
                else sr = H - 1 - c, sc = r;
                out.at(ch, r, c) = img.at(ch, sr, sc);
            }
    return out;
}

Image flip_horizontal(const Image& img) {
    Image out = img;
    for (int ch = 0; ch < img.channels; ++ch)
        for (int r = 0; r < img.height; ++r)
            for (int c = 0; c < img.width; ++c) out.at(ch, r, c) = img.at(ch, r, img.width - 1 - c);
    return out;
}

Image flip_vertical(const Image& img) {
    Image out = img;
    for (int ch = 0; ch < img.channels; ++ch)
        for (int r = 0; r < img.height; ++r)
            std::copy_n(&img.data[img.index(ch, img.height - 1 - r, 0)], img.width, &out.data[out.index(ch, r, 0)]);
    return out;
}

namespace {

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0;
    if (d <= 0) {
        h = 0;
        return;
    }
    if (mx == r) h = std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = (b - r) / d + 2;
    else h = (r - g) / d + 4;
    h /= 6;
    if (h < 0) h += 1;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = (h - std::floor(h)) * 6;
    const int i = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

Image color_jitter(const Image& rgb, double brightness, double contrast, double saturation, double hue) {
    if (rgb.channels != 3) throw std::invalid_argument("color_jitter needs an RGB image");
    Image out = rgb;
    const std::size_t n = out.plane();
    float* R = out.data.data();
    float* G = R + n;
    float* B = G + n;
    auto gray = [&](std::size_t i) { return 0.299 * R[i] + 0.587 * G[i] + 0.114 * B[i]; };
    for (auto& v : out.data) v = clamp01(v * brightness);
    double mean_gray = 0;
    for (std::size_t i = 0; i < n; ++i) mean_gray += gray(i);
    mean_gray /= static_cast<double>(n);
    for (auto& v : out.data) v = clamp01(mean_gray + contrast * (v - mean_gray));
    for (std::size_t i = 0; i < n; ++i) {
        const double g = gray(i);
        R[i] = clamp01(g + saturation * (R[i] - g));
        G[i] = clamp01(g + saturation * (G[i] - g));
        B[i] = clamp01(g + saturation * (B[i] - g));
    }
    if (hue != 0)
        for (std::size_t i = 0; i < n; ++i) {
            double h, s, v, r, g, b;
            rgb_to_hsv(R[i], G[i], B[i], h, s, v);
            hsv_to_rgb(h + hue, s, v, r, g, b);
            R[i] = clamp01(r), G[i] = clamp01(g), B[i] = clamp01(b);
        }
    return out;
}

AugmentRecord augment(Image& image, Image& mask, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    if (image.height != mask.height || image.width != mask.width)
        throw std::invalid_argument("augment: image and mask are not aligned");
    AugmentRecord rec;
    if (cfg.rotate && rng.bernoulli(cfg.p)) rec.quarter_turns = static_cast<int>(rng.index(4));
    if (cfg.hflip) rec.hflip = rng.bernoulli(cfg.p);
    if (cfg.vflip) rec.vflip = rng.bernoulli(cfg.p);
    if (cfg.jitter && image.channels == 3 && rng.bernoulli(cfg.p)) {
        rec.jittered = true;
        rec.brightness = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness);
        rec.contrast = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast);
        rec.saturation = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation);
        rec.hue = rng.uniform(-cfg.hue, cfg.hue);
    }
    if (rec.quarter_turns) {
        image = rotate90(image, rec.quarter_turns);
        mask = rotate90(mask, rec.quarter_turns);
    }
    if (rec.hflip) {
        image = flip_horizontal(image);
        mask = flip_horizontal(mask);
    }
    if (rec.vflip) {
        image = flip_vertical(image);
        mask = flip_vertical(mask);
    }
    if (rec.jittered) image = color_jitter(image, rec.brightness, rec.contrast, rec.saturation, rec.hue);
    return rec;
}

}  // namespace sgseg
