#include "sgseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace sgseg {

namespace {

std::string make_id(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%05d", prefix, i);
    return buf;
}

// Bilinearly interpolated lattice noise in [-1, 1].
std::vector<float> smooth_noise(int height, int width, int cell, Rng& rng) {
    const int gh = height / cell + 2, gw = width / cell + 2;
    std::vector<double> lattice(static_cast<std::size_t>(gh) * gw);
    for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
    std::vector<float> out(static_cast<std::size_t>(height) * width);
    for (int r = 0; r < height; ++r) {
        const double y = static_cast<double>(r) / cell;
        const int y0 = static_cast<int>(y);
        const double fy = y - y0;
        for (int c = 0; c < width; ++c) {
            const double x = static_cast<double>(c) / cell;
            const int x0 = static_cast<int>(x);
            const double fx = x - x0;
            auto L = [&](int a, int b) { return lattice[static_cast<std::size_t>(a) * gw + b]; };
            const double v = (1 - fy) * ((1 - fx) * L(y0, x0) + fx * L(y0, x0 + 1)) +
                             fy * ((1 - fx) * L(y0 + 1, x0) + fx * L(y0 + 1, x0 + 1));
            out[static_cast<std::size_t>(r) * width + c] = static_cast<float>(v);
        }
    }
    return out;
}

struct Ellipse {
    double cy, cx, a, b, theta;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double u = dx * std::cos(theta) + dy * std::sin(theta);
        const double v = -dx * std::sin(theta) + dy * std::cos(theta);
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
};

Ellipse random_ellipse(int height, int width, double rmin, double rmax, Rng& rng) {
    Ellipse e;
    e.cy = rng.uniform(0.15, 0.85) * height;
    e.cx = rng.uniform(0.15, 0.85) * width;
    e.a = std::max(1.0, rng.uniform(rmin, rmax));
    e.b = std::max(1.0, rng.uniform(rmin, rmax));
    e.theta = rng.uniform(0.0, std::numbers::pi);
    return e;
}

int scaled_count(int lo, int hi, double area_ratio, Rng& rng) {
    const int base = lo + static_cast<int>(rng.index(static_cast<std::uint64_t>(hi - lo + 1)));
    return std::max(lo, static_cast<int>(std::lround(base * area_ratio)));
}

}  // namespace

std::vector<const Sample*> Dataset::in_fold(int fold) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples)
        if (s.fold == fold) out.push_back(&s);
    return out;
}

std::vector<const Sample*> Dataset::outside_fold(int fold) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples)
        if (s.fold != fold) out.push_back(&s);
    return out;
}

Sample synth_sample(int height, int width, int reference, const SynthConfig& cfg, Rng& rng) {
    if (height < 32 || width < 32) throw std::invalid_argument("synthetic images must be at least 32x32");
    const double area_ratio = static_cast<double>(height) * width / (static_cast<double>(reference) * reference);
    // stain variation per image
    const double bg[3] = {0.88 + rng.uniform(-0.04, 0.04), 0.72 + rng.uniform(-0.04, 0.04),
                          0.82 + rng.uniform(-0.04, 0.04)};
    const double tu[3] = {0.52 + rng.uniform(-0.05, 0.05), 0.30 + rng.uniform(-0.05, 0.05),
                          0.60 + rng.uniform(-0.05, 0.05)};
    const auto smooth = smooth_noise(height, width, 8, rng);

    Sample s;
    s.image = Image(3, height, width);
    s.mask = Image(1, height, width);
    std::vector<std::uint8_t> label(static_cast<std::size_t>(height) * width, 0);  // 0 bg, 1 distractor, 2 tumour

    const int n_distract = scaled_count(cfg.min_distractors, cfg.max_distractors, area_ratio, rng);
    for (int i = 0; i < n_distract; ++i) {
        const auto e = random_ellipse(height, width, cfg.distractor_min_radius * reference,
                                      cfg.distractor_max_radius * reference, rng);
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c)
                if (e.contains(r + 0.5, c + 0.5)) label[static_cast<std::size_t>(r) * width + c] = 1;
    }
    bool any = false;
    const int n_blobs = scaled_count(cfg.min_blobs, cfg.max_blobs, area_ratio, rng);
    for (int i = 0; i < n_blobs || !any; ++i) {
        const auto e = random_ellipse(height, width, cfg.min_radius * reference, cfg.max_radius * reference, rng);
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c)
                if (e.contains(r + 0.5, c + 0.5)) {
                    label[static_cast<std::size_t>(r) * width + c] = 2;
                    any = true;
                }
    }

    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) {
            const auto px = static_cast<std::size_t>(r) * width + c;
            const double fine = rng.normal(0.0, cfg.fine_noise);
            const double* base = label[px] == 0 ? bg : tu;
            double shade;
            if (label[px] == 2) shade = rng.normal(0.0, cfg.tumour_texture);
            else shade = cfg.background_texture * smooth[px] + fine;
            for (int ch = 0; ch < 3; ++ch) s.image.at(ch, r, c) = static_cast<float>(std::clamp(base[ch] + shade, 0.0, 1.0));
            s.mask.at(0, r, c) = label[px] == 2 ? 1.0f : 0.0f;
        }
    // round-trip through 8 bits so in-memory and on-disk datasets agree
    for (auto& v : s.image.data) v = static_cast<float>(std::lround(v * 255.0) / 255.0);
    return s;
}

Dataset synth_generate(int n, int size, std::uint64_t seed, int folds, const SynthConfig& cfg) {
    if (n < 0) throw std::invalid_argument("n must be >= 0");
    Dataset ds;
    ds.folds = folds;
    Rng root(seed);
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) {
        Rng rng = root.fork(static_cast<std::uint64_t>(i));
        auto s = synth_sample(size, size, size, cfg, rng);
        s.id = make_id("s", i);
        s.wsi = s.id;
        ids.push_back(s.id);
        ds.samples.push_back(std::move(s));
    }
    if (n > 0) {
        const auto split = kfold_split(ids, folds, seed ^ 0x5eedf01dULL);
        for (auto& s : ds.samples) s.fold = split.fold_of(s.wsi);
    }
    return ds;
}

Dataset synth_slides(int n_slides, int slide_size, int size, int overlap, std::uint64_t seed, int folds,
                     const SynthConfig& cfg) {
    if (n_slides < 0) throw std::invalid_argument("slide count must be >= 0");
    Dataset ds;
    ds.folds = folds;
    Rng root(seed);
    std::vector<std::string> ids;
    for (int i = 0; i < n_slides; ++i) {
        Rng rng = root.fork(static_cast<std::uint64_t>(i));
        auto s = synth_sample(slide_size, slide_size, size, cfg, rng);
        Slide sl;
        sl.wsi = make_id("w", i);
        sl.patch_size = size;
        sl.overlap = overlap;
        sl.image = std::move(s.image);
        sl.mask = std::move(s.mask);
        ids.push_back(sl.wsi);
        ds.slides.push_back(std::move(sl));
    }
    FoldAssignment split;
    if (n_slides > 0) split = kfold_split(ids, folds, seed ^ 0x5eedf01dULL);
    for (auto& sl : ds.slides) {
        sl.fold = split.fold_of(sl.wsi);
        const auto grid = sl.grid();
        auto imgs = extract(sl.image, grid);
        auto masks = extract(sl.mask, grid);
        for (std::size_t t = 0; t < imgs.size(); ++t) {
            Sample s;
            s.id = sl.wsi + make_id("_t", static_cast<int>(t));
            s.wsi = sl.wsi;
            s.fold = sl.fold;
            s.image = std::move(imgs[t]);
            s.mask = std::move(masks[t]);
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    std::error_code ec;
    for (const char* sub : {"images", "masks"}) {
        fs::create_directories(dir / sub, ec);
        if (ec) throw std::runtime_error("cannot create " + (dir / sub).string() + ": " + ec.message());
    }
    if (!ds.slides.empty()) {
        fs::create_directories(dir / "slides", ec);
        fs::create_directories(dir / "slide_masks", ec);
        if (ec) throw std::runtime_error("cannot create slide directories under " + dir.string());
    }
    nlohmann::json j;
    j["folds"] = ds.folds;
    j["samples"] = nlohmann::json::array();
    j["slides"] = nlohmann::json::array();
    for (const auto& s : ds.samples) {
        write_png(dir / "images" / (s.id + ".png"), s.image);
        write_png(dir / "masks" / (s.id + ".png"), s.mask);
        j["samples"].push_back({{"id", s.id}, {"wsi", s.wsi}, {"fold", s.fold}});
    }
    for (const auto& sl : ds.slides) {
        write_png(dir / "slides" / (sl.wsi + ".png"), sl.image);
        write_png(dir / "slide_masks" / (sl.wsi + ".png"), sl.mask);
        j["slides"].push_back(
            {{"wsi", sl.wsi}, {"fold", sl.fold}, {"patch_size", sl.patch_size}, {"overlap", sl.overlap}});
    }
    std::ofstream os(dir / "manifest.json", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    os << j.dump(2) << "\n";
}

Dataset read_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream is(dir / "manifest.json", std::ios::binary);
    if (!is) throw std::invalid_argument("no manifest.json in " + dir.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("bad manifest.json: ") + e.what());
    }
    Dataset ds;
    std::vector<std::string> missing;
    try {
        ds.folds = j.value("folds", 5);
        for (const auto& e : j.at("samples")) {
            Sample s;
            s.id = e.at("id").get<std::string>();
            s.wsi = e.value("wsi", s.id);
            s.fold = e.value("fold", 0);
            const auto ip = dir / "images" / (s.id + ".png"), mp = dir / "masks" / (s.id + ".png");
            if (!fs::exists(ip) || !fs::exists(mp)) {
                missing.push_back(s.id);
                continue;
            }
            s.image = read_png(ip);
            s.mask = binarize_mask(read_png(mp));
            if (s.image.channels != 3 || s.mask.channels != 1 || s.image.height != s.mask.height ||
                s.image.width != s.mask.width)
                throw std::invalid_argument("sample '" + s.id + "': image must be RGB and mask gray of equal size");
            ds.samples.push_back(std::move(s));
        }
        if (j.contains("slides"))
            for (const auto& e : j.at("slides")) {
                Slide sl;
                sl.wsi = e.at("wsi").get<std::string>();
                sl.fold = e.value("fold", 0);
                sl.patch_size = e.at("patch_size").get<int>();
                sl.overlap = e.at("overlap").get<int>();
                const auto ip = dir / "slides" / (sl.wsi + ".png"), mp = dir / "slide_masks" / (sl.wsi + ".png");
                if (!fs::exists(ip) || !fs::exists(mp)) {
                    missing.push_back(sl.wsi);
                    continue;
                }
                sl.image = read_png(ip);
                sl.mask = binarize_mask(read_png(mp));
                ds.slides.push_back(std::move(sl));
            }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("bad manifest.json: ") + e.what());
    }
    if (!missing.empty()) {
        std::string msg = "missing files for ids:";
        for (const auto& id : missing) msg += " " + id;
        throw std::invalid_argument(msg);
    }
    return ds;
}

template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
    if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
    const auto& f = *images.front();
    std::vector<T> data;
    data.reserve(images.size() * f.data.size());
    for (const auto* im : images) {
        if (im->channels != f.channels || im->height != f.height || im->width != f.width)
            throw ShapeError("images_to_tensor: images differ in shape");
        data.insert(data.end(), im->data.begin(), im->data.end());
    }
    return Tensor<T>({static_cast<std::int64_t>(images.size()), f.channels, f.height, f.width}, std::move(data));
}

template Tensor<float> images_to_tensor<float>(const std::vector<const Image*>&);
template Tensor<double> images_to_tensor<double>(const std::vector<const Image*>&);

}  // namespace sgseg
