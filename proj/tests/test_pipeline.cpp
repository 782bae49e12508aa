#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "sgseg/dataset.hpp"
#include "sgseg/pipeline.hpp"

using namespace sgseg;
namespace fs = std::filesystem;

namespace {

std::vector<int> axis_positions(const TileGrid& g, bool rows) {
    std::set<int> s;
    for (auto [r, c] : g.positions) s.insert(rows ? r : c);
    return {s.begin(), s.end()};
}

Image random_image(int c, int h, int w, Rng& rng) {
    Image img(c, h, w);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

Image random_binary(int h, int w, Rng& rng) {
    Image img(1, h, w);
    for (auto& v : img.data) v = rng.bernoulli(0.4) ? 1.0f : 0.0f;
    return img;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("sgseg_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

// ---- grids ----

TEST_CASE("make_grid examples") {
    const auto g = make_grid(1000, 1000, 400, 200);
    CHECK(g.positions.size() == 16);
    CHECK(axis_positions(g, true) == std::vector<int>{0, 200, 400, 600});
    const auto one = make_grid(64, 64, 64, 10);
    REQUIRE(one.positions.size() == 1);
    CHECK(one.positions[0] == std::pair<int, int>{0, 0});
    const auto c = make_grid(900, 900, 400, 200);
    CHECK(c.positions.size() == 16);
    CHECK(axis_positions(c, false) == std::vector<int>{0, 200, 400, 500});
    CHECK_THROWS(make_grid(300, 500, 400, 0));
    CHECK_THROWS(make_grid(500, 500, 400, 400));
}

TEST_CASE("make_grid covers every pixel, row-major, in a randomized sweep") {
    Rng rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        const int H = 1 + static_cast<int>(rng.index(120)), W = 1 + static_cast<int>(rng.index(120));
        const int P = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(std::min(H, W))));
        const int O = static_cast<int>(rng.index(static_cast<std::uint64_t>(P)));
        const auto g = make_grid(H, W, P, O);
        std::vector<int> cover(static_cast<std::size_t>(H * W), 0);
        for (auto [r, c] : g.positions) {
            REQUIRE(r + P <= H);
            REQUIRE(c + P <= W);
            for (int i = r; i < r + P; ++i)
                for (int j = c; j < c + P; ++j) ++cover[static_cast<std::size_t>(i * W + j)];
        }
        INFO(H << "x" << W << " patch " << P << " overlap " << O);
        CHECK(std::count(cover.begin(), cover.end(), 0) == 0);
        CHECK(std::is_sorted(g.positions.begin(), g.positions.end()));
    }
}

TEST_CASE("grid json round-trip") {
    const auto g = make_grid(900, 700, 400, 150);
    CHECK(grid_from_json(grid_to_json(g)) == g);
    CHECK(grid_to_json(g) == grid_to_json(grid_from_json(grid_to_json(g))));
    const auto dir = temp_dir("grid");
    save_grid(dir / "g.json", g);
    CHECK(load_grid(dir / "g.json") == g);
    CHECK_THROWS(grid_from_json("{\"image_size\": [10]}"));
}

// ---- extract / stitch ----

TEST_CASE("stitch of extracted patches is the identity") {
    Rng rng(2);
    for (int trial = 0; trial < 30; ++trial) {
        const int H = 20 + static_cast<int>(rng.index(60)), W = 20 + static_cast<int>(rng.index(60));
        const int P = 8 + static_cast<int>(rng.index(12)), O = static_cast<int>(rng.index(static_cast<std::uint64_t>(P)));
        const auto g = make_grid(H, W, P, O);
        auto prob = random_image(1, H, W, rng);
        auto back = stitch(extract(prob, g), g);
        for (std::size_t i = 0; i < prob.data.size(); ++i) CHECK(std::abs(back.data[i] - prob.data[i]) < 1e-6);
        auto bin = random_binary(H, W, rng);
        CHECK(stitch(extract(bin, g), g) == bin);
    }
}

TEST_CASE("stitch examples") {
    const auto g = make_grid(30, 30, 20, 10);
    std::vector<Image> c(g.positions.size(), Image(1, 20, 20, 0.3f));
    for (float v : stitch(c, g).data) CHECK(v == doctest::Approx(0.3f));

    // two patches side by side with a 10-pixel overlap, predicting 0 and 1
    const auto two = make_grid(20, 30, 20, 10);
    REQUIRE(two.positions.size() == 2);
    std::vector<Image> maps{Image(1, 20, 20, 0.0f), Image(1, 20, 20, 1.0f)};
    const auto s = stitch(maps, two);
    for (int r = 0; r < 20; ++r) {
        CHECK(s.at(0, r, 5) == 0.0f);
        CHECK(s.at(0, r, 15) == 0.5f);
        CHECK(s.at(0, r, 25) == 1.0f);
    }
    maps.pop_back();
    CHECK_THROWS(stitch(maps, two));
}

// ---- folds ----

TEST_CASE("kfold_split examples and invariants") {
    std::vector<std::string> ids;
    for (int i = 0; i < 50; ++i) ids.push_back("wsi" + std::to_string(i));
    const auto f = kfold_split(ids, 5, 7);
    std::set<std::string> all;
    for (int k = 0; k < 5; ++k) {
        const auto m = f.members(k);
        CHECK(m.size() == 10);
        for (auto& id : m) CHECK(all.insert(id).second);
    }
    CHECK(all == std::set<std::string>(ids.begin(), ids.end()));
    CHECK(kfold_split(ids, 5, 7).wsi_to_fold == f.wsi_to_fold);
    CHECK(kfold_split(ids, 5, 8).wsi_to_fold != f.wsi_to_fold);
    for (int n = 5; n < 40; ++n) {
        std::vector<std::string> sub(ids.begin(), ids.begin() + n);
        const auto s = kfold_split(sub, 5, static_cast<std::uint64_t>(n));
        std::size_t lo = 1000, hi = 0;
        for (int k = 0; k < 5; ++k) lo = std::min(lo, s.members(k).size()), hi = std::max(hi, s.members(k).size());
        CHECK(hi - lo <= 1);
    }
    CHECK_THROWS(kfold_split({"a", "b"}, 5, 1));
    CHECK_THROWS(kfold_split({"a", "a", "b", "c", "d"}, 2, 1));
}

TEST_CASE("patches inherit the fold of their slide") {
    for (int seed = 0; seed < 5; ++seed) {
        auto ds = synth_slides(6, 96, 32, 8, static_cast<std::uint64_t>(seed), 3);
        std::map<std::string, int> slide_fold;
        for (auto& s : ds.slides) slide_fold[s.wsi] = s.fold;
        std::map<std::string, std::set<int>> seen;
        for (auto& s : ds.samples) {
            seen[s.wsi].insert(s.fold);
            CHECK(s.fold == slide_fold.at(s.wsi));
        }
        for (auto& [w, folds] : seen) CHECK(folds.size() == 1);
        CHECK(ds.samples.size() == 6 * 16);
    }
}

// ---- augmentation ----

TEST_CASE("augment with p = 0 is the identity") {
    Rng rng(3);
    auto img = random_image(3, 12, 9, rng);
    auto mask = random_binary(12, 9, rng);
    const auto i0 = img, m0 = mask;
    AugmentConfig cfg;
    cfg.p = 0;
    for (int i = 0; i < 20; ++i) augment(img, mask, cfg, rng);
    CHECK(img == i0);
    CHECK(mask == m0);
}

TEST_CASE("rotation by 180 twice is the identity") {
    Rng rng(4);
    auto img = random_image(3, 7, 11, rng);
    CHECK(rotate90(rotate90(img, 2), 2) == img);
    CHECK(rotate90(rotate90(img, 1), 3) == img);
    CHECK(flip_horizontal(flip_horizontal(img)) == img);
}

TEST_CASE("geometric augmentation moves mask pixels by the recorded transform") {
    // forward point maps: source (r,c) lands at T(r,c)
    auto rot = [](int r, int c, int /*H*/, int W) { return std::pair<int, int>{W - 1 - c, r}; };
    for (int seed = 0; seed < 200; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        const int H = 5 + static_cast<int>(rng.index(6)), W = 5 + static_cast<int>(rng.index(6));
        auto img = random_image(3, H, W, rng);
        Image mask(1, H, W);
        Image ids(1, H, W);
        for (int i = 0; i < H * W; ++i) {
            mask.data[static_cast<std::size_t>(i)] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
            ids.data[static_cast<std::size_t>(i)] = static_cast<float>(i);
        }
        auto m2 = mask;
        auto id2 = ids;
        AugmentConfig cfg;
        cfg.jitter = false;
        Rng a(static_cast<std::uint64_t>(seed) + 1), b(static_cast<std::uint64_t>(seed) + 1);
        auto img2 = img;
        const auto rec = augment(img2, m2, cfg, a);
        const auto rec2 = augment(id2, ids, cfg, b);  // same draws: ids follow the same transform
        CHECK(rec.quarter_turns == rec2.quarter_turns);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                int rr = r, cc = c, h = H, w = W;
                for (int k = 0; k < rec.quarter_turns; ++k) {
                    std::tie(rr, cc) = rot(rr, cc, h, w);
                    std::swap(h, w);
                }
                if (rec.hflip) cc = w - 1 - cc;
                if (rec.vflip) rr = h - 1 - rr;
                REQUIRE(m2.height == h);
                CHECK(m2.at(0, rr, cc) == mask.at(0, r, c));
                for (int ch = 0; ch < 3; ++ch) CHECK(img2.at(ch, rr, cc) == img.at(ch, r, c));
            }
    }
}

TEST_CASE("augment keeps masks binary and images in range") {
    Rng rng(5);
    AugmentConfig cfg;
    cfg.p = 0.9;
    int jittered = 0;
    for (int i = 0; i < 100; ++i) {
        auto img = random_image(3, 8, 8, rng);
        auto mask = random_binary(8, 8, rng);
        const auto before = mask;
        const auto rec = augment(img, mask, cfg, rng);
        jittered += rec.jittered;
        for (float v : mask.data) CHECK((v == 0.0f || v == 1.0f));
        for (float v : img.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
        CHECK(std::count(mask.data.begin(), mask.data.end(), 1.0f) ==
              std::count(before.data.begin(), before.data.end(), 1.0f));
    }
    CHECK(jittered > 50);
}

TEST_CASE("color jitter identity parameters leave the image unchanged") {
    Rng rng(6);
    auto img = random_image(3, 6, 6, rng);
    auto out = color_jitter(img, 1, 1, 1, 0);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(out.data[i] - img.data[i]) < 1e-5f);
    auto dark = color_jitter(img, 0.5, 1, 1, 0);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(dark.data[i] - 0.5f * img.data[i]) < 1e-5f);
}

// ---- synthetic data ----

TEST_CASE("synth_generate is deterministic with binary, non-empty masks") {
    const auto a = synth_generate(12, 48, 3), b = synth_generate(12, 48, 3), c = synth_generate(12, 48, 4);
    REQUIRE(a.samples.size() == 12);
    bool differs = false;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].image == b.samples[i].image);
        CHECK(a.samples[i].mask == b.samples[i].mask);
        CHECK(a.samples[i].fold == b.samples[i].fold);
        differs = differs || !(a.samples[i].image == c.samples[i].image);
        const auto& m = a.samples[i].mask;
        CHECK(m.channels == 1);
        for (float v : m.data) CHECK((v == 0.0f || v == 1.0f));
        CHECK(std::count(m.data.begin(), m.data.end(), 1.0f) > 0);
        for (float v : a.samples[i].image.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    CHECK(differs);
}

TEST_CASE("synthetic foreground fraction stays in [0.1, 0.6]") {
    const auto ds = synth_generate(100, 64, 11);
    double total = 0;
    for (auto& s : ds.samples)
        total += static_cast<double>(std::count(s.mask.data.begin(), s.mask.data.end(), 1.0f)) /
                 static_cast<double>(s.mask.data.size());
    const double mean = total / 100;
    MESSAGE("mean foreground fraction " << mean);
    CHECK(mean >= 0.1);
    CHECK(mean <= 0.6);
}

TEST_CASE("dataset directory round-trip and missing-file errors") {
    const auto dir = temp_dir("dataset");
    auto ds = synth_slides(3, 64, 32, 0, 5, 3);
    write_dataset(dir, ds);
    CHECK(fs::exists(dir / "manifest.json"));
    const auto back = read_dataset(dir);
    REQUIRE(back.samples.size() == ds.samples.size());
    REQUIRE(back.slides.size() == 3);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        CHECK(back.samples[i].id == ds.samples[i].id);
        CHECK(back.samples[i].wsi == ds.samples[i].wsi);
        CHECK(back.samples[i].fold == ds.samples[i].fold);
        CHECK(back.samples[i].image == ds.samples[i].image);  // images are 8-bit quantised already
        CHECK(back.samples[i].mask == ds.samples[i].mask);
    }
    CHECK(back.slides[1].mask == ds.slides[1].mask);
    fs::remove(dir / "images" / (ds.samples[2].id + ".png"));
    fs::remove(dir / "masks" / (ds.samples[4].id + ".png"));
    try {
        read_dataset(dir);
        FAIL("expected an error");
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        CHECK(msg.find(ds.samples[2].id) != std::string::npos);
        CHECK(msg.find(ds.samples[4].id) != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("images_to_tensor stacks planar images") {
    Rng rng(9);
    auto a = random_image(3, 4, 5, rng), b = random_image(3, 4, 5, rng);
    const auto t = images_to_tensor<double>({&a, &b});
    CHECK(t.shape() == Shape{2, 3, 4, 5});
    CHECK(t[60 + 2 * 20 + 7] == static_cast<double>(b.at(2, 1, 2)));
}
