#pragma once

// Patch tiling and stitching, slide-level k-fold splits and training-time
// augmentation.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sgseg/image.hpp"
#include "sgseg/rng.hpp"

namespace sgseg {

struct TileGrid {
    int height = 0;
    int width = 0;
    int patch_size = 0;
    int overlap = 0;
    std::vector<std::pair<int, int>> positions;  // (row, col) top-left, row-major

    int stride() const { return patch_size - overlap; }
    bool operator==(const TileGrid&) const = default;
};

// Positions at multiples of the stride; the last one on each axis is clamped
// to dim - patch_size so that every pixel is covered.
TileGrid make_grid(int height, int width, int patch_size, int overlap);
std::vector<Image> extract(const Image& image, const TileGrid& grid);
// Pixelwise mean of all patch maps covering each pixel.
Image stitch(const std::vector<Image>& patch_maps, const TileGrid& grid);

std::string grid_to_json(const TileGrid& grid);
TileGrid grid_from_json(const std::string& text);
void save_grid(const std::filesystem::path& path, const TileGrid& grid);
TileGrid load_grid(const std::filesystem::path& path);

struct FoldAssignment {
    int k = 5;
    std::map<std::string, int> wsi_to_fold;

    int fold_of(const std::string& wsi) const;
    std::vector<std::string> members(int fold) const;
};

// Seeded shuffle, then round-robin over folds.
FoldAssignment kfold_split(const std::vector<std::string>& wsi_ids, int k, std::uint64_t seed);

struct AugmentConfig {
    double p = 0.5;
    bool rotate = true;
    bool hflip = true;
    bool vflip = true;
    bool jitter = true;
    double brightness = 0.25;
    double contrast = 0.25;
    double saturation = 0.25;
    double hue = 0.04;  // fraction of a full hue turn

    void validate() const;
};

// What augment() did, for tests and logs.
struct AugmentRecord {
    int quarter_turns = 0;  // counter-clockwise
    bool hflip = false;
    bool vflip = false;
    bool jittered = false;
    double brightness = 1, contrast = 1, saturation = 1, hue = 0;
};

Image rotate90(const Image& img, int quarter_turns);  // counter-clockwise
Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
// RGB only. Factors multiply (brightness), blend toward the mean gray
// (contrast) or toward per-pixel gray (saturation); hue shifts in HSV.
Image color_jitter(const Image& rgb, double brightness, double contrast, double saturation, double hue);

// Geometric transforms act on both image and mask; jitter on the image only.
AugmentRecord augment(Image& image, Image& mask, const AugmentConfig& cfg, Rng& rng);

}  // namespace sgseg
