#pragma once

// Synthetic blob datasets and the on-disk dataset layout:
//   images/<id>.png   8-bit RGB patch
//   masks/<id>.png    8-bit gray, 0 or 255
//   slides/<wsi>.png, slide_masks/<wsi>.png   optional full-size rasters
//   manifest.json     {"folds", "samples": [{id, wsi, fold}], "slides": [{wsi, fold, patch_size, overlap}]}

#include <filesystem>
#include <string>
#include <vector>

#include "sgseg/image.hpp"
#include "sgseg/pipeline.hpp"
#include "sgseg/tensor.hpp"

namespace sgseg {

struct Sample {
    std::string id;
    std::string wsi;
    int fold = 0;
    Image image;  // 3 channels
    Image mask;   // 1 channel, 0/1
};

struct Slide {
    std::string wsi;
    int fold = 0;
    int patch_size = 0;
    int overlap = 0;
    Image image;
    Image mask;

    TileGrid grid() const { return make_grid(image.height, image.width, patch_size, overlap); }
};

struct Dataset {
    int folds = 5;
    std::vector<Sample> samples;
    std::vector<Slide> slides;

    std::vector<const Sample*> in_fold(int fold) const;
    std::vector<const Sample*> outside_fold(int fold) const;
};

struct SynthConfig {
    int min_blobs = 1;
    int max_blobs = 4;
    int min_distractors = 1;
    int max_distractors = 3;
    // radii as fractions of the reference (patch) size
    double min_radius = 0.08;
    double max_radius = 0.22;
    double distractor_min_radius = 0.04;
    double distractor_max_radius = 0.08;
    double tumour_texture = 0.10;      // per-pixel noise std
    double background_texture = 0.07;  // smooth noise amplitude
    double fine_noise = 0.02;
};

// One image of the given size. `reference` scales the blob radii; blob counts
// grow with the area relative to reference^2. The mask is non-empty.
Sample synth_sample(int height, int width, int reference, const SynthConfig& cfg, Rng& rng);

// n independent size x size samples, each its own slide, split into `folds`.
Dataset synth_generate(int n, int size, std::uint64_t seed, int folds = 5, const SynthConfig& cfg = {});

// n_slides slides of slide_size^2 pixels, tiled into size^2 patches with the
// given overlap. Patches carry their slide's id and fold.
Dataset synth_slides(int n_slides, int slide_size, int size, int overlap, std::uint64_t seed, int folds = 5,
                     const SynthConfig& cfg = {});

void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
// Throws std::invalid_argument listing any ids whose files are missing.
Dataset read_dataset(const std::filesystem::path& dir);

// Stack images into [B,C,H,W].
template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images);

}  // namespace sgseg
