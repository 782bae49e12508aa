#pragma once

// Planar float images in [0,1] and PNG I/O.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace sgseg {

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;  // [channels][height][width]

    Image() = default;
    Image(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    std::size_t index(int c, int r, int col) const {
        return (static_cast<std::size_t>(c) * height + r) * width + col;
    }
    float& at(int c, int r, int col) { return data[index(c, r, col)]; }
    float at(int c, int r, int col) const { return data[index(c, r, col)]; }
    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    bool operator==(const Image&) const = default;
};

// Gray and gray+alpha load as 1 channel, everything else as RGB (alpha
// dropped). 8- and 16-bit depths are scaled to [0,1].
Image read_png(const std::filesystem::path& path);
// 1 or 3 channels, values clamped to [0,1] and rounded to 8 bits.
void write_png(const std::filesystem::path& path, const Image& img);
// 1 channel, 16-bit gray.
void write_png16(const std::filesystem::path& path, const Image& img);

// Mask pixels >= 0.5 become 1, others 0.
Image binarize_mask(const Image& gray);

}  // namespace sgseg
