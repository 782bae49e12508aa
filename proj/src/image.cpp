#include "sgseg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace sgseg {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw ImageError(std::string("png: ") + msg); }
void png_warn(png_structp, png_const_charp) {}

void write_impl(const std::filesystem::path& path, const Image& img, int bit_depth) {
    if (img.channels != 1 && img.channels != 3)
        throw ImageError("write_png: need 1 or 3 channels, got " + std::to_string(img.channels));
    if (img.height < 1 || img.width < 1) throw ImageError("write_png: empty image");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw ImageError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp* p;
        png_infop* i;
        ~Guard() { png_destroy_write_struct(p, i); }
    } guard{&png, &info};
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), bit_depth,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const int bytes = bit_depth / 8;
    const double scale = bit_depth == 8 ? 255.0 : 65535.0;
    std::vector<png_byte> row(static_cast<std::size_t>(img.width) * img.channels * bytes);
    for (int r = 0; r < img.height; ++r) {
        std::size_t k = 0;
        for (int c = 0; c < img.width; ++c)
            for (int ch = 0; ch < img.channels; ++ch) {
                const double v = std::clamp(static_cast<double>(img.at(ch, r, c)), 0.0, 1.0);
                const auto q = static_cast<unsigned>(std::lround(v * scale));
                if (bytes == 2) row[k++] = static_cast<png_byte>(q >> 8);
                row[k++] = static_cast<png_byte>(q & 0xFF);
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    if (std::fflush(f.get()) != 0) throw ImageError("write failed: " + path.string());
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw ImageError("cannot open " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw ImageError(path.string() + " is not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp* p;
        png_infop* i;
        ~Guard() { png_destroy_read_struct(p, i, nullptr); }
    } guard{&png, &info};
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (png_get_bit_depth(png, info) < 8) png_set_expand(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_set_swap(png);  // 16-bit samples little-endian in memory
    png_read_update_info(png, info);
    const int channels = png_get_channels(png, info);
    const int depth = png_get_bit_depth(png, info);
    Image img(channels == 1 ? 1 : 3, static_cast<int>(png_get_image_height(png, info)),
              static_cast<int>(png_get_image_width(png, info)));
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    const double scale = depth == 16 ? 65535.0 : 255.0;
    for (int r = 0; r < img.height; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (int c = 0; c < img.width; ++c)
            for (int ch = 0; ch < img.channels; ++ch) {
                const std::size_t k = static_cast<std::size_t>(c) * channels + ch;
                const unsigned v = depth == 16 ? row[2 * k] | (row[2 * k + 1] << 8) : row[k];
                img.at(ch, r, c) = static_cast<float>(v / scale);
            }
    }
    return img;
}

void write_png(const std::filesystem::path& path, const Image& img) { write_impl(path, img, 8); }

void write_png16(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1) throw ImageError("write_png16: need 1 channel");
    write_impl(path, img, 16);
}

Image binarize_mask(const Image& gray) {
    Image out = gray;
    for (auto& v : out.data) v = v >= 0.5f ? 1.0f : 0.0f;
    return out;
}

}  // namespace sgseg
