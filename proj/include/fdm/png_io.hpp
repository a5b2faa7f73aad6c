#pragma once

#include <png.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "fdm/common.hpp"
#include "fdm/tensor.hpp"

// Thin libpng wrappers: 8-bit RGB images for model inputs/outputs and
// indexed-palette images for segmentation masks (palette index == region
// label, so masks round-trip exactly). Also the float<->byte conventions for
// images normalized to [-1, 1], and a montage helper for visual inspection.

namespace fdm {

struct ImageU8 {
    int width = 0, height = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

struct IndexedImage {
    int width = 0, height = 0;
    std::vector<std::uint8_t> idx;  // row-major, one label byte per pixel
};

using Rgb = std::array<std::uint8_t, 3>;

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

// Distinct colors for region labels; index 0 (background) is black.
inline Rgb region_color(int label) {
    static const Rgb table[] = {
        {0, 0, 0},       {230, 25, 75},   {60, 180, 75},  {255, 225, 25},
        {0, 130, 200},   {245, 130, 48},  {145, 30, 180}, {70, 240, 240},
        {240, 50, 230},  {210, 245, 60},  {250, 190, 212}, {0, 128, 128},
        {220, 190, 255}, {170, 110, 40},  {255, 250, 200}, {128, 0, 0},
    };
    constexpr int n = int(sizeof(table) / sizeof(table[0]));
    if (label < 0 || label >= n)
        throw ContractError(strformat("region_color: label %d outside supported range [0, %d]",
                                      label, n - 1));
    return table[label];
}

inline std::vector<Rgb> region_palette(int k) {
    std::vector<Rgb> p;
    for (int i = 0; i < k; i++) p.push_back(region_color(i));
    return p;
}

inline void write_png_rgb8(const std::string& path, const ImageU8& im) {
    if (im.width <= 0 || im.height <= 0 ||
        im.rgb.size() != std::size_t(im.width) * std::size_t(im.height) * 3)
        throw ShapeError(strformat("write_png_rgb8: %dx%d does not match %zu bytes", im.width,
                                   im.height, im.rgb.size()));
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng: failed to allocate write struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng: failed to allocate info struct");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng error while writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(im.width), png_uint_32(im.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < im.height; y++)
        png_write_row(png, const_cast<png_bytep>(im.rgb.data() + std::size_t(y) * im.width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Reads any PNG, normalizing to 8-bit RGB (palette expanded, gray promoted,
// alpha stripped).
inline ImageU8 read_png_rgb8(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path);
    ImageU8 out;
    std::vector<png_bytep> rows;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng: failed to allocate read struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng: failed to allocate info struct");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng error while reading " + path + " (not a PNG?)");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_uint_32 w = 0, h = 0;
    int bit_depth = 0, color_type = 0;
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    if (png_get_rowbytes(png, info) != std::size_t(w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unexpected row size after RGB normalization in " + path);
    }
    out.width = int(w);
    out.height = int(h);
    out.rgb.resize(std::size_t(w) * h * 3);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; y++) rows[y] = out.rgb.data() + std::size_t(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

inline void write_png_indexed(const std::string& path, const IndexedImage& im,
                              const std::vector<Rgb>& palette) {
    if (im.width <= 0 || im.height <= 0 ||
        im.idx.size() != std::size_t(im.width) * std::size_t(im.height))
        throw ShapeError(strformat("write_png_indexed: %dx%d does not match %zu bytes", im.width,
                                   im.height, im.idx.size()));
    if (palette.empty() || palette.size() > 256)
        throw ContractError(strformat("write_png_indexed: palette size %zu outside [1, 256]",
                                      palette.size()));
    for (std::uint8_t v : im.idx)
        if (v >= palette.size())
            throw ContractError(strformat("write_png_indexed: label %d exceeds palette size %zu",
                                          int(v), palette.size()));
    png_color plte[256];
    for (std::size_t i = 0; i < palette.size(); i++)
        plte[i] = {palette[i][0], palette[i][1], palette[i][2]};
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng: failed to allocate write struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng: failed to allocate info struct");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng error while writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(im.width), png_uint_32(im.height), 8,
                 PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_set_PLTE(png, info, plte, int(palette.size()));
    png_write_info(png, info);
    for (int y = 0; y < im.height; y++)
        png_write_row(png, const_cast<png_bytep>(im.idx.data() + std::size_t(y) * im.width));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Reads label bytes from an indexed-palette PNG (the format write_png_indexed
// produces). Refuses non-palette files rather than guessing a color-to-label
// mapping.
inline IndexedImage read_png_indexed(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path);
    IndexedImage out;
    std::vector<png_bytep> rows;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng: failed to allocate read struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng: failed to allocate info struct");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng error while reading " + path + " (not a PNG?)");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_uint_32 w = 0, h = 0;
    int bit_depth = 0, color_type = 0;
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);
    if (color_type != PNG_COLOR_TYPE_PALETTE || bit_depth > 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path + ": expected an 8-bit indexed-palette PNG mask");
    }
    if (bit_depth < 8) png_set_packing(png);
    png_read_update_info(png, info);
    out.width = int(w);
    out.height = int(h);
    out.idx.resize(std::size_t(w) * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; y++) rows[y] = out.idx.data() + std::size_t(y) * w;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

// --- [-1, 1] float <-> byte conventions ---

inline std::uint8_t float_to_byte(float v) {
    long p = std::lround((double(v) + 1.0) * 127.5);
    if (p < 0) p = 0;
    if (p > 255) p = 255;
    return std::uint8_t(p);
}

inline float byte_to_float(std::uint8_t p) { return float(p) / 127.5f - 1.0f; }

// Extracts image b of a (B, 3, H, W) tensor as interleaved RGB8.
inline ImageU8 tensor_to_u8(const Tensor<float>& x, int b) {
    check_rank4(x, "tensor_to_u8 input");
    if (x.dim(1) != 3)
        throw ShapeError(strformat("tensor_to_u8: need 3 channels, got %d", x.dim(1)));
    if (b < 0 || b >= x.dim(0))
        throw ShapeError(strformat("tensor_to_u8: image %d out of range [0, %d)", b, x.dim(0)));
    int H = x.dim(2), W = x.dim(3);
    std::int64_t HW = std::int64_t(H) * W;
    const float* base = x.data() + std::int64_t(b) * 3 * HW;
    ImageU8 im;
    im.width = W;
    im.height = H;
    im.rgb.resize(std::size_t(HW) * 3);
    for (std::int64_t i = 0; i < HW; i++)
        for (int c = 0; c < 3; c++) im.rgb[std::size_t(i) * 3 + c] = float_to_byte(base[c * HW + i]);
    return im;
}

// Inverse of tensor_to_u8: fills 3*H*W floats in channel-planar order.
inline void u8_to_tensor(const ImageU8& im, float* chw) {
    std::int64_t HW = std::int64_t(im.width) * im.height;
    for (std::int64_t i = 0; i < HW; i++)
        for (int c = 0; c < 3; c++) chw[c * HW + i] = byte_to_float(im.rgb[std::size_t(i) * 3 + c]);
}

// Side-by-side (image | colorized mask) rows for every sample in the batch,
// with a light separator between panels.
inline ImageU8 montage_with_masks(const Tensor<float>& images, const Tensor<int>& hard,
                                  int sep = 2) {
    check_rank4(images, "montage images");
    if (hard.rank() != 3 || hard.dim(0) != images.dim(0) || hard.dim(1) != images.dim(2) ||
        hard.dim(2) != images.dim(3))
        throw ShapeError("montage: images " + shape_str(images.shape) + " vs labels " +
                         shape_str(hard.shape));
    int B = images.dim(0), H = images.dim(2), W = images.dim(3);
    ImageU8 out;
    out.width = 2 * W + sep;
    out.height = B * H + sep * (B - 1);
    out.rgb.assign(std::size_t(out.width) * out.height * 3, 230);
    for (int b = 0; b < B; b++) {
        ImageU8 im = tensor_to_u8(images, b);
        int y0 = b * (H + sep);
        for (int y = 0; y < H; y++) {
            std::uint8_t* dst = out.rgb.data() + (std::size_t(y0 + y) * out.width) * 3;
            std::memcpy(dst, im.rgb.data() + std::size_t(y) * W * 3, std::size_t(W) * 3);
            for (int x = 0; x < W; x++) {
                Rgb c = region_color(hard.v[std::size_t((b * H + y) * W + x)]);
                std::uint8_t* px = dst + std::size_t(W + sep + x) * 3;
                px[0] = c[0];
                px[1] = c[1];
                px[2] = c[2];
            }
        }
    }
    return out;
}

}  // namespace fdm
