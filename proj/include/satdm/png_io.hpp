#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "satdm/common.hpp"

namespace satdm {

/// Interleaved 8-bit raster, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  static ImageU8 make(std::size_t w, std::size_t h, std::size_t ch, std::uint8_t fill = 0) {
    return ImageU8{w, h, ch, std::vector<std::uint8_t>(w * h * ch, fill)};
  }
};

inline void write_png(const std::filesystem::path& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("write_png: channels must be 1 or 3");
  if (img.pixels.size() != img.width * img.height * img.channels) {
    throw DataError("write_png: pixel buffer size mismatch");
  }
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("write_png: cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw DataError("write_png: libpng failure for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline ImageU8 read_png(const std::filesystem::path& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DataError("read_png: cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw DataError("read_png: libpng failure for " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  const auto color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  ImageU8 img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("read_png: unsupported channel count in " + path.string());
  }
  img.pixels.resize(img.width * img.height * img.channels);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = img.pixels.data() + y * img.width * img.channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

/// Assembles images into a grid sheet (row-major), all cells the same size.
inline ImageU8 make_contact_sheet(const std::vector<ImageU8>& cells, std::size_t cols,
                                  std::size_t pad = 2, std::uint8_t background = 255) {
  if (cells.empty()) throw DataError("make_contact_sheet: no images");
  const std::size_t w = cells[0].width, h = cells[0].height;
  for (const auto& c : cells) {
    if (c.width != w || c.height != h) throw DataError("make_contact_sheet: cell sizes differ");
  }
  const std::size_t rows = (cells.size() + cols - 1) / cols;
  auto sheet = ImageU8::make(cols * (w + pad) + pad, rows * (h + pad) + pad, 3, background);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::size_t gx = (i % cols) * (w + pad) + pad;
    const std::size_t gy = (i / cols) * (h + pad) + pad;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const std::uint8_t v =
              cells[i].channels == 3 ? cells[i].at(y, x, ch) : cells[i].at(y, x, 0);
          sheet.at(gy + y, gx + x, ch) = v;
        }
      }
    }
  }
  return sheet;
}

}  // namespace satdm
