// 8-bit PNG reading and writing on top of libpng.
#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dsc/tensor.hpp"

namespace dsc {

/// Interleaved 8-bit pixels, row-major.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_handler(png_structp, png_const_charp msg) {
  throw IoError(std::string("libpng: ") + msg);
}
inline void png_warning_handler(png_structp, png_const_charp) {}
}  // namespace detail

/// Reads any 8/16-bit PNG and converts it to `channels` (1 or 3) 8-bit channels.
inline Image8 read_png(const std::filesystem::path& path, std::size_t channels) {
  detail::FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           detail::png_error_handler, detail::png_warning_handler);
  if (png == nullptr) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  Image8 img;
  try {
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
    if (channels == 3 && is_gray) png_set_gray_to_rgb(png);
    if (channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);

    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    if (img.channels != channels) throw IoError("unexpected channel layout in " + path.string());
    img.pixels.resize(img.width * img.height * img.channels);
    std::vector<png_bytep> rows(img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
      rows[y] = img.pixels.data() + y * img.width * img.channels;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("write_png: channels must be 1 or 3");
  detail::FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw IoError("cannot create " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            detail::png_error_handler, detail::png_warning_handler);
  if (png == nullptr) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels));
  }
  png_write_end(png, nullptr);
}

}  // namespace dsc
