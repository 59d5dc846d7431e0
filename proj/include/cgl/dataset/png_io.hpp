// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgl {

// interleaved RGB8, row-major
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;
};

inline void write_png_rgb8(const std::string& path, const ImageU8& img) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("png: cannot open for write: " + path);
  png_structp pngp = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(pngp);
  if (setjmp(png_jmpbuf(pngp))) {
    png_destroy_write_struct(&pngp, &info);
    std::fclose(fp);
    throw std::runtime_error("png: write failed: " + path);
  }
  png_init_io(pngp, fp);
  png_set_IHDR(pngp, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(pngp, info);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.rgb.data() + static_cast<size_t>(y) * img.width * 3);
  png_write_image(pngp, rows.data());
  png_write_end(pngp, nullptr);
  png_destroy_write_struct(&pngp, &info);
  std::fclose(fp);
}

inline ImageU8 read_png_rgb8(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("png: cannot open: " + path);
  png_structp pngp = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(pngp);
  if (setjmp(png_jmpbuf(pngp))) {
    png_destroy_read_struct(&pngp, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("png: read failed: " + path);
  }
  png_init_io(pngp, fp);
  png_read_info(pngp, info);
  png_set_expand(pngp);
  png_set_strip_16(pngp);
  png_set_strip_alpha(pngp);
  if (png_get_color_type(pngp, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(pngp, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(pngp);
  png_read_update_info(pngp, info);
  ImageU8 img;
  img.width = static_cast<int>(png_get_image_width(pngp, info));
  img.height = static_cast<int>(png_get_image_height(pngp, info));
  img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = img.rgb.data() + static_cast<size_t>(y) * img.width * 3;
  png_read_image(pngp, rows.data());
  png_read_end(pngp, nullptr);
  png_destroy_read_struct(&pngp, &info, nullptr);
  std::fclose(fp);
  return img;
}

}  // namespace cgl
