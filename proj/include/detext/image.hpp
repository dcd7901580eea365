#pragma once

#include <png.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "detext/tensor.hpp"

namespace detext {

// 8-bit image, HWC layout, c is 1 (gray) or 3 (RGB)
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> pix;

  Image() = default;
  Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_), pix(static_cast<size_t>(h_) * w_ * c_) {}

  uint8_t& at(int y, int x, int ch) { return pix[(static_cast<size_t>(y) * w + x) * c + ch]; }
  uint8_t at(int y, int x, int ch) const { return pix[(static_cast<size_t>(y) * w + x) * c + ch]; }
  bool empty() const { return pix.empty(); }
};

inline Image read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  DETEXT_CHECK_IO(fp != nullptr, "cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw IoError("libpng init failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("failed to decode " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  const png_byte color_type = png_get_color_type(png, info);
  const png_byte bit_depth = png_get_bit_depth(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  Image img(static_cast<int>(png_get_image_height(png, info)),
            static_cast<int>(png_get_image_width(png, info)),
            static_cast<int>(png_get_channels(png, info)));
  DETEXT_CHECK_IO(img.c == 1 || img.c == 3, "unsupported channel count in " + path);
  std::vector<png_bytep> rows(static_cast<size_t>(img.h));
  for (int y = 0; y < img.h; ++y)
    rows[static_cast<size_t>(y)] = img.pix.data() + static_cast<size_t>(y) * img.w * img.c;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

inline void write_png(const std::string& path, const Image& img) {
  DETEXT_CHECK(img.c == 1 || img.c == 3, "write_png: channels must be 1 or 3");
  FILE* fp = std::fopen(path.c_str(), "wb");
  DETEXT_CHECK_IO(fp != nullptr, "cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw IoError("libpng init failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("failed to encode " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(img.h));
  for (int y = 0; y < img.h; ++y)
    rows[static_cast<size_t>(y)] =
        const_cast<png_bytep>(img.pix.data() + static_cast<size_t>(y) * img.w * img.c);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// [1,C,H,W] tensor scaled to [0,1]
template <class T>
Tensor<T> tensor_from_image(const Image& img) {
  Tensor<T> t({1, img.c, img.h, img.w});
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        t.at(0, ch, y, x) = static_cast<T>(img.at(y, x, ch) / T(255));
  return t;
}

// clamps to [0,1], rounds to nearest. Batch index n selects the sample.
template <class T>
Image image_from_tensor(const Tensor<T>& t, int n = 0) {
  DETEXT_CHECK(t.ndim() == 4, "image_from_tensor: want 4-d tensor");
  const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
  DETEXT_CHECK(C == 1 || C == 3, "image_from_tensor: channels must be 1 or 3");
  Image img(H, W, C);
  for (int ch = 0; ch < C; ++ch)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double v = t.at(n, ch, y, x);
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        img.at(y, x, ch) = static_cast<uint8_t>(v * 255.0 + 0.5);
      }
  return img;
}

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  DETEXT_CHECK_IO(f.good(), "cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  DETEXT_CHECK_IO(f.good(), "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  DETEXT_CHECK_IO(f.good(), "short write to " + path);
}

}  // namespace detext
