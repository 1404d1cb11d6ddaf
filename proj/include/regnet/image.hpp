#pragma once
// Single-channel rasters, PNG I/O and classical (non-differentiable) warping.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "regnet/affine.hpp"
#include "regnet/tensor.hpp"

namespace regnet {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Grayscale image, row-major, nominal intensity range [0, 1].
struct Image {
  Index width = 0;
  Index height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(Index w, Index h, float fill = 0.0f)
      : width(w), height(h), pixels(static_cast<std::size_t>(w * h), fill) {}

  float& at(Index x, Index y) { return pixels[static_cast<std::size_t>(y * width + x)]; }
  float at(Index x, Index y) const { return pixels[static_cast<std::size_t>(y * width + x)]; }
};

/// Binary raster; every value is 0 or 1.
struct Mask {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(Index w, Index h) : width(w), height(h), values(static_cast<std::size_t>(w * h), 0) {}

  std::uint8_t& at(Index x, Index y) { return values[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t at(Index x, Index y) const { return values[static_cast<std::size_t>(y * width + x)]; }
  Index area() const { return std::count(values.begin(), values.end(), std::uint8_t{1}); }
};

/// Whole file contents in one read.
inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot read '" + path.string() + "'");
  std::string bytes(static_cast<std::size_t>(is.tellg()), '\0');
  is.seekg(0);
  if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw IoError("failed reading '" + path.string() + "'");
  }
  return bytes;
}

inline bool same_dimensions(const Image& a, const Image& b) { return a.width == b.width && a.height == b.height; }
inline bool same_dimensions(const Mask& a, const Mask& b) { return a.width == b.width && a.height == b.height; }

/// Mask thresholded at 0.5; values exactly at 0.5 map to 1.
template <typename Range>
Mask threshold_mask(const Range& probabilities, Index width, Index height, double threshold = 0.5) {
  Mask m(width, height);
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = probabilities[i] >= threshold ? 1 : 0;
  return m;
}

inline Image mask_to_image(const Mask& m) {
  Image img(m.width, m.height);
  for (std::size_t i = 0; i < m.values.size(); ++i) img.pixels[i] = m.values[i] ? 1.0f : 0.0f;
  return img;
}

/// Stacks equally sized images into a [B,1,H,W] tensor.
inline Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw DimensionError("images_to_tensor: empty batch");
  const Index w = images.front()->width, h = images.front()->height;
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(images.size() * w * h));
  for (const auto* img : images) {
    if (img->width != w || img->height != h) throw DimensionError("images_to_tensor: mixed image sizes");
    data.insert(data.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor(Shape{static_cast<Index>(images.size()), 1, h, w}, std::move(data));
}

inline Tensor image_to_tensor(const Image& img) { return images_to_tensor({&img}); }

inline Tensor masks_to_tensor(const std::vector<const Mask*>& masks) {
  if (masks.empty()) throw DimensionError("masks_to_tensor: empty batch");
  const Index w = masks.front()->width, h = masks.front()->height;
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(masks.size() * w * h));
  for (const auto* m : masks) {
    if (m->width != w || m->height != h) throw DimensionError("masks_to_tensor: mixed mask sizes");
    for (auto v : m->values) data.push_back(v ? 1.0f : 0.0f);
  }
  return Tensor(Shape{static_cast<Index>(masks.size()), 1, h, w}, std::move(data));
}

/// Extracts item `index` of a [B,1,H,W] tensor as an image.
inline Image tensor_to_image(const Tensor& t, Index index = 0) {
  if (t.rank() != 4 || t.dim(1) != 1) throw DimensionError("tensor_to_image: expects [B,1,H,W]");
  Image img(t.dim(3), t.dim(2));
  auto src = t.data().subspan(static_cast<std::size_t>(index * img.width * img.height), img.pixels.size());
  std::copy(src.begin(), src.end(), img.pixels.begin());
  return img;
}

/// Min-max rescale into [0, 1]; constant images map to 0.
inline Image normalize_intensity(const Image& img) {
  Image out = img;
  if (img.pixels.empty()) return out;
  const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const float range = *hi - *lo;
  for (auto& v : out.pixels) v = range > 0 ? (v - *lo) / range : 0.0f;
  return out;
}

/// Bilinear read with zero outside the image.
inline double sample_bilinear(const Image& img, double x, double y) {
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const auto x0 = static_cast<Index>(fx0), y0 = static_cast<Index>(fy0);
  const double fx = x - fx0, fy = y - fy0;
  auto px = [&](Index xx, Index yy) -> double {
    return (xx >= 0 && xx < img.width && yy >= 0 && yy < img.height) ? img.at(xx, yy) : 0.0;
  };
  return (1 - fy) * ((1 - fx) * px(x0, y0) + fx * px(x0 + 1, y0)) +
         fy * ((1 - fx) * px(x0, y0 + 1) + fx * px(x0 + 1, y0 + 1));
}

/// Warps `moving` into an output of the given size: out(p) = moving(sampling * p).
/// `sampling` is a pixel-convention matrix (output -> input direction).
inline Image warp_image(const Image& moving, const AffineMatrix& sampling, Index out_width, Index out_height) {
  if (sampling.convention != Convention::pixel) throw ContractError("warp_image: expects pixel convention");
  Image out(out_width, out_height);
  for (Index y = 0; y < out_height; ++y) {
    for (Index x = 0; x < out_width; ++x) {
      const Point2 q = sampling.apply({static_cast<double>(x), static_cast<double>(y)});
      out.at(x, y) = static_cast<float>(sample_bilinear(moving, q.x, q.y));
    }
  }
  return out;
}

inline Image warp_image(const Image& moving, const AffineMatrix& sampling) {
  return warp_image(moving, sampling, moving.width, moving.height);
}

/// Nearest-neighbour warp; keeps the result binary.
inline Mask warp_mask(const Mask& moving, const AffineMatrix& sampling) {
  if (sampling.convention != Convention::pixel) throw ContractError("warp_mask: expects pixel convention");
  Mask out(moving.width, moving.height);
  for (Index y = 0; y < out.height; ++y) {
    for (Index x = 0; x < out.width; ++x) {
      const Point2 q = sampling.apply({static_cast<double>(x), static_cast<double>(y)});
      const auto ix = static_cast<Index>(std::lround(q.x)), iy = static_cast<Index>(std::lround(q.y));
      out.at(x, y) = (ix >= 0 && ix < moving.width && iy >= 0 && iy < moving.height) ? moving.at(ix, iy) : 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG (8-bit). Grayscale images are quantised as round(clamp(v, 0, 1) * 255).

namespace detail {

struct PngFile {
  std::FILE* fp = nullptr;
  explicit PngFile(const std::string& path, const char* mode) : fp(std::fopen(path.c_str(), mode)) {
    if (fp == nullptr) throw IoError("cannot open '" + path + "'");
  }
  ~PngFile() {
    if (fp != nullptr) std::fclose(fp);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
};

inline void write_png(const std::string& path, Index width, Index height, int color_type, int channels,
                      const std::vector<std::uint8_t>& bytes) {
  PngFile file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed for '" + path + "'");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG '" + path + "'");
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (Index y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + y * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads any 8-bit PNG as grayscale bytes.
inline std::vector<std::uint8_t> read_png_gray(const std::string& path, Index& width, Index& height) {
  PngFile file(path, "rb");
  png_byte header[8];
  if (std::fread(header, 1, 8, file.fp) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw IoError("'" + path + "' is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed for '" + path + "'");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed reading PNG '" + path + "'");
  }
  png_init_io(png, file.fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_read_update_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(width * height));
  for (Index y = 0; y < height; ++y) png_read_row(png, bytes.data() + y * width, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace detail

inline void write_png(const std::string& path, const Image& img) {
  std::vector<std::uint8_t> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, 1, bytes);
}

inline void write_png(const std::string& path, const Mask& mask) {
  std::vector<std::uint8_t> bytes(mask.values.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.values[i] ? 255 : 0;
  detail::write_png(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 1, bytes);
}

/// Interleaved 8-bit RGB.
inline void write_png_rgb(const std::string& path, Index width, Index height, const std::vector<std::uint8_t>& rgb) {
  if (static_cast<Index>(rgb.size()) != width * height * 3) throw DimensionError("write_png_rgb: size mismatch");
  detail::write_png(path, width, height, PNG_COLOR_TYPE_RGB, 3, rgb);
}

inline Image read_image_png(const std::string& path) {
  Index w = 0, h = 0;
  auto bytes = detail::read_png_gray(path, w, h);
  Image img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

/// Pixels >= 128 are foreground.
inline Mask read_mask_png(const std::string& path) {
  Index w = 0, h = 0;
  auto bytes = detail::read_png_gray(path, w, h);
  Mask m(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) m.values[i] = bytes[i] >= 128 ? 1 : 0;
  return m;
}

}  // namespace regnet
