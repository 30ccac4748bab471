#pragma once

// PNG/JPEG decoding to (3 x H x W) float tensors in [0, 1], and 8-bit PNG
// encoding.

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "slgs/errors.hpp"
#include "slgs/tensor.hpp"

namespace slgs {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path);
  return f;
}

struct Rgb8 {
  int width = 0, height = 0;
  std::vector<unsigned char> pixels;  // interleaved RGB
};

inline Rgb8 read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("png: " + path + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  Rgb8 out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("png: " + path + ": " + image.message);
  }
  return out;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline Rgb8 read_jpeg(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = [](j_common_ptr c) {
    auto* e = reinterpret_cast<JpegError*>(c->err);
    (*c->err->format_message)(c, e->message);
    std::longjmp(e->jump, 1);
  };
  Rgb8 out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("jpeg: " + path + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = static_cast<int>(cinfo.output_width);
  out.height = static_cast<int>(cinfo.output_height);
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

}  // namespace detail

/// Loads a PNG or JPEG (by extension) as a (3 x H x W) tensor in [0, 1].
/// `downscale` > 1 box-filters integer blocks; trailing rows/columns that do
/// not fill a block are dropped, matching integer-divided intrinsics.
inline ad::Tensor load_image(const std::filesystem::path& path, int downscale = 1) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  detail::Rgb8 img;
  if (ext == ".png")
    img = detail::read_png(path.string());
  else if (ext == ".jpg" || ext == ".jpeg")
    img = detail::read_jpeg(path.string());
  else
    throw IoError("unsupported image format: " + path.string());
  if (downscale < 1) throw ConfigError("downscale factor must be >= 1");
  const int w = img.width / downscale, h = img.height / downscale;
  if (w < 1 || h < 1) throw IoError("image too small for downscale factor: " + path.string());
  ad::Tensor out(ad::Shape{3, h, w});
  const float norm = 1.0f / (255.0f * downscale * downscale);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        int acc = 0;
        for (int dy = 0; dy < downscale; ++dy)
          for (int dx = 0; dx < downscale; ++dx)
            acc += img.pixels[(static_cast<std::size_t>(y * downscale + dy) * img.width + x * downscale + dx) * 3 + c];
        out[(static_cast<std::size_t>(c) * h + y) * w + x] = acc * norm;
      }
  return out;
}

/// Writes a (C x H x W) tensor (C = 1 or 3) as 8-bit PNG, clamping to [0, 1].
inline void save_png(const std::filesystem::path& path, const ad::Tensor& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw ShapeError("save_png: expected (1|3 x H x W), got " + ad::to_string(img.shape()));
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<unsigned char> px(static_cast<std::size_t>(w) * h * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const float v = std::clamp(img[(static_cast<std::size_t>(ch) * h + y) * w + x], 0.0f, 1.0f);
        px[(static_cast<std::size_t>(y) * w + x) * c + ch] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, px.data(), 0, nullptr))
    throw IoError("png: cannot write " + path.string() + ": " + image.message);
}

}  // namespace slgs
