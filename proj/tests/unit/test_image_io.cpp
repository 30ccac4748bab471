#include <gtest/gtest.h>

#include <jpeglib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "slgs/image_io.hpp"

using namespace slgs;
namespace fs = std::filesystem;

namespace {

fs::path temp(const std::string& name) { return fs::temp_directory_path() / name; }

void write_jpeg(const fs::path& path, int w, int h, const std::vector<unsigned char>& rgb) {
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  ASSERT_NE(f, nullptr);
  jpeg_compress_struct c{};
  jpeg_error_mgr err{};
  c.err = jpeg_std_error(&err);
  jpeg_create_compress(&c);
  jpeg_stdio_dest(&c, f);
  c.image_width = w;
  c.image_height = h;
  c.input_components = 3;
  c.in_color_space = JCS_RGB;
  jpeg_set_defaults(&c);
  jpeg_set_quality(&c, 100, TRUE);
  jpeg_start_compress(&c, TRUE);
  for (int y = 0; y < h; ++y) {
    JSAMPROW row = const_cast<unsigned char*>(rgb.data()) + y * w * 3;
    jpeg_write_scanlines(&c, &row, 1);
  }
  jpeg_finish_compress(&c);
  jpeg_destroy_compress(&c);
  std::fclose(f);
}

}  // namespace

TEST(ImageIo, PngRoundTripWithinQuantization) {
  std::mt19937_64 rng(1);
  const ad::Tensor img = ad::uniform({3, 7, 5}, 0.0f, 1.0f, rng);
  const fs::path p = temp("slgs_io_roundtrip.png");
  save_png(p, img);
  const ad::Tensor back = load_image(p);
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 0.5f / 255.0f + 1e-6f);
  fs::remove(p);
}

TEST(ImageIo, WritingClampsOutOfRangeValues) {
  ad::Tensor img({1, 1, 2}, std::vector<float>{-0.5f, 1.5f});
  const fs::path p = temp("slgs_io_clamp.png");
  save_png(p, img);
  const ad::Tensor back = load_image(p);  // gray expands to RGB
  EXPECT_EQ(back.shape(), (ad::Shape{3, 1, 2}));
  EXPECT_EQ(back[0], 0.0f);
  EXPECT_EQ(back[1], 1.0f);
  fs::remove(p);
  EXPECT_THROW(save_png(p, ad::Tensor({2, 3, 3})), ShapeError);
}

TEST(ImageIo, DownscaleAveragesBlocks) {
  ad::Tensor img({3, 4, 5}, 0.0f);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) img[y * 5 + x] = (x < 2 && y < 2) ? 1.0f : 0.0f;
  const fs::path p = temp("slgs_io_down.png");
  save_png(p, img);
  const ad::Tensor half = load_image(p, 2);
  EXPECT_EQ(half.shape(), (ad::Shape{3, 2, 2}));
  EXPECT_EQ(half[0], 1.0f);
  EXPECT_EQ(half[1], 0.0f);
  EXPECT_THROW(load_image(p, 0), ConfigError);
  EXPECT_THROW(load_image(p, 8), IoError);
  fs::remove(p);
}

TEST(ImageIo, JpegDecodes) {
  const int w = 8, h = 8;
  std::vector<unsigned char> rgb(w * h * 3, 200);
  const fs::path p = temp("slgs_io.jpg");
  write_jpeg(p, w, h, rgb);
  const ad::Tensor img = load_image(p);
  ASSERT_EQ(img.shape(), (ad::Shape{3, 8, 8}));
  for (float v : img.values()) EXPECT_NEAR(v, 200.0f / 255.0f, 2.0f / 255.0f);
  fs::remove(p);
}

TEST(ImageIo, MissingOrUnknownFilesAreIoErrors) {
  EXPECT_THROW(load_image(temp("slgs_missing.png")), IoError);
  EXPECT_THROW(load_image(temp("slgs_missing.jpg")), IoError);
  EXPECT_THROW(load_image(temp("slgs_file.bmp")), IoError);
  const fs::path p = temp("slgs_garbage.png");
  { std::ofstream(p) << "not a png"; }
  EXPECT_THROW(load_image(p), IoError);
  fs::remove(p);
}
