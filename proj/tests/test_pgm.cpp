#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace repcn;
using namespace repcn::testing;

namespace {

GrayImage read_string(const std::string& s) {
  std::istringstream is(s);
  return read_pgm(is);
}

void expect_field_error(const std::string& bytes, const std::string& field) {
  try {
    read_string(bytes);
    ADD_FAILURE() << "expected FormatError mentioning " << field;
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Pgm, WritesExactBytes) {
  GrayImage img{3, 2, {0, 1, 2, 253, 254, 255}};
  std::ostringstream os;
  write_pgm(os, img);
  EXPECT_EQ(os.str(), std::string("P5\n3 2\n255\n") + std::string("\x00\x01\x02\xfd\xfe\xff", 6));
}

TEST(Pgm, RoundTrip) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    GrayImage img{1 + rng() % 20, 1 + rng() % 20, {}};
    for (std::size_t i = 0; i < img.width * img.height; ++i) img.pixels.push_back(rng() & 0xff);
    std::ostringstream os;
    write_pgm(os, img);
    auto back = read_string(os.str());
    EXPECT_EQ(back.width, img.width);
    EXPECT_EQ(back.height, img.height);
    EXPECT_EQ(back.pixels, img.pixels);
  }
}

TEST(Pgm, AcceptsComments) {
  auto img = read_string(std::string("P5 # made by hand\n2 # width\n1\n255\n") + "\x10\x20");
  EXPECT_EQ(img.width, 2u);
  EXPECT_EQ(img.height, 1u);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0x10, 0x20}));
}

TEST(Pgm, RejectsMalformedInput) {
  expect_field_error("P2\n1 1\n255\n\x01", "magic");
  expect_field_error("P5\nx 1\n255\n\x01", "width");
  expect_field_error("P5\n0 1\n255\n", "width/height");
  expect_field_error("P5\n1 1\n65535\n\x01\x01", "maxval");
  expect_field_error("P5\n2 2\n255\n\x01", "truncated");
}

TEST(Pgm, ImageConversionEndpoints) {
  const std::vector<float> v{-1.0f, 0.0f, 1.0f, -3.0f, 3.0f, 0.5f};
  auto g = image_to_gray(v, 2, 3);
  EXPECT_EQ(g.pixels, (std::vector<std::uint8_t>{0, 128, 255, 0, 255, 191}));
  auto back = gray_to_image(g);
  EXPECT_EQ(back.shape(), (Shape{1, 2, 3}));
  EXPECT_FLOAT_EQ(back[0], -1.0f);
  EXPECT_FLOAT_EQ(back[2], 1.0f);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back[i], std::clamp(v[i], -1.0f, 1.0f), 1.0 / 127.5);
}

TEST(Pgm, MaskConversion) {
  const std::vector<float> m{0, 1, 1, 0};
  auto g = mask_to_gray(m, 2, 2);
  EXPECT_EQ(g.pixels, (std::vector<std::uint8_t>{0, 255, 255, 0}));
  auto back = gray_to_mask(GrayImage{4, 1, {0, 127, 128, 255}});
  EXPECT_EQ(std::vector<float>(back.data().begin(), back.data().end()),
            (std::vector<float>{0, 0, 1, 1}));
}

TEST(Pgm, SyntheticSampleSurvivesRoundTrip) {
  auto s = make_synthetic_pair(3, 16);
  std::ostringstream os;
  write_pgm(os, mask_to_gray(s.condition.data(), 16, 16));
  EXPECT_TRUE(bitwise_equal(gray_to_mask(read_string(os.str())), s.condition));
  std::ostringstream ot;
  write_pgm(ot, image_to_gray(s.target.data(), 16, 16));
  EXPECT_TRUE(bitwise_equal(gray_to_image(read_string(ot.str())), s.target));
}
