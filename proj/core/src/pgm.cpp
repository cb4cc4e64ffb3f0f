#include "repcn/pgm.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

namespace repcn {

namespace {

void skip_space_and_comments(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c != EOF && std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

std::size_t read_field(std::istream& in, const char* name) {
  skip_space_and_comments(in);
  std::size_t v = 0;
  bool any = false;
  while (std::isdigit(in.peek())) {
    v = v * 10 + static_cast<std::size_t>(in.get() - '0');
    any = true;
    if (v > (1u << 20)) throw FormatError(std::string("PGM field '") + name + "' is too large");
  }
  if (!any) throw FormatError(std::string("PGM field '") + name + "' is missing or malformed");
  return v;
}

}  // namespace

void write_pgm(std::ostream& out, const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) {
    throw ShapeError("PGM pixel count does not match width*height");
  }
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw FormatError("failed to write PGM");
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  write_pgm(out, image);
}

GrayImage read_pgm(std::istream& in) {
  char magic[2] = {0, 0};
  if (!in.read(magic, 2) || magic[0] != 'P' || magic[1] != '5') {
    throw FormatError("PGM field 'magic' must be P5");
  }
  GrayImage img;
  img.width = read_field(in, "width");
  img.height = read_field(in, "height");
  const std::size_t maxval = read_field(in, "maxval");
  if (img.width == 0 || img.height == 0) throw FormatError("PGM field 'width/height' is zero");
  if (maxval != 255) throw FormatError("PGM field 'maxval' must be 255");
  if (!std::isspace(in.get())) throw FormatError("PGM header must end in one whitespace byte");
  img.pixels.resize(img.width * img.height);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size()))) {
    throw FormatError("PGM pixel data is truncated");
  }
  return img;
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open PGM '" + path.string() + "'");
  return read_pgm(in);
}

GrayImage image_to_gray(std::span<const float> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw ShapeError("image size does not match height*width");
  GrayImage img{width, height, std::vector<std::uint8_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float v = std::clamp(values[i], -1.0f, 1.0f);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround((v + 1.0f) * 127.5f));
  }
  return img;
}

GrayImage mask_to_gray(std::span<const float> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw ShapeError("mask size does not match height*width");
  GrayImage img{width, height, std::vector<std::uint8_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) img.pixels[i] = values[i] > 0.5f ? 255 : 0;
  return img;
}

Tensor<float> gray_to_image(const GrayImage& image) {
  Tensor<float> t({1, image.height, image.width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = image.pixels[i] / 127.5f - 1.0f;
  return t;
}

Tensor<float> gray_to_mask(const GrayImage& image) {
  Tensor<float> t({1, image.height, image.width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = image.pixels[i] >= 128 ? 1.0f : 0.0f;
  return t;
}

}  // namespace repcn
