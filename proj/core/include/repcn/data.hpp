#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "repcn/tensor.hpp"

namespace repcn {

enum class ShapeKind { circle = 0, rectangle = 1, triangle = 2 };

const char* shape_kind_name(ShapeKind kind);

// Parameters of one procedural shape, in pixel units. Pixel (y, x) is inside
// when its centre (y + 0.5, x + 0.5) is.
struct ShapeGeometry {
  ShapeKind kind = ShapeKind::circle;
  double cx = 0, cy = 0, radius = 0;      // circle
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // rectangle, [x0,x1) x [y0,y1)
  double px[3] = {0, 0, 0};               // triangle vertices
  double py[3] = {0, 0, 0};
};

struct SyntheticSample {
  Tensor<float> condition;  // [1,H,W], 1 on the support boundary
  Tensor<float> target;     // [1,H,W], +1 inside the shape, -1 outside
  ShapeKind kind = ShapeKind::circle;
  std::size_t caption = 0;
};

// Binary support [H,W] of a shape.
std::vector<std::uint8_t> rasterize(const ShapeGeometry& shape, std::size_t size);
// 4-neighbour erosion; pixels outside the frame count as background.
std::vector<std::uint8_t> erode4(const std::vector<std::uint8_t>& mask, std::size_t size);
// Support pixels with at least one 4-neighbour outside the support.
std::vector<std::uint8_t> boundary(const std::vector<std::uint8_t>& mask, std::size_t size);

SyntheticSample render_sample(const ShapeGeometry& shape, std::size_t size);
SyntheticSample make_synthetic_pair(std::uint64_t seed, std::size_t size);

// Seeds for training items and for the disjoint held-out range.
std::uint64_t train_seed(std::uint64_t seed, std::size_t index);
std::uint64_t test_seed(std::uint64_t seed, std::size_t index);

std::vector<SyntheticSample> make_dataset(std::size_t n, std::uint64_t seed, std::size_t size,
                                          bool held_out = false);

// Pixels of an image [..,H,W] strictly above `threshold`.
std::vector<std::uint8_t> threshold_mask(std::span<const float> image, float threshold = 0.0f);
// |a & b| / |a | b|; two empty masks have IoU 1.
double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

}  // namespace repcn
