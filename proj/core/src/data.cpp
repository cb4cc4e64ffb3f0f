#include "repcn/data.hpp"

#include <cmath>
#include <random>

namespace repcn {

const char* shape_kind_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

namespace {

double edge_side(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

bool inside(const ShapeGeometry& s, double x, double y) {
  switch (s.kind) {
    case ShapeKind::circle: {
      const double dx = x - s.cx, dy = y - s.cy;
      return dx * dx + dy * dy <= s.radius * s.radius;
    }
    case ShapeKind::rectangle:
      return x >= s.x0 && x < s.x1 && y >= s.y0 && y < s.y1;
    case ShapeKind::triangle: {
      const double d0 = edge_side(s.px[0], s.py[0], s.px[1], s.py[1], x, y);
      const double d1 = edge_side(s.px[1], s.py[1], s.px[2], s.py[2], x, y);
      const double d2 = edge_side(s.px[2], s.py[2], s.px[0], s.py[0], x, y);
      const bool neg = d0 < 0 || d1 < 0 || d2 < 0;
      const bool pos = d0 > 0 || d1 > 0 || d2 > 0;
      return !(neg && pos);
    }
  }
  return false;
}

std::size_t count(const std::vector<std::uint8_t>& mask) {
  std::size_t n = 0;
  for (auto v : mask) n += v;
  return n;
}

bool touches_frame(const std::vector<std::uint8_t>& mask, std::size_t size) {
  for (std::size_t i = 0; i < size; ++i) {
    if (mask[i] || mask[(size - 1) * size + i] || mask[i * size] || mask[i * size + size - 1]) {
      return true;
    }
  }
  return false;
}

ShapeGeometry random_geometry(std::mt19937_64& rng, std::size_t size) {
  const double n = static_cast<double>(size);
  const double margin = 1.0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Box of side `extent` placed uniformly inside the margins.
  auto place = [&](double extent, double& lo_x, double& lo_y) {
    lo_x = margin + (n - 2 * margin - extent) * unit(rng);
    lo_y = margin + (n - 2 * margin - extent) * unit(rng);
  };
  ShapeGeometry g;
  g.kind = static_cast<ShapeKind>(rng() % 3);
  switch (g.kind) {
    case ShapeKind::circle: {
      g.radius = n * (0.12 + 0.1 * unit(rng));
      double x, y;
      place(2 * g.radius, x, y);
      g.cx = x + g.radius;
      g.cy = y + g.radius;
      break;
    }
    case ShapeKind::rectangle: {
      const double w = std::round(n * (0.2 + 0.2 * unit(rng)));
      const double h = std::round(n * (0.2 + 0.2 * unit(rng)));
      g.x0 = std::floor(margin + (n - 2 * margin - w) * unit(rng));
      g.y0 = std::floor(margin + (n - 2 * margin - h) * unit(rng));
      g.x1 = g.x0 + w;
      g.y1 = g.y0 + h;
      break;
    }
    case ShapeKind::triangle: {
      const double extent = n * (0.3 + 0.2 * unit(rng));
      double x, y;
      place(extent, x, y);
      // One vertex on each of three box edges keeps the triangle fat.
      g.px[0] = x + extent * unit(rng);
      g.py[0] = y;
      g.px[1] = x;
      g.py[1] = y + extent;
      g.px[2] = x + extent;
      g.py[2] = y + extent * (0.5 + 0.5 * unit(rng));
      break;
    }
  }
  return g;
}

}  // namespace

std::vector<std::uint8_t> rasterize(const ShapeGeometry& shape, std::size_t size) {
  std::vector<std::uint8_t> mask(size * size, 0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      mask[y * size + x] = inside(shape, x + 0.5, y + 0.5) ? 1 : 0;
    }
  }
  return mask;
}

std::vector<std::uint8_t> erode4(const std::vector<std::uint8_t>& mask, std::size_t size) {
  if (mask.size() != size * size) throw ShapeError("mask size does not match frame");
  auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> std::uint8_t {
    const auto n = static_cast<std::ptrdiff_t>(size);
    if (y < 0 || x < 0 || y >= n || x >= n) return 0;
    return mask[y * size + x];
  };
  std::vector<std::uint8_t> out(mask.size(), 0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const auto yi = static_cast<std::ptrdiff_t>(y), xi = static_cast<std::ptrdiff_t>(x);
      out[y * size + x] = at(yi, xi) && at(yi - 1, xi) && at(yi + 1, xi) && at(yi, xi - 1) &&
                          at(yi, xi + 1);
    }
  }
  return out;
}

std::vector<std::uint8_t> boundary(const std::vector<std::uint8_t>& mask, std::size_t size) {
  const auto eroded = erode4(mask, size);
  std::vector<std::uint8_t> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] && !eroded[i];
  return out;
}

SyntheticSample render_sample(const ShapeGeometry& shape, std::size_t size) {
  if (size < 8) throw ContractError("synthetic images need size >= 8");
  const auto support = rasterize(shape, size);
  const auto edge = boundary(support, size);
  SyntheticSample s;
  s.kind = shape.kind;
  s.caption = static_cast<std::size_t>(shape.kind);
  s.condition = Tensor<float>({1, size, size});
  s.target = Tensor<float>({1, size, size});
  for (std::size_t i = 0; i < support.size(); ++i) {
    s.condition[i] = edge[i] ? 1.0f : 0.0f;
    s.target[i] = support[i] ? 1.0f : -1.0f;
  }
  return s;
}

SyntheticSample make_synthetic_pair(std::uint64_t seed, std::size_t size) {
  if (size < 8) throw ContractError("synthetic images need size >= 8");
  std::mt19937_64 rng(seed);
  // Shapes too thin to have an interior are redrawn.
  const std::size_t min_area = size * size / 32;
  for (;;) {
    const ShapeGeometry g = random_geometry(rng, size);
    const auto support = rasterize(g, size);
    if (count(support) < min_area || touches_frame(support, size)) continue;
    if (count(erode4(support, size)) == 0) continue;
    return render_sample(g, size);
  }
}

std::uint64_t train_seed(std::uint64_t seed, std::size_t index) {
  return seed * 0x9E3779B97F4A7C15ull + index;
}

std::uint64_t test_seed(std::uint64_t seed, std::size_t index) {
  return train_seed(seed, index) ^ (1ull << 63);
}

std::vector<SyntheticSample> make_dataset(std::size_t n, std::uint64_t seed, std::size_t size,
                                          bool held_out) {
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(make_synthetic_pair(held_out ? test_seed(seed, i) : train_seed(seed, i), size));
  }
  return out;
}

std::vector<std::uint8_t> threshold_mask(std::span<const float> image, float threshold) {
  std::vector<std::uint8_t> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = image[i] > threshold ? 1 : 0;
  return out;
}

double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) throw ShapeError("IoU masks differ in size");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace repcn
