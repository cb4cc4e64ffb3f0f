#include <gtest/gtest.h>

#include <numbers>

#include "support.hpp"

using namespace repcn;
using namespace repcn::testing;

TEST(SyntheticData, DeterministicPerSeed) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto a = make_synthetic_pair(seed, 16), b = make_synthetic_pair(seed, 16);
    EXPECT_TRUE(bitwise_equal(a.condition, b.condition));
    EXPECT_TRUE(bitwise_equal(a.target, b.target));
    EXPECT_EQ(a.kind, b.kind);
    EXPECT_EQ(a.caption, b.caption);
  }
}

TEST(SyntheticData, CircleEdgeCountNearCircumference) {
  ShapeGeometry g;
  g.kind = ShapeKind::circle;
  g.cx = g.cy = 8.0;
  g.radius = 3.0;
  auto s = render_sample(g, 16);
  double edges = 0;
  for (float v : s.condition.data()) edges += v;
  const double c = 2 * std::numbers::pi * 3.0;
  EXPECT_GE(edges, c - 8);
  EXPECT_LE(edges, c + 8);
}

// Independent boundary oracle: support pixels with a 4-neighbour outside.
std::vector<std::uint8_t> boundary_oracle(const Tensor<float>& target, std::size_t n) {
  std::vector<std::uint8_t> out(n * n, 0);
  auto in = [&](long y, long x) {
    return y >= 0 && x >= 0 && y < long(n) && x < long(n) && target[y * n + x] > 0;
  };
  for (long y = 0; y < long(n); ++y)
    for (long x = 0; x < long(n); ++x)
      out[y * n + x] = in(y, x) && !(in(y - 1, x) && in(y + 1, x) && in(y, x - 1) && in(y, x + 1));
  return out;
}

TEST(SyntheticData, ConditionIsTargetBoundary) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto s = make_synthetic_pair(seed, 16);
    auto oracle = boundary_oracle(s.target, 16);
    std::size_t mismatches = 0, support = 0;
    for (std::size_t i = 0; i < 256; ++i) {
      mismatches += (s.condition[i] > 0.5f) != (oracle[i] != 0);
      support += s.target[i] > 0;
      EXPECT_TRUE(s.target[i] == 1.0f || s.target[i] == -1.0f);
    }
    EXPECT_EQ(mismatches, 0u) << "seed " << seed;
    EXPECT_GT(support, 0u);
  }
}

TEST(SyntheticData, ShapesStayInsideFrame) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto s = make_synthetic_pair(seed, 16);
    for (std::size_t i = 0; i < 16; ++i) {
      EXPECT_LT(s.target[i], 0);
      EXPECT_LT(s.target[15 * 16 + i], 0);
      EXPECT_LT(s.target[i * 16], 0);
      EXPECT_LT(s.target[i * 16 + 15], 0);
    }
    EXPECT_EQ(s.caption, static_cast<std::size_t>(s.kind));
  }
}

TEST(SyntheticData, AllKindsAppear) {
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& s : make_dataset(90, 1, 16)) counts[s.caption]++;
  for (auto c : counts) EXPECT_GT(c, 10u);
}

TEST(SyntheticData, HeldOutSeedsAreDisjoint) {
  for (std::size_t i = 0; i < 1000; ++i) {
    for (std::size_t j = 0; j < 1000; j += 37) EXPECT_NE(train_seed(1, i), test_seed(1, j));
  }
}

TEST(SyntheticData, SmallFramesAreRejected) {
  EXPECT_THROW(make_synthetic_pair(1, 7), ContractError);
  EXPECT_NO_THROW(make_synthetic_pair(1, 8));
}

TEST(Morphology, ErosionOfSquare) {
  std::vector<std::uint8_t> m(25, 0);
  for (int y = 1; y < 4; ++y)
    for (int x = 1; x < 4; ++x) m[y * 5 + x] = 1;
  auto e = erode4(m, 5);
  std::size_t n = 0;
  for (auto v : e) n += v;
  EXPECT_EQ(n, 1u);
  EXPECT_EQ(e[12], 1);
  auto b = boundary(m, 5);
  n = 0;
  for (auto v : b) n += v;
  EXPECT_EQ(n, 8u);
}

TEST(Iou, HandCases) {
  std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 1, 1, 0}, z{0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(iou(a, z), 0.0);
  EXPECT_DOUBLE_EQ(iou(z, z), 1.0);
  EXPECT_THROW(iou(a, std::vector<std::uint8_t>(3)), ShapeError);
}
