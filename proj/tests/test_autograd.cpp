#include <gtest/gtest.h>

#include "support.hpp"

using namespace repcn;
using namespace repcn::testing;

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  auto x = random_tensor<double>({2, 3, 4}, 1);
  Var v = tape.leaf("x", x, true);
  auto g = backward(tape, ag::sum(tape, v));
  EXPECT_TRUE(bitwise_equal(g.at("x"), Tensor<double>::ones(x.shape())));
}

TEST(Backward, HalfSquareGivesX) {
  Tape<double> tape;
  auto x = random_tensor<double>({5, 2}, 2);
  Var v = tape.leaf("x", x, true);
  Var loss = ag::mul_scalar(tape, ag::sum(tape, ag::mul(tape, v, v)), 0.5);
  EXPECT_LE(max_abs_diff(backward(tape, loss).at("x"), x), 1e-15);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape<double> tape;
  Var v = tape.leaf("x", Tensor<double>({3}), true);
  EXPECT_THROW(backward(tape, v), ContractError);
}

TEST(Backward, FrozenLeavesHaveNoEntry) {
  Tape<double> tape;
  Var a = tape.leaf("a", random_tensor<double>({2, 2}, 3), true);
  Var b = tape.leaf("b", random_tensor<double>({2, 2}, 4), false);
  auto g = backward(tape, ag::sum(tape, ag::matmul(tape, a, b)));
  EXPECT_EQ(g.count("a"), 1u);
  EXPECT_EQ(g.count("b"), 0u);
}

TEST(Backward, DuplicateLeafNameIsRejected) {
  Tape<double> tape;
  tape.leaf("a", Tensor<double>({1}), true);
  EXPECT_THROW(tape.leaf("a", Tensor<double>({1}), true), ContractError);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  Tape<double> tape;
  Var a = tape.leaf("a", random_tensor<double>({3, 3}, 5), true);
  Var h = ag::silu(tape, ag::matmul(tape, a, a));
  ag::sum(tape, ag::softmax(tape, h));
  for (std::size_t id = 0; id < tape.size(); ++id) {
    for (std::size_t p : tape.parents(Var{id})) EXPECT_LT(p, id);
  }
}

TEST(Backward, ToyTwoLayerNetMatchesFiniteDifferences) {
  // x -> linear -> silu -> linear -> mse against a target.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto x = random_tensor<double>({4, 3}, seed * 7 + 1);
    const auto target = random_tensor<double>({4, 2}, seed * 7 + 2);
    GraphFn net = [&](Tape<double>& t, const std::vector<Var>& p) {
      Var h = ag::silu(t, ag::linear(t, t.constant(x), p[0], p[1]));
      Var y = ag::linear(t, h, p[2], p[3]);
      return ag::mse(t, y, t.constant(target));
    };
    std::vector<Tensor<double>> params{
        random_tensor<double>({5, 3}, seed * 7 + 3), random_tensor<double>({5}, seed * 7 + 4),
        random_tensor<double>({2, 5}, seed * 7 + 5), random_tensor<double>({2}, seed * 7 + 6)};
    EXPECT_LE(gradcheck(net, params, seed), 1e-3) << "seed " << seed;
  }
}

TEST(FiniteDiff, SumIsAllOnes) {
  auto x = random_tensor<double>({3, 2}, 6);
  auto g = finite_diff_grad([](const Tensor<double>& t) {
    double s = 0;
    for (double v : t.data()) s += v;
    return s;
  }, x, 1e-4);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, SquareAtThree) {
  auto g = finite_diff_grad([](const Tensor<double>& t) { return t[0] * t[0]; },
                            Tensor<double>({1}, 3.0), 1e-4);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDiff, RejectsNonPositiveEps) {
  auto f = [](const Tensor<double>& t) { return t[0]; };
  EXPECT_THROW(finite_diff_grad(f, Tensor<double>({1}), 0.0), ContractError);
  EXPECT_THROW(finite_diff_grad(f, Tensor<double>({1}), -1e-3), ContractError);
}

// Every differentiable op against central differences in float64.
struct OpCase {
  const char* name;
  std::vector<Shape> inputs;
  GraphFn graph;
};

std::vector<OpCase> op_cases() {
  using V = std::vector<Var>;
  using T = Tape<double>;
  return {
      {"matmul", {{3, 4}, {4, 5}}, [](T& t, const V& v) { return ag::matmul(t, v[0], v[1]); }},
      {"linear", {{3, 4}, {2, 4}, {2}}, [](T& t, const V& v) { return ag::linear(t, v[0], v[1], v[2]); }},
      {"conv2d_s1p1", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}},
       [](T& t, const V& v) { return ag::conv2d(t, v[0], v[1], v[2], ConvGeometry{1, 1}); }},
      {"conv2d_s2p1", {{1, 2, 6, 6}, {2, 2, 3, 3}, {2}},
       [](T& t, const V& v) { return ag::conv2d(t, v[0], v[1], v[2], ConvGeometry{2, 1}); }},
      {"conv2d_1x1", {{2, 3, 4, 4}, {2, 3, 1, 1}, {2}},
       [](T& t, const V& v) { return ag::conv2d(t, v[0], v[1], v[2], ConvGeometry{1, 0}); }},
      {"bmm", {{2, 3, 4}, {2, 4, 5}}, [](T& t, const V& v) { return ag::bmm(t, v[0], v[1], false); }},
      {"bmm_transposed", {{2, 3, 4}, {2, 5, 4}}, [](T& t, const V& v) { return ag::bmm(t, v[0], v[1], true); }},
      {"add", {{3, 4}, {3, 4}}, [](T& t, const V& v) { return ag::add(t, v[0], v[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](T& t, const V& v) { return ag::sub(t, v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](T& t, const V& v) { return ag::mul(t, v[0], v[1]); }},
      {"mul_scalar", {{3, 4}}, [](T& t, const V& v) { return ag::mul_scalar(t, v[0], -1.7); }},
      {"add_channel", {{2, 3, 2, 2}, {2, 3}}, [](T& t, const V& v) { return ag::add_channel(t, v[0], v[1]); }},
      {"silu", {{4, 5}}, [](T& t, const V& v) { return ag::silu(t, v[0]); }},
      {"softmax", {{3, 6}}, [](T& t, const V& v) { return ag::softmax(t, v[0]); }},
      {"group_norm", {{2, 4, 3, 3}}, [](T& t, const V& v) { return ag::group_norm(t, v[0], 2, 1e-5); }},
      {"channel_affine", {{2, 3, 2, 2}, {3}, {3}},
       [](T& t, const V& v) { return ag::channel_affine(t, v[0], v[1], v[2]); }},
      {"mse", {{3, 4}, {3, 4}}, [](T& t, const V& v) { return ag::mse(t, v[0], v[1]); }},
      {"sum", {{3, 4}}, [](T& t, const V& v) { return ag::sum(t, v[0]); }},
      {"reshape", {{3, 4}}, [](T& t, const V& v) { return ag::reshape(t, v[0], Shape{2, 6}); }},
      {"tokens", {{2, 3, 2, 4}}, [](T& t, const V& v) {
         return ag::from_tokens(t, ag::silu(t, ag::to_tokens(t, v[0])), 2, 4);
       }},
      {"heads", {{2, 3, 4}}, [](T& t, const V& v) {
         return ag::merge_heads(t, ag::silu(t, ag::split_heads(t, v[0], 2)), 2);
       }},
      {"concat_channels", {{2, 2, 3, 3}, {2, 3, 3, 3}},
       [](T& t, const V& v) { return ag::concat_channels(t, v[0], v[1]); }},
      {"upsample", {{2, 2, 3, 3}}, [](T& t, const V& v) { return ag::upsample_nearest2x(t, v[0]); }},
      {"embedding", {{4, 3}}, [](T& t, const V& v) {
         return ag::embedding(t, v[0], std::vector<std::size_t>{2, 0, 2, 3});
       }},
  };
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferencesOver20Seeds) {
  const auto c = op_cases()[GetParam()];
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<Tensor<double>> inputs;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) {
      inputs.push_back(random_tensor<double>(c.inputs[i], seed * 31 + i));
    }
    EXPECT_LE(gradcheck(c.graph, inputs, seed), 1e-3) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(CostTracking, ConvAndLinearRecordTwoFlopsPerMac) {
  Tape<float> tape(false);
  tape.track_costs(true);
  Var x = tape.constant(Tensor<float>({1, 1, 4, 4}));
  Var k = tape.constant(Tensor<float>({1, 1, 1, 1}));
  Var b = tape.constant(Tensor<float>({1}));
  ag::conv2d(tape, x, k, b, ConvGeometry{1, 0});
  ASSERT_EQ(tape.costs().size(), 1u);
  EXPECT_EQ(tape.costs()[0].macs, 16u);
  EXPECT_EQ(tape.costs()[0].flops, 32u);
}
