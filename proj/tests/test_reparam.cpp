#include <gtest/gtest.h>

#include "support.hpp"

using namespace repcn;
using namespace repcn::testing;

TEST(FuseLayer, AlphaOneBetaZeroIsOriginal) {
  LinearParams<float> o{random_tensor<float>({3, 4}, 1), random_tensor<float>({3}, 2), false};
  LinearParams<float> m{random_tensor<float>({3, 4}, 3), random_tensor<float>({3}, 4), true};
  auto f = fuse_layer(o, m, FusionConfig{1.0, 0.0});
  EXPECT_TRUE(bitwise_equal(f.weight, o.weight));
  EXPECT_TRUE(bitwise_equal(f.bias, o.bias));
  EXPECT_FALSE(f.trainable);
}

TEST(FuseLayer, FreshModalInitGivesOnePointOneTimesOriginal) {
  Conv2dParams<double> o{random_tensor<double>({2, 3, 3, 3}, 5), random_tensor<double>({2}, 6), 1, 1, false};
  auto f = fuse_layer(o, init_modal_copy(o, 0.1), FusionConfig{1.0, 1.0});
  EXPECT_LE(max_rel_diff(f.kernel, mul_scalar(o.kernel, 1.1)), 1e-15);
  EXPECT_LE(max_rel_diff(f.bias, mul_scalar(o.bias, 1.1)), 1e-15);
}

TEST(FuseLayer, WeightedBranchSumOracle) {
  const FusionConfig cfg{0.7, 1.3};
  const auto spec = conv_spec("conv", 3, 4, 3, 2, 1);
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const auto x = random_tensor<double>({1, 3, 6, 6}, 1000 + trial);
    Conv2dParams<double> o{random_tensor<double>({4, 3, 3, 3}, trial), random_tensor<double>({4}, trial + 1), 2, 1, false};
    Conv2dParams<double> m{random_tensor<double>({4, 3, 3, 3}, trial + 2), random_tensor<double>({4}, trial + 3), 2, 1, true};
    auto f = fuse_layer(o, m, cfg);
    auto expected = add(mul_scalar(conv_oracle(x, o.kernel, o.bias, 2, 1), 0.7),
                        mul_scalar(conv_oracle(x, m.kernel, m.bias, 2, 1), 1.3));
    EXPECT_LE(max_rel_diff(conv2d(x, f.kernel, f.bias, 2, 1), expected), 1e-12);
  }
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const auto x = random_tensor<float>({1, 6}, 2000 + trial);
    LinearParams<float> o{random_tensor<float>({5, 6}, trial), random_tensor<float>({5}, trial + 1), false};
    LinearParams<float> m{random_tensor<float>({5, 6}, trial + 2), random_tensor<float>({5}, trial + 3), true};
    auto f = fuse_layer(o, m, cfg);
    auto expected = add(mul_scalar(linear_oracle(x, o.weight, o.bias), 0.7f),
                        mul_scalar(linear_oracle(x, m.weight, m.bias), 1.3f));
    EXPECT_LE(max_rel_diff(linear_oracle(x, f.weight, f.bias), expected), 1e-5);
  }
}

TEST(FuseLayer, ShapeMismatchIsRejected) {
  LinearParams<float> o{Tensor<float>({3, 4}), Tensor<float>({3}), false};
  LinearParams<float> m{Tensor<float>({3, 5}), Tensor<float>({3}), true};
  EXPECT_THROW(fuse_layer(o, m, FusionConfig{}), ShapeError);
  EXPECT_THROW(fuse_layer(o, o, FusionConfig{std::nan(""), 1.0}), ContractError);
}

TEST(FuseModel, ZeroModalGivesBaseWeightsBitwise) {
  auto base = init_base<float>(tiny_config(), 7);
  base.set_trainable([](const std::string&) { return false; });
  RepOptions opt;
  opt.w = 0.0;
  auto fused = fuse_model(attach_rep(base, opt), FusionConfig{});
  for (const auto& [name, p] : base.params) {
    EXPECT_TRUE(bitwise_equal(fused.params.at(name).value, p.value)) << name;
  }
  EXPECT_TRUE(fused.params.contains(weight_name("adapter.conv0")));
  EXPECT_TRUE(fused.params.contains(weight_name("mid.xattn.id_k")));
}

TEST(FuseModel, HasNoModalCopiesAndCarriesAdapterAndIdentity) {
  auto dual = random_dual<float>(8);
  auto fused = fuse_model(dual, FusionConfig{});
  EXPECT_EQ(fused.variant(), Variant::fused);
  for (const auto& [name, p] : fused.params) {
    EXPECT_EQ(name.find(".modal."), std::string::npos) << name;
  }
  for (const auto& spec : fused.layers) {
    if (spec.role == LayerRole::base) continue;
    for (const auto& n : spec.tensor_names()) {
      EXPECT_TRUE(bitwise_equal(fused.params.at(n).value, dual.params.at(n).value)) << n;
    }
  }
}

TEST(FuseModel, ParamCountIsBasePlusAdapterPlusIdentity) {
  auto dual = random_dual<float>(9);
  auto fused = fuse_model(dual, FusionConfig{});
  auto base = init_base<float>(tiny_config(), 9);
  // Registry walk, independent of count_params.
  std::uint64_t adapter = 0, identity = 0;
  for (const auto& spec : fused.layers) {
    std::uint64_t n = 0;
    for (const auto& t : spec.tensor_names()) n += fused.params.at(t).value.size();
    if (spec.role == LayerRole::adapter) adapter += n;
    if (spec.role == LayerRole::identity) identity += n;
  }
  EXPECT_EQ(count_params(fused), count_params(base) + adapter + identity);
}

TEST(FuseModel, RejectsModelsWithoutModalBranch) {
  auto fused = fuse_model(random_dual<float>(10), FusionConfig{});
  EXPECT_THROW(fuse_model(fused, FusionConfig{}), ContractError);
  EXPECT_THROW(fuse_model(init_base<float>(tiny_config(), 1), FusionConfig{}), ContractError);
}

TEST(FuseModel, MalformedLayerIsNamed) {
  auto dual = random_dual<float>(11);
  dual.params.at(modal_weight_name("enc1.conv2")).value = Tensor<float>({1, 1, 1, 1});
  try {
    fuse_model(dual, FusionConfig{});
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("enc1.conv2"), std::string::npos);
  }
}

TEST(FuseModel, SideBySideForwardOnTwentyInputs) {
  auto dual = random_dual<float>(12);
  auto fused = fuse_model(dual, FusionConfig{});
  auto in = random_inputs<float>(dual.config, 20, 200, 13);
  auto a = predict(fused, in), b = predict(dual, in);
  EXPECT_LE(max_rel_diff(a, b), 1e-4);
}

TEST(VerifyEquivalence, PassesOnFusionOfFreshInit) {
  auto base = init_base<float>(tiny_config(), 14);
  base.set_trainable([](const std::string&) { return false; });
  auto dual = attach_rep(base, RepOptions{});
  auto report = verify_equivalence(dual, fuse_model(dual, FusionConfig{}), 20, 1e-4, 15);
  EXPECT_TRUE(report.passed);
  EXPECT_EQ(report.max_rel.size(), 20u);
  for (double d : report.max_abs) EXPECT_GE(d, 0.0);
}

TEST(VerifyEquivalence, CatchesPerturbedWeight) {
  auto dual = random_dual<float>(16);
  auto fused = fuse_model(dual, FusionConfig{});
  fused.params.at(weight_name("out.conv")).value[0] += 1e-2f;
  EXPECT_FALSE(verify_equivalence(dual, fused, 20, 1e-4, 17).passed);
}

TEST(VerifyEquivalence, BetaZeroAgainstZeroedModalIsBitwise) {
  auto dual = random_dual<float>(18);
  for (auto& [name, p] : dual.params) {
    if (name.find(".modal.") != std::string::npos) p.value.fill(0.0f);
  }
  auto report = verify_equivalence(dual, fuse_model(dual, FusionConfig{1.0, 0.0}), 20, 0.0, 19);
  EXPECT_TRUE(report.passed);
  EXPECT_EQ(report.worst_abs(), 0.0);
}

TEST(VerifyEquivalence, DeterministicBySeed) {
  auto dual = random_dual<float>(20);
  auto fused = fuse_model(dual, FusionConfig{});
  auto r1 = verify_equivalence(dual, fused, 5, 1e-4, 21);
  auto r2 = verify_equivalence(dual, fused, 5, 1e-4, 21);
  EXPECT_EQ(r1.max_abs, r2.max_abs);
  EXPECT_EQ(r1.max_rel, r2.max_rel);
}

TEST(VerifyEquivalence, ArchitectureMismatchIsRejected) {
  auto dual = random_dual<float>(22);
  auto base = init_base<float>(tiny_config(), 22);
  EXPECT_THROW(verify_equivalence(dual, base, 2, 1e-4, 1), ContractError);
}

TEST(FusionExactness, WholeModelFloat64) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto dual = random_dual<double>(30 + seed);
    auto report = verify_equivalence(dual, fuse_model(dual, FusionConfig{}), 10, 1e-10, seed);
    EXPECT_TRUE(report.passed) << report.worst_rel();
  }
}
