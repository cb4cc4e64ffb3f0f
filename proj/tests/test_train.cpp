#include <gtest/gtest.h>

#include "support.hpp"

using namespace repcn;
using namespace repcn::testing;

namespace {

template <typename T>
std::map<std::string, Tensor<T>> snapshot(const Model<T>& m) {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, p] : m.params) out.emplace(name, p.value);
  return out;
}

}  // namespace

TEST(Adam, SingleStepMatchesHandComputation) {
  auto m = single_layer_model<double>(linear_spec("fc", 2, 1), random_tensor<double>({1, 2}, 1),
                                      random_tensor<double>({1}, 2));
  m.set_trainable([](const std::string&) { return true; });
  const auto before = snapshot(m);
  AdamState<double> st;
  GradMap<double> g;
  g.emplace("fc.weight", Tensor<double>({1, 2}, std::vector<double>{0.5, -2.0}));
  AdamConfig cfg;
  cfg.lr = 0.01;
  adam_update(m, st, g, cfg);
  // First Adam step moves each coordinate by lr * g / (|g| + eps').
  const auto& w = m.params.at("fc.weight").value;
  EXPECT_NEAR(w[0], before.at("fc.weight")[0] - 0.01, 1e-9);
  EXPECT_NEAR(w[1], before.at("fc.weight")[1] + 0.01, 1e-9);
  EXPECT_TRUE(bitwise_equal(m.params.at("fc.bias").value, before.at("fc.bias")));
}

TEST(Adam, RejectsGradientForFrozenTensor) {
  auto m = single_layer_model<double>(linear_spec("fc", 2, 1), random_tensor<double>({1, 2}, 1),
                                      random_tensor<double>({1}, 2));
  AdamState<double> st;
  GradMap<double> g;
  g.emplace("fc.weight", Tensor<double>({1, 2}));
  EXPECT_THROW(adam_update(m, st, g, AdamConfig{}), ContractError);
}

TEST(TrainStep, ZeroLearningRateLeavesEveryTensor) {
  auto schedule = tiny_schedule();
  auto batch = fixed_batch<float>(4, 1, schedule);
  auto state = make_train_state(attach_rep(frozen_base<float>(2), RepOptions{}), 3);
  const auto before = snapshot(state.model);
  AdamConfig adam;
  adam.lr = 0.0;
  for (int i = 0; i < 5; ++i) train_step(state, batch, schedule, adam);
  for (const auto& [name, p] : state.model.params) {
    EXPECT_TRUE(bitwise_equal(p.value, before.at(name))) << name;
  }
}

TEST(TrainStep, FrozenBaseStaysBitwiseEqual) {
  auto schedule = tiny_schedule();
  auto batch = fixed_batch<float>(4, 4, schedule);
  auto state = make_train_state(attach_rep(frozen_base<float>(5), RepOptions{}), 6);
  const auto before = snapshot(state.model);
  for (int i = 0; i < 10; ++i) train_step(state, batch, schedule, AdamConfig{});
  std::size_t moved = 0;
  for (const auto& [name, p] : state.model.params) {
    if (p.trainable) {
      moved += !bitwise_equal(p.value, before.at(name));
    } else {
      EXPECT_TRUE(bitwise_equal(p.value, before.at(name))) << name;
    }
  }
  EXPECT_GT(moved, 0u);
}

TEST(TrainStep, DualOverfitsFixedBatch) {
  auto schedule = tiny_schedule();
  auto batch = fixed_batch<float>(4, 7, schedule);
  auto state = make_train_state(attach_rep(frozen_base<float>(8), RepOptions{}), 9);
  const double first = denoising_loss(state.model, batch, schedule);
  for (int i = 0; i < 500; ++i) train_step(state, batch, schedule, AdamConfig{});
  const double last = denoising_loss(state.model, batch, schedule);
  EXPECT_LE(last, 0.5 * first) << first << " -> " << last;
}

TEST(TrainStep, LossMatchesManualMse) {
  auto schedule = tiny_schedule();
  auto batch = fixed_batch<double>(3, 10, schedule);
  auto model = init_base<double>(tiny_config(), 11);
  ModelInputs<double> in;
  in.x = ddpm_forward_noise(batch.x0, batch.timesteps, batch.noise, schedule);
  in.timesteps = batch.timesteps;
  in.captions = batch.captions;
  in.identities = batch.identities;
  auto eps = predict(model, in);
  double mse = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) mse += (eps[i] - batch.noise[i]) * (eps[i] - batch.noise[i]);
  mse /= double(eps.size());
  EXPECT_NEAR(denoising_loss(model, batch, schedule), mse, 1e-12);
}

TEST(TrainStep, NonFiniteLossThrowsAndKeepsModel) {
  auto schedule = tiny_schedule();
  auto batch = fixed_batch<float>(2, 12, schedule);
  batch.noise[0] = std::numeric_limits<float>::infinity();
  auto state = make_train_state(init_base<float>(tiny_config(), 13), 14);
  const auto before = snapshot(state.model);
  EXPECT_THROW(train_step(state, batch, schedule, AdamConfig{}), DivergenceError);
  for (const auto& [name, p] : state.model.params) {
    EXPECT_TRUE(bitwise_equal(p.value, before.at(name))) << name;
  }
}

TEST(Pretrain, ZeroStepsReturnsFrozenInit) {
  auto data = make_dataset(8, 1, 8);
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 15;
  auto m = pretrain_base<float>(tiny_config(), data, tiny_schedule(), cfg);
  auto init = init_base<float>(tiny_config(), 15);
  EXPECT_EQ(m.pretrain_steps, 0u);
  for (const auto& [name, p] : m.params) {
    EXPECT_FALSE(p.trainable) << name;
    EXPECT_TRUE(bitwise_equal(p.value, init.params.at(name).value)) << name;
  }
}

TEST(Pretrain, DeterministicPerSeed) {
  auto data = make_dataset(8, 2, 8);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 4;
  cfg.seed = 16;
  auto a = pretrain_base<float>(tiny_config(), data, tiny_schedule(), cfg);
  auto b = pretrain_base<float>(tiny_config(), data, tiny_schedule(), cfg);
  EXPECT_EQ(a.pretrain_steps, 3u);
  for (const auto& [name, p] : a.params) {
    EXPECT_TRUE(bitwise_equal(p.value, b.params.at(name).value)) << name;
  }
}

TEST(AttachRep, StartsEquivalentToBase) {
  auto base = frozen_base<double>(17);
  RepOptions opt;
  opt.w = 0.0;
  auto dual = attach_rep(base, opt);
  EXPECT_EQ(dual.variant(), Variant::dual);
  auto in = random_inputs<double>(dual.config, 3, 200, 18);
  auto base_in = in;
  base_in.condition.reset();
  EXPECT_TRUE(bitwise_equal(predict(dual, in), predict(base, base_in)));
  for (const auto& [name, p] : dual.params) {
    EXPECT_EQ(p.trainable, !base.params.contains(name)) << name;
  }
}

TEST(AttachRep, ModalWeightsAreScaledCopies) {
  auto base = frozen_base<double>(19);
  RepOptions opt;
  opt.w = 0.25;
  auto dual = attach_rep(base, opt);
  for (const auto& layer : duplicable_layers(dual.layers)) {
    const auto& o = base.params.at(layer + ".weight").value;
    const auto& m = dual.params.at(layer + ".modal.weight").value;
    for (std::size_t i = 0; i < o.size(); ++i) EXPECT_EQ(m[i], 0.25 * o[i]);
  }
}
