#include <benchmark/benchmark.h>

#include "repcn/repcn.hpp"

using namespace repcn;

namespace {

struct Models {
  Model<float> base, dual, fused, controlnet;

  Models() {
    base = init_base<float>(ModelConfig{}, 1);
    base.set_trainable([](const std::string&) { return false; });
    dual = attach_rep(base, RepOptions{});
    fused = fuse_model(dual, FusionConfig{});
    controlnet = attach_controlnet(base);
  }
};

const Models& models() {
  static const Models m;
  return m;
}

const Model<float>& pick(int variant) {
  switch (variant) {
    case 0: return models().base;
    case 1: return models().dual;
    case 2: return models().fused;
    default: return models().controlnet;
  }
}

// Inference forward per variant; the fused model should track the base.
void BM_Forward(benchmark::State& state) {
  const auto& m = pick(static_cast<int>(state.range(0)));
  const auto batch = static_cast<std::size_t>(state.range(1));
  auto in = random_inputs<float>(m.config, batch, 200, 7);
  if (!m.parts.adapter && !m.parts.control) in.condition.reset();
  for (auto _ : state) benchmark::DoNotOptimize(predict(m, in));
  state.SetLabel(variant_name(m.variant()));
  state.counters["model_GFLOP"] =
      double(count_flops(m, in.x.shape()).total_flops()) * 1e-9;
}
BENCHMARK(BM_Forward)->ArgsProduct({{0, 1, 2, 3}, {1, 16}})->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const auto& m = pick(static_cast<int>(state.range(0)));
  NoiseSchedule schedule{DiffusionConfig{}};
  const auto data = make_dataset(16, 1, m.config.image_size);
  std::vector<const SyntheticSample*> ptrs;
  for (const auto& s : data) ptrs.push_back(&s);
  std::mt19937_64 rng(2);
  const auto batch = make_batch<float>(ptrs, schedule, rng);
  auto train = make_train_state(m, 3);
  for (auto _ : state) benchmark::DoNotOptimize(train_step(train, batch, schedule, AdamConfig{}));
  state.SetLabel(variant_name(m.variant()));
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_Fuse(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(fuse_model(models().dual, FusionConfig{}));
}
BENCHMARK(BM_Fuse)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
