#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "repcn/controlnet.hpp"
#include "repcn/data.hpp"
#include "repcn/diffusion.hpp"

namespace repcn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::uint64_t steps = 0;
};

// Updates the trainable tensors named in `grads`. Other tensors are untouched.
template <typename T>
void adam_update(Model<T>& model, AdamState<T>& state, const GradMap<T>& grads,
                 const AdamConfig& cfg);

template <typename T>
struct TrainState {
  Model<T> model;
  AdamState<T> optimizer;
  std::uint64_t step = 0;
  std::mt19937_64 rng;
};

template <typename T>
TrainState<T> make_train_state(Model<T> model, std::uint64_t seed);

// Fully specified denoising batch: clean targets, their conditions, the
// timesteps and the noise to add.
template <typename T>
struct TrainBatch {
  Tensor<T> x0;          // [B,Cimg,H,W]
  Tensor<T> condition;   // [B,Cc,H,W]
  std::vector<std::size_t> captions;
  std::vector<std::size_t> identities;
  std::vector<std::size_t> timesteps;
  Tensor<T> noise;
};

// Stacks samples and draws timesteps and noise from `rng`.
template <typename T>
TrainBatch<T> make_batch(const std::vector<const SyntheticSample*>& samples,
                         const NoiseSchedule& schedule, std::mt19937_64& rng);

// Noise-prediction MSE of a model on a batch.
template <typename T>
T denoising_loss(const Model<T>& model, const TrainBatch<T>& batch,
                 const NoiseSchedule& schedule);

// One Adam step on the noise-prediction MSE. Throws DivergenceError when the
// loss is not finite; the model is left unchanged in that case.
template <typename T>
T train_step(TrainState<T>& state, const TrainBatch<T>& batch, const NoiseSchedule& schedule,
             const AdamConfig& adam);

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 16;
  AdamConfig adam;
  std::uint64_t seed = 0;
  // Called every `log_every` steps with (step, loss) when set.
  std::size_t log_every = 0;
  std::function<void(std::size_t, double)> log;
};

// Runs cfg.steps train_steps on minibatches drawn from `data`. Returns the losses.
template <typename T>
std::vector<double> train(TrainState<T>& state, const std::vector<SyntheticSample>& data,
                          const NoiseSchedule& schedule, const TrainConfig& cfg);

// Trains a fresh base on targets only (captions are kept, conditions are not
// used) and returns it with every tensor frozen.
template <typename T>
Model<T> pretrain_base(const ModelConfig& config, const std::vector<SyntheticSample>& data,
                       const NoiseSchedule& schedule, const TrainConfig& cfg);

struct RepOptions {
  double w = 0.1;
  bool scale_bias = true;
  bool adapter = true;
  bool identity = true;
  AdapterSite adapter_site = AdapterSite::features;
  std::size_t adapter_channels = 4;
  std::uint64_t seed = 0;
};

// Frozen base plus a trainable modal copy of every base conv/linear layer
// (initialized as w * original), a zero-output adapter and identity K/V
// projections with a zeroed value projection.
template <typename T>
Model<T> attach_rep(const Model<T>& base, const RepOptions& options);

// attach_rep, then cfg.steps steps with the optimizer seeded from cfg.seed.
template <typename T>
Model<T> train_rep(const Model<T>& base, const std::vector<SyntheticSample>& data,
                   const NoiseSchedule& schedule, const RepOptions& options,
                   const TrainConfig& cfg);

template <typename T>
Model<T> train_controlnet(const Model<T>& base, const std::vector<SyntheticSample>& data,
                          const NoiseSchedule& schedule, const TrainConfig& cfg);

// Samples one image per test condition (with its caption) and averages the
// IoU of the positive support against the target support.
template <typename T>
double mean_support_iou(const Model<T>& model, const NoiseSchedule& schedule,
                        const std::vector<SyntheticSample>& test, std::uint64_t seed,
                        std::size_t steps = 200);

}  // namespace repcn
