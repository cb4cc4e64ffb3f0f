#include "repcn/train.hpp"

#include <cmath>

namespace repcn {

template <typename T>
void adam_update(Model<T>& model, AdamState<T>& state, const GradMap<T>& grads,
                 const AdamConfig& cfg) {
  state.steps += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.steps));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.steps));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step = static_cast<T>(cfg.lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(cfg.eps);
  for (const auto& [name, g] : grads) {
    auto& p = model.params.at(name);
    if (!p.trainable) throw ContractError("gradient for frozen tensor '" + name + "'");
    auto [mit, m_new] = state.m.try_emplace(name, g.shape());
    auto [vit, v_new] = state.v.try_emplace(name, g.shape());
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      p.value[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
}

template <typename T>
TrainState<T> make_train_state(Model<T> model, std::uint64_t seed) {
  TrainState<T> s;
  s.model = std::move(model);
  s.rng.seed(seed);
  return s;
}

template <typename T>
TrainBatch<T> make_batch(const std::vector<const SyntheticSample*>& samples,
                         const NoiseSchedule& schedule, std::mt19937_64& rng) {
  if (samples.empty()) throw ContractError("empty training batch");
  const Shape ts = samples.front()->target.shape();
  const Shape cs = samples.front()->condition.shape();
  const std::size_t b = samples.size();
  TrainBatch<T> batch;
  Shape xs{b};
  xs.insert(xs.end(), ts.begin(), ts.end());
  Shape xc{b};
  xc.insert(xc.end(), cs.begin(), cs.end());
  batch.x0 = Tensor<T>(xs);
  batch.condition = Tensor<T>(xc);
  const std::size_t nt = num_elements(ts), nc = num_elements(cs);
  std::uniform_int_distribution<std::size_t> t_dist(1, schedule.timesteps());
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = *samples[i];
    if (s.target.shape() != ts || s.condition.shape() != cs) {
      throw ShapeError("batch samples differ in shape");
    }
    for (std::size_t j = 0; j < nt; ++j) batch.x0[i * nt + j] = static_cast<T>(s.target[j]);
    for (std::size_t j = 0; j < nc; ++j) batch.condition[i * nc + j] = static_cast<T>(s.condition[j]);
    batch.captions.push_back(s.caption);
    batch.identities.push_back(s.caption);
    batch.timesteps.push_back(t_dist(rng));
  }
  batch.noise = Tensor<T>::randn(xs, rng);
  return batch;
}

namespace {

template <typename T>
Var loss_on_tape(LayerContext<T>& ctx, const TrainBatch<T>& batch, const NoiseSchedule& schedule) {
  ModelInputs<T> in;
  in.x = ddpm_forward_noise(batch.x0, batch.timesteps, batch.noise, schedule);
  in.timesteps = batch.timesteps;
  in.captions = batch.captions;
  in.identities = batch.identities;
  in.condition = batch.condition;
  Var pred = model_forward(ctx, in);
  auto& tape = ctx.tape();
  return ag::mse(tape, pred, tape.constant(batch.noise));
}

}  // namespace

template <typename T>
T denoising_loss(const Model<T>& model, const TrainBatch<T>& batch,
                 const NoiseSchedule& schedule) {
  Tape<T> tape(false);
  LayerContext<T> ctx(tape, model);
  return tape.value(loss_on_tape(ctx, batch, schedule)).item();
}

template <typename T>
T train_step(TrainState<T>& state, const TrainBatch<T>& batch, const NoiseSchedule& schedule,
             const AdamConfig& adam) {
  Tape<T> tape;
  LayerContext<T> ctx(tape, state.model);
  Var loss = loss_on_tape(ctx, batch, schedule);
  const T value = tape.value(loss).item();
  if (!std::isfinite(value)) {
    throw DivergenceError("non-finite loss " + std::to_string(value) + " at step " +
                          std::to_string(state.step + 1));
  }
  const GradMap<T> grads = backward(tape, loss);
  adam_update(state.model, state.optimizer, grads, adam);
  state.step += 1;
  return value;
}

template <typename T>
std::vector<double> train(TrainState<T>& state, const std::vector<SyntheticSample>& data,
                          const NoiseSchedule& schedule, const TrainConfig& cfg) {
  if (data.empty()) throw ContractError("training needs a non-empty dataset");
  if (cfg.batch < 1) throw ContractError("batch size must be positive");
  std::vector<double> losses;
  losses.reserve(cfg.steps);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<const SyntheticSample*> chosen(cfg.batch);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    for (auto& p : chosen) p = &data[pick(state.rng)];
    const auto batch = make_batch<T>(chosen, schedule, state.rng);
    losses.push_back(static_cast<double>(train_step(state, batch, schedule, cfg.adam)));
    if (cfg.log && cfg.log_every && (s + 1) % cfg.log_every == 0) cfg.log(s + 1, losses.back());
  }
  return losses;
}

template <typename T>
Model<T> pretrain_base(const ModelConfig& config, const std::vector<SyntheticSample>& data,
                       const NoiseSchedule& schedule, const TrainConfig& cfg) {
  auto state = make_train_state(init_base<T>(config, cfg.seed), cfg.seed + 1);
  if (cfg.steps > 0) train(state, data, schedule, cfg);
  Model<T> base = std::move(state.model);
  base.set_trainable([](const std::string&) { return false; });
  base.pretrain_steps = cfg.steps;
  return base;
}

template <typename T>
Model<T> attach_rep(const Model<T>& base, const RepOptions& options) {
  if (base.parts != Components{}) {
    throw ContractError(std::string("modal copies attach to a base model, got variant ") +
                        variant_name(base.variant()));
  }
  if (!std::isfinite(options.w)) throw ContractError("modal ratio w must be finite");
  validate_model(base);
  Model<T> out;
  out.config = base.config;
  out.config.adapter_site = options.adapter_site;
  out.config.adapter_channels = options.adapter_channels;
  out.config.validate();
  out.parts = Components{true, options.adapter, options.identity, false};
  out.layers = build_layer_specs(out.config, out.parts);
  out.pretrain_steps = base.pretrain_steps;
  for (const auto& [name, p] : base.params) out.params.set(name, p.value, false);
  const T w = static_cast<T>(options.w);
  for (const auto& spec : out.layers) {
    if (spec.role == LayerRole::base) {
      if (!spec.is_affine_operator()) continue;
      const Tensor<T>& weight = base.params.at(weight_name(spec.name)).value;
      const Tensor<T>& bias = base.params.at(bias_name(spec.name)).value;
      out.params.set(modal_weight_name(spec.name), mul_scalar(weight, w), true);
      out.params.set(modal_bias_name(spec.name),
                     options.scale_bias ? mul_scalar(bias, w) : Tensor<T>(bias.shape()), true);
      continue;
    }
    init_layer(spec, out.params, options.seed, true);
    if (spec.name == "adapter.conv2" || spec.name == "mid.xattn.id_v") {
      out.params.at(weight_name(spec.name)).value.fill(T{0});
      out.params.at(bias_name(spec.name)).value.fill(T{0});
    }
  }
  validate_model(out);
  return out;
}

template <typename T>
Model<T> train_rep(const Model<T>& base, const std::vector<SyntheticSample>& data,
                   const NoiseSchedule& schedule, const RepOptions& options,
                   const TrainConfig& cfg) {
  auto state = make_train_state(attach_rep(base, options), cfg.seed);
  if (cfg.steps > 0) train(state, data, schedule, cfg);
  return std::move(state.model);
}

template <typename T>
Model<T> train_controlnet(const Model<T>& base, const std::vector<SyntheticSample>& data,
                          const NoiseSchedule& schedule, const TrainConfig& cfg) {
  auto state = make_train_state(attach_controlnet(base), cfg.seed);
  if (cfg.steps > 0) train(state, data, schedule, cfg);
  return std::move(state.model);
}

template <typename T>
double mean_support_iou(const Model<T>& model, const NoiseSchedule& schedule,
                        const std::vector<SyntheticSample>& test, std::uint64_t seed,
                        std::size_t steps) {
  if (test.empty()) throw ContractError("IoU evaluation needs at least one test sample");
  const std::size_t n = test.size();
  const Shape one = test.front().condition.shape();
  const std::size_t per = test.front().condition.size();
  SampleRequest<T> req;
  req.batch = n;
  req.steps = steps;
  req.seed = seed;
  Tensor<T> cond({n, one[0], one[1], one[2]});
  for (std::size_t i = 0; i < n; ++i) {
    test[i].condition.require_same_shape(test.front().condition, "mean_support_iou");
    req.captions.push_back(test[i].caption);
    for (std::size_t j = 0; j < per; ++j) cond[i * per + j] = static_cast<T>(test[i].condition[j]);
  }
  if (model.parts.adapter || model.parts.control) req.condition = std::move(cond);
  const Tensor<T> images = sample(model, schedule, req);
  double total = 0;
  std::vector<float> pixels(per);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < per; ++j) pixels[j] = static_cast<float>(images[i * per + j]);
    total += iou(threshold_mask(pixels), threshold_mask(test[i].target.data()));
  }
  return total / static_cast<double>(n);
}

#define REPCN_INSTANTIATE(T)                                                                  \
  template void adam_update(Model<T>&, AdamState<T>&, const GradMap<T>&, const AdamConfig&); \
  template TrainState<T> make_train_state(Model<T>, std::uint64_t);                          \
  template TrainBatch<T> make_batch(const std::vector<const SyntheticSample*>&,               \
                                    const NoiseSchedule&, std::mt19937_64&);                  \
  template T denoising_loss(const Model<T>&, const TrainBatch<T>&, const NoiseSchedule&);    \
  template T train_step(TrainState<T>&, const TrainBatch<T>&, const NoiseSchedule&,          \
                        const AdamConfig&);                                                   \
  template std::vector<double> train(TrainState<T>&, const std::vector<SyntheticSample>&,    \
                                     const NoiseSchedule&, const TrainConfig&);               \
  template Model<T> pretrain_base(const ModelConfig&, const std::vector<SyntheticSample>&,   \
                                  const NoiseSchedule&, const TrainConfig&);                  \
  template Model<T> attach_rep(const Model<T>&, const RepOptions&);                          \
  template Model<T> train_rep(const Model<T>&, const std::vector<SyntheticSample>&,          \
                              const NoiseSchedule&, const RepOptions&, const TrainConfig&);   \
  template Model<T> train_controlnet(const Model<T>&, const std::vector<SyntheticSample>&,   \
                                     const NoiseSchedule&, const TrainConfig&);               \
  template double mean_support_iou(const Model<T>&, const NoiseSchedule&,                    \
                                   const std::vector<SyntheticSample>&, std::uint64_t,       \
                                   std::size_t);

REPCN_INSTANTIATE(float)
REPCN_INSTANTIATE(double)
#undef REPCN_INSTANTIATE

}  // namespace repcn
