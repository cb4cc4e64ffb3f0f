#include "repcn/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace repcn {

void DiffusionConfig::validate() const {
  if (timesteps < 1) throw ContractError("diffusion needs at least one timestep");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end)) {
    throw ContractError("beta schedule must satisfy 0 < beta_start <= beta_end < 1");
  }
  if (timesteps > 1 && !(beta_start < beta_end)) {
    throw ContractError("beta schedule must be strictly increasing");
  }
  if (image_size < 8) throw ContractError("image size must be at least 8");
}

NoiseSchedule::NoiseSchedule(const DiffusionConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.timesteps;
  betas_.assign(n + 1, 0.0);
  alpha_bars_.assign(n + 1, 1.0);
  for (std::size_t t = 1; t <= n; ++t) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(n - 1);
    betas_[t] = cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start);
    alpha_bars_[t] = alpha_bars_[t - 1] * (1.0 - betas_[t]);
  }
}

std::size_t NoiseSchedule::require_timestep(std::size_t t) const {
  if (t < 1 || t >= betas_.size()) {
    throw ContractError("timestep " + std::to_string(t) + " outside 1.." +
                        std::to_string(betas_.size() - 1));
  }
  return t;
}

template <typename T>
Tensor<T> ddpm_forward_noise(const Tensor<T>& x0, std::size_t t, const Tensor<T>& noise,
                             const NoiseSchedule& schedule) {
  x0.require_same_shape(noise, "ddpm_forward_noise");
  const double ab = schedule.alpha_bar(schedule.require_timestep(t));
  const T a = static_cast<T>(std::sqrt(ab));
  const T s = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + s * noise[i];
  return out;
}

template <typename T>
Tensor<T> ddpm_forward_noise(const Tensor<T>& x0, const std::vector<std::size_t>& t,
                             const Tensor<T>& noise, const NoiseSchedule& schedule) {
  x0.require_same_shape(noise, "ddpm_forward_noise");
  if (x0.rank() == 0 || t.size() != x0.dim(0)) {
    throw ShapeError("need one timestep per batch item");
  }
  const std::size_t per = x0.size() / t.size();
  Tensor<T> out(x0.shape());
  for (std::size_t b = 0; b < t.size(); ++b) {
    schedule.require_timestep(t[b]);
    const double ab = schedule.alpha_bar(t[b]);
    const T a = static_cast<T>(std::sqrt(ab));
    const T s = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = a * x0[i] + s * noise[i];
  }
  return out;
}

std::vector<std::size_t> respaced_timesteps(std::size_t timesteps, std::size_t steps) {
  if (steps < 1) throw ContractError("sampling needs at least one step");
  if (steps > timesteps) {
    throw ContractError("cannot sample with " + std::to_string(steps) + " steps from a " +
                        std::to_string(timesteps) + "-step schedule");
  }
  std::vector<std::size_t> out(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    // i = steps-1 maps to T, i = 0 to the smallest retained step.
    const double pos = steps == 1 ? static_cast<double>(timesteps)
                                  : 1.0 + static_cast<double>(i) * (timesteps - 1) / (steps - 1);
    out[i] = static_cast<std::size_t>(std::llround(pos));
  }
  return out;
}

template <typename T>
Tensor<T> sample(const Model<T>& model, const NoiseSchedule& schedule,
                 const SampleRequest<T>& request) {
  const auto& c = model.config;
  const std::size_t batch = request.batch;
  if (batch < 1) throw ContractError("sample batch must be positive");
  const auto taus = respaced_timesteps(schedule.timesteps(), request.steps);

  ModelInputs<T> in;
  in.captions = request.captions.empty() ? std::vector<std::size_t>(batch, 0) : request.captions;
  in.identities = request.identities.empty() ? in.captions : request.identities;
  in.condition = request.condition;
  if (in.captions.size() != batch || in.identities.size() != batch) {
    throw ShapeError("captions/identities must have one entry per sample");
  }

  std::mt19937_64 rng(request.seed);
  const Shape shape{batch, c.image_channels, c.image_size, c.image_size};
  Tensor<T> x = Tensor<T>::randn(shape, rng);
  for (std::size_t i = taus.size(); i-- > 0;) {
    const std::size_t t = taus[i];
    const std::size_t t_prev = i == 0 ? 0 : taus[i - 1];
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const double beta = 1.0 - ab / ab_prev;

    in.x = x;
    in.timesteps.assign(batch, t);
    const Tensor<T> eps = predict(model, in);

    const double sa = std::sqrt(ab), s1 = std::sqrt(1.0 - ab);
    const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double c_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    Tensor<T> noise = i == 0 ? Tensor<T>(shape) : Tensor<T>::randn(shape, rng);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double xt = static_cast<double>(x[j]);
      double x0 = (xt - s1 * static_cast<double>(eps[j])) / sa;
      x0 = std::clamp(x0, -1.0, 1.0);
      const double mean = c_x0 * x0 + c_xt * xt;
      x[j] = static_cast<T>(mean + sigma * static_cast<double>(noise[j]));
    }
  }
  for (std::size_t j = 0; j < x.size(); ++j) x[j] = std::clamp(x[j], T{-1}, T{1});
  return x;
}

#define REPCN_INSTANTIATE(T)                                                                 \
  template Tensor<T> ddpm_forward_noise(const Tensor<T>&, std::size_t, const Tensor<T>&,    \
                                        const NoiseSchedule&);                               \
  template Tensor<T> ddpm_forward_noise(const Tensor<T>&, const std::vector<std::size_t>&,  \
                                        const Tensor<T>&, const NoiseSchedule&);             \
  template Tensor<T> sample(const Model<T>&, const NoiseSchedule&, const SampleRequest<T>&);

REPCN_INSTANTIATE(float)
REPCN_INSTANTIATE(double)
#undef REPCN_INSTANTIATE

}  // namespace repcn
