#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "repcn/unet.hpp"

namespace repcn {

struct DiffusionConfig {
  std::size_t timesteps = 200;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  std::size_t image_size = 16;
  std::size_t image_channels = 1;
  std::size_t condition_channels = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Linear beta schedule. Index t runs 1..T; slot 0 holds alpha_bar = 1.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(const DiffusionConfig& cfg);

  std::size_t timesteps() const { return betas_.size() - 1; }
  double beta(std::size_t t) const { return betas_.at(require_timestep(t)); }
  double alpha_bar(std::size_t t) const { return alpha_bars_.at(t); }
  // Throws ContractError unless 1 <= t <= T.
  std::size_t require_timestep(std::size_t t) const;

 private:

  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

// q(x_t | x_0) = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
template <typename T>
Tensor<T> ddpm_forward_noise(const Tensor<T>& x0, std::size_t t, const Tensor<T>& noise,
                             const NoiseSchedule& schedule);

// Per-item variant: one timestep per batch entry of x0[B,...].
template <typename T>
Tensor<T> ddpm_forward_noise(const Tensor<T>& x0, const std::vector<std::size_t>& t,
                             const Tensor<T>& noise, const NoiseSchedule& schedule);

// Evenly spaced timesteps T = tau_n > ... > tau_1 >= 1 used when sampling
// with fewer steps than the schedule has.
std::vector<std::size_t> respaced_timesteps(std::size_t timesteps, std::size_t steps);

template <typename T>
struct SampleRequest {
  std::size_t batch = 1;
  std::vector<std::size_t> captions;    // defaults to caption 0
  std::vector<std::size_t> identities;  // defaults to the captions
  std::optional<Tensor<T>> condition;   // [B,Cc,H,W]
  std::size_t steps = 200;
  std::uint64_t seed = 0;
};

// Ancestral DDPM sampling with the model's noise prediction. The x0 estimate
// is clipped to [-1,1] inside each step and the result is clamped at the end.
template <typename T>
Tensor<T> sample(const Model<T>& model, const NoiseSchedule& schedule,
                 const SampleRequest<T>& request);

}  // namespace repcn
