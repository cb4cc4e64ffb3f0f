#pragma once

#include <cstdint>
#include <vector>

#include "repcn/layers.hpp"
#include "repcn/unet.hpp"

namespace repcn {

// Theta' = alpha * Theta + beta * Theta_m
struct FusionConfig {
  double alpha = 1.0;
  double beta = 1.0;

  void validate() const;
};

struct EquivalenceReport {
  std::vector<double> max_abs;  // one per sample
  std::vector<double> max_rel;  // max|a-b| / max|b| per sample
  std::size_t samples = 0;
  double tolerance = 0.0;
  bool passed = false;

  double worst_abs() const;
  double worst_rel() const;
};

template <typename T>
LinearParams<T> fuse_layer(const LinearParams<T>& original, const LinearParams<T>& modal,
                           const FusionConfig& cfg);
template <typename T>
Conv2dParams<T> fuse_layer(const Conv2dParams<T>& original, const Conv2dParams<T>& modal,
                           const FusionConfig& cfg);

// Collapses every modal copy into its original layer. Adapter and identity
// layers are carried over unchanged. Models without modal copies are rejected.
template <typename T>
Model<T> fuse_model(const Model<T>& dual, const FusionConfig& cfg);

// Random inputs shared by both models, drawn deterministically from `seed`.
template <typename T>
ModelInputs<T> random_inputs(const ModelConfig& config, std::size_t batch,
                             std::size_t timesteps, std::uint64_t seed);

// Compares dual and fused forwards on `n_samples` random single-item inputs.
template <typename T>
EquivalenceReport verify_equivalence(const Model<T>& dual, const Model<T>& fused,
                                     std::size_t n_samples, double tol, std::uint64_t seed,
                                     std::size_t timesteps = 200);

}  // namespace repcn
