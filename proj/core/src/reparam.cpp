#include "repcn/reparam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace repcn {

void FusionConfig::validate() const {
  if (!std::isfinite(alpha) || !std::isfinite(beta)) {
    throw ContractError("fusion coefficients must be finite");
  }
}

double EquivalenceReport::worst_abs() const {
  return max_abs.empty() ? 0.0 : *std::max_element(max_abs.begin(), max_abs.end());
}

double EquivalenceReport::worst_rel() const {
  return max_rel.empty() ? 0.0 : *std::max_element(max_rel.begin(), max_rel.end());
}

namespace {

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, const Tensor<T>& b, const FusionConfig& cfg,
                       const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string("cannot fuse ") + what + ": original " + to_string(a.shape()) +
                     " vs modal " + to_string(b.shape()));
  }
  const T alpha = static_cast<T>(cfg.alpha);
  const T beta = static_cast<T>(cfg.beta);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = alpha * a[i] + beta * b[i];
  return out;
}

}  // namespace

template <typename T>
LinearParams<T> fuse_layer(const LinearParams<T>& original, const LinearParams<T>& modal,
                           const FusionConfig& cfg) {
  cfg.validate();
  return LinearParams<T>{weighted_sum(original.weight, modal.weight, cfg, "weight"),
                         weighted_sum(original.bias, modal.bias, cfg, "bias"), false};
}

template <typename T>
Conv2dParams<T> fuse_layer(const Conv2dParams<T>& original, const Conv2dParams<T>& modal,
                           const FusionConfig& cfg) {
  cfg.validate();
  if (original.stride != modal.stride || original.padding != modal.padding) {
    throw ShapeError("cannot fuse convolutions with different stride or padding");
  }
  return Conv2dParams<T>{weighted_sum(original.kernel, modal.kernel, cfg, "kernel"),
                         weighted_sum(original.bias, modal.bias, cfg, "bias"), original.stride,
                         original.padding, false};
}

template <typename T>
Model<T> fuse_model(const Model<T>& dual, const FusionConfig& cfg) {
  cfg.validate();
  if (!dual.parts.modal) {
    throw ContractError(std::string("model has no modal branch to fuse (variant ") +
                        variant_name(dual.variant()) + ")");
  }
  validate_model(dual);
  Model<T> out;
  out.config = dual.config;
  out.parts = dual.parts;
  out.parts.modal = false;
  out.layers = build_layer_specs(out.config, out.parts);
  out.pretrain_steps = dual.pretrain_steps;
  for (const auto& spec : dual.layers) {
    const auto names = spec.tensor_names();
    if (spec.role != LayerRole::base || !spec.is_affine_operator()) {
      for (const auto& n : names) {
        const auto& p = dual.params.at(n);
        out.params.set(n, p.value, p.trainable);
      }
      continue;
    }
    try {
      out.params.set(weight_name(spec.name),
                     weighted_sum(dual.params.at(weight_name(spec.name)).value,
                                  dual.params.at(modal_weight_name(spec.name)).value, cfg,
                                  "weight"),
                     false);
      out.params.set(bias_name(spec.name),
                     weighted_sum(dual.params.at(bias_name(spec.name)).value,
                                  dual.params.at(modal_bias_name(spec.name)).value, cfg, "bias"),
                     false);
    } catch (const std::exception& e) {
      throw ContractError("layer '" + spec.name + "': " + e.what());
    }
  }
  validate_model(out);
  return out;
}

template <typename T>
ModelInputs<T> random_inputs(const ModelConfig& config, std::size_t batch,
                             std::size_t timesteps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t s = config.image_size;
  ModelInputs<T> in;
  in.x = Tensor<T>::randn({batch, config.image_channels, s, s}, rng);
  std::uniform_int_distribution<std::size_t> t_dist(1, timesteps);
  std::uniform_int_distribution<std::size_t> cap_dist(0, config.num_captions - 1);
  std::uniform_int_distribution<std::size_t> id_dist(0, 1023);
  for (std::size_t b = 0; b < batch; ++b) {
    in.timesteps.push_back(t_dist(rng));
    in.captions.push_back(cap_dist(rng));
    in.identities.push_back(id_dist(rng));
  }
  Tensor<T> cond({batch, config.condition_channels, s, s});
  std::bernoulli_distribution edge(0.2);
  for (std::size_t i = 0; i < cond.size(); ++i) cond[i] = edge(rng) ? T{1} : T{0};
  in.condition = std::move(cond);
  return in;
}

template <typename T>
EquivalenceReport verify_equivalence(const Model<T>& dual, const Model<T>& fused,
                                     std::size_t n_samples, double tol, std::uint64_t seed,
                                     std::size_t timesteps) {
  if (dual.config != fused.config) throw ContractError("models have different configurations");
  Components expected = dual.parts;
  expected.modal = false;
  if (fused.parts != expected) {
    throw ContractError(std::string("architecture mismatch: ") + variant_name(dual.variant()) +
                        " vs " + variant_name(fused.variant()));
  }
  EquivalenceReport report;
  report.tolerance = tol;
  report.samples = n_samples;
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < n_samples; start += kChunk) {
    const std::size_t batch = std::min(kChunk, n_samples - start);
    const auto in = random_inputs<T>(dual.config, batch, timesteps, seed + start);
    const Tensor<T> a = predict(fused, in);
    const Tensor<T> b = predict(dual, in);
    const std::size_t per = a.size() / batch;
    for (std::size_t i = 0; i < batch; ++i) {
      double diff = 0.0, scale = 0.0;
      for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
        diff = std::max(diff, std::abs(static_cast<double>(a[j]) - static_cast<double>(b[j])));
        scale = std::max(scale, std::abs(static_cast<double>(b[j])));
      }
      const double rel = scale > 0.0 ? diff / scale
                                     : (diff > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
      report.max_abs.push_back(diff);
      report.max_rel.push_back(rel);
    }
  }
  report.passed = report.worst_rel() <= tol;
  return report;
}

#define REPCN_INSTANTIATE(T)                                                                  \
  template LinearParams<T> fuse_layer(const LinearParams<T>&, const LinearParams<T>&,        \
                                      const FusionConfig&);                                   \
  template Conv2dParams<T> fuse_layer(const Conv2dParams<T>&, const Conv2dParams<T>&,        \
                                      const FusionConfig&);                                   \
  template Model<T> fuse_model(const Model<T>&, const FusionConfig&);                        \
  template ModelInputs<T> random_inputs(const ModelConfig&, std::size_t, std::size_t,         \
                                        std::uint64_t);                                       \
  template EquivalenceReport verify_equivalence(const Model<T>&, const Model<T>&, std::size_t, \
                                                double, std::uint64_t, std::size_t);

REPCN_INSTANTIATE(float)
REPCN_INSTANTIATE(double)
#undef REPCN_INSTANTIATE

}  // namespace repcn
