#pragma once

#include <optional>
#include <string>
#include <vector>

#include "repcn/layers.hpp"

namespace repcn {

// One denoising call: noisy images plus everything they are conditioned on.
template <typename T>
struct ModelInputs {
  Tensor<T> x;                              // [B, Cimg, H, W]
  std::vector<std::size_t> timesteps;       // 1..T, one per batch item
  std::vector<std::size_t> captions;        // text-table rows
  std::vector<std::size_t> identities;      // identity token seeds
  std::optional<Tensor<T>> condition;       // [B, Cc, H, W]

  std::size_t batch() const { return x.dim(0); }
};

// Sinusoidal embedding [B, dim] of integer timesteps.
template <typename T>
Tensor<T> timestep_embedding(const std::vector<std::size_t>& timesteps, std::size_t dim);

// Fixed pseudo-random identity tokens [B, tokens, width], one matrix per id.
template <typename T>
Tensor<T> identity_tokens(const std::vector<std::size_t>& identities, std::size_t tokens,
                          std::size_t width);

// Skip features consumed by the decoder plus the mid-block output.
struct EncoderOutputs {
  Var skip1;  // [B, C1, H, W]
  Var skip2;  // [B, C2, H/2, W/2]
  Var mid;    // [B, C2, H/2, W/2]
};

// conv_in through the mid block for the layers under `prefix` ("" for the
// base, "control." for the ControlNet copy). `features`, when given, is added
// to the conv_in output.
template <typename T>
EncoderOutputs encoder_forward(LayerContext<T>& ctx, const std::string& prefix, Var x_in,
                               Var temb, Var text, std::optional<Var> identity,
                               std::optional<Var> features = std::nullopt);

// Full U-Net on an already-conditioned input. `residuals`, when given, are
// added to the skip features and the mid output before the decoder uses them.
template <typename T>
Var unet_forward(LayerContext<T>& ctx, Var x_in, Var temb, Var text,
                 std::optional<Var> identity, const EncoderOutputs* residuals,
                 std::optional<Var> features = std::nullopt);

// Activated time embedding [B, E] from the model's time MLP.
template <typename T>
Var time_embedding(LayerContext<T>& ctx, const std::vector<std::size_t>& timesteps);
// Text context [B, text_tokens, context_dim] from the caption table.
template <typename T>
Var text_context(LayerContext<T>& ctx, const std::vector<std::size_t>& captions);

// Noise prediction for any model variant: adapter, identity tokens and the
// ControlNet branch are used when the model carries them.
template <typename T>
Var model_forward(LayerContext<T>& ctx, const ModelInputs<T>& inputs);

// Untraced model_forward.
template <typename T>
Tensor<T> predict(const Model<T>& model, const ModelInputs<T>& inputs);

}  // namespace repcn
