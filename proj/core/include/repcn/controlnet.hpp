#pragma once

#include "repcn/unet.hpp"

namespace repcn {

// Adds a ControlNet branch to a base model: a trainable copy of conv_in,
// both encoder levels and the mid block (initialized from the base weights),
// an input zero convolution on the condition and one output zero convolution
// per injected feature. The base tensors are frozen.
template <typename T>
Model<T> attach_controlnet(const Model<T>& base);

// Residuals Z(F(x + Z(c; z_in); control); z_out) for the decoder skips and
// the mid output.
template <typename T>
EncoderOutputs control_residuals(LayerContext<T>& ctx, Var x, Var condition, Var temb,
                                 Var text);

// y_c = F(x; base) with the branch residuals injected.
template <typename T>
Var controlnet_forward(LayerContext<T>& ctx, const ModelInputs<T>& inputs);

}  // namespace repcn
