#include "repcn/controlnet.hpp"

namespace repcn {

template <typename T>
Model<T> attach_controlnet(const Model<T>& base) {
  if (base.parts != Components{}) {
    throw ContractError(std::string("ControlNet attaches to a base model, got variant ") +
                        variant_name(base.variant()));
  }
  Model<T> out;
  out.config = base.config;
  out.parts.control = true;
  out.pretrain_steps = base.pretrain_steps;
  out.layers = build_layer_specs(out.config, out.parts);
  for (const auto& [name, p] : base.params) out.params.set(name, p.value, false);
  const std::string prefix = "control.";
  for (const auto& spec : out.layers) {
    if (spec.role != LayerRole::control) continue;
    const std::string source = spec.name.substr(prefix.size());
    if (base.has_layer(source)) {
      for (const auto& tensor : spec.tensor_names()) {
        out.params.set(tensor, base.params.at(tensor.substr(prefix.size())).value, true);
      }
    } else {
      out.params.set(weight_name(spec.name), Tensor<T>(spec.weight_shape()), true);
      out.params.set(bias_name(spec.name), Tensor<T>(spec.bias_shape()), true);
    }
  }
  validate_model(out);
  return out;
}

template <typename T>
EncoderOutputs control_residuals(LayerContext<T>& ctx, Var x, Var condition, Var temb,
                                 Var text) {
  auto& tape = ctx.tape();
  Var hint = zero_conv_forward(ctx, "control.zin", condition);
  Var x_in;
  {
    typename Tape<T>::Scope scope(tape, "control.zin");
    x_in = ag::add(tape, x, hint);
  }
  EncoderOutputs enc = encoder_forward(ctx, "control.", x_in, temb, text, std::nullopt);
  return EncoderOutputs{zero_conv_forward(ctx, "control.zout1", enc.skip1),
                        zero_conv_forward(ctx, "control.zout2", enc.skip2),
                        zero_conv_forward(ctx, "control.zmid", enc.mid)};
}

template <typename T>
Var controlnet_forward(LayerContext<T>& ctx, const ModelInputs<T>& inputs) {
  if (!ctx.model().parts.control) throw ContractError("model has no ControlNet branch");
  if (!inputs.condition) throw ContractError("ControlNet forward needs a condition image");
  auto& tape = ctx.tape();
  Var temb = time_embedding(ctx, inputs.timesteps);
  Var text = text_context(ctx, inputs.captions);
  Var x = tape.constant(inputs.x);
  Var c = tape.constant(*inputs.condition);
  const EncoderOutputs residuals = control_residuals(ctx, x, c, temb, text);
  return unet_forward(ctx, x, temb, text, std::nullopt, &residuals);
}

template Model<float> attach_controlnet(const Model<float>&);
template Model<double> attach_controlnet(const Model<double>&);
template EncoderOutputs control_residuals(LayerContext<float>&, Var, Var, Var, Var);
template EncoderOutputs control_residuals(LayerContext<double>&, Var, Var, Var, Var);
template Var controlnet_forward(LayerContext<float>&, const ModelInputs<float>&);
template Var controlnet_forward(LayerContext<double>&, const ModelInputs<double>&);

}  // namespace repcn
