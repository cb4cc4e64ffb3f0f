#include "repcn/unet.hpp"

#include <cmath>
#include <random>

#include "repcn/controlnet.hpp"

namespace repcn {

template <typename T>
Tensor<T> timestep_embedding(const std::vector<std::size_t>& timesteps, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ShapeError("timestep embedding width must be even");
  const std::size_t half = dim / 2;
  Tensor<T> out({timesteps.size(), dim});
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
      const double arg = static_cast<double>(timesteps[b]) * freq;
      out.at(b, i) = static_cast<T>(std::sin(arg));
      out.at(b, half + i) = static_cast<T>(std::cos(arg));
    }
  }
  return out;
}

template <typename T>
Tensor<T> identity_tokens(const std::vector<std::size_t>& identities, std::size_t tokens,
                          std::size_t width) {
  Tensor<T> out({identities.size(), tokens, width});
  for (std::size_t b = 0; b < identities.size(); ++b) {
    std::mt19937_64 rng(0x1D5EEDull * 1000003ull + identities[b]);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t i = 0; i < tokens * width; ++i) {
      out[b * tokens * width + i] = static_cast<T>(dist(rng));
    }
  }
  return out;
}

template <typename T>
Var time_embedding(LayerContext<T>& ctx, const std::vector<std::size_t>& timesteps) {
  auto& tape = ctx.tape();
  Var t = tape.constant(timestep_embedding<T>(timesteps, ctx.config().channels));
  Var h = linear_layer(ctx, "time.fc1", t);
  {
    typename Tape<T>::Scope scope(tape, "time");
    h = ag::silu(tape, h);
  }
  h = linear_layer(ctx, "time.fc2", h);
  typename Tape<T>::Scope scope(tape, "time");
  return ag::silu(tape, h);
}

template <typename T>
Var text_context(LayerContext<T>& ctx, const std::vector<std::size_t>& captions) {
  const auto& c = ctx.config();
  Var rows = ag::embedding(ctx.tape(), ctx.param(weight_name("text.embed")), captions);
  return ag::reshape(ctx.tape(), rows, Shape{captions.size(), c.text_tokens, c.context_dim});
}

template <typename T>
EncoderOutputs encoder_forward(LayerContext<T>& ctx, const std::string& prefix, Var x_in,
                               Var temb, Var text, std::optional<Var> identity,
                               std::optional<Var> features) {
  EncoderOutputs out;
  Var h = conv_layer(ctx, prefix + "conv_in", x_in);
  if (features) {
    typename Tape<T>::Scope scope(ctx.tape(), "adapter");
    h = ag::add(ctx.tape(), h, *features);
  }
  h = res_block(ctx, prefix + "enc1", h, temb);
  out.skip1 = h;
  h = conv_layer(ctx, prefix + "down", h);
  h = res_block(ctx, prefix + "enc2", h, temb);
  out.skip2 = h;
  h = res_block(ctx, prefix + "mid.res", h, temb);
  h = self_attention_block(ctx, prefix + "mid.attn", h);
  out.mid = cross_attention_block(ctx, prefix + "mid.xattn", h, text, identity);
  return out;
}

template <typename T>
Var unet_forward(LayerContext<T>& ctx, Var x_in, Var temb, Var text,
                 std::optional<Var> identity, const EncoderOutputs* residuals,
                 std::optional<Var> features) {
  auto& tape = ctx.tape();
  EncoderOutputs enc = encoder_forward(ctx, "", x_in, temb, text, identity, features);
  if (residuals) {
    typename Tape<T>::Scope scope(tape, "control.inject");
    enc.skip1 = ag::add(tape, enc.skip1, residuals->skip1);
    enc.skip2 = ag::add(tape, enc.skip2, residuals->skip2);
    enc.mid = ag::add(tape, enc.mid, residuals->mid);
  }
  Var h = ag::concat_channels(tape, enc.mid, enc.skip2);
  h = res_block(ctx, "dec2", h, temb);
  h = ag::upsample_nearest2x(tape, h);
  h = ag::concat_channels(tape, h, enc.skip1);
  h = res_block(ctx, "dec1", h, temb);
  h = group_norm_layer(ctx, "out.norm", h);
  {
    typename Tape<T>::Scope scope(tape, "out");
    h = ag::silu(tape, h);
  }
  return conv_layer(ctx, "out.conv", h);
}

namespace {

template <typename T>
void check_inputs(const Model<T>& model, const ModelInputs<T>& in) {
  const auto& c = model.config;
  const Shape expected{in.x.rank() ? in.x.dim(0) : 0, c.image_channels, c.image_size,
                       c.image_size};
  if (in.x.shape() != expected) {
    throw ShapeError("model input x has shape " + to_string(in.x.shape()) + ", expected " +
                     to_string(expected));
  }
  const std::size_t b = in.x.dim(0);
  if (in.timesteps.size() != b || in.captions.size() != b) {
    throw ShapeError("timesteps/captions must have one entry per batch item");
  }
  if (model.parts.identity && in.identities.size() != b) {
    throw ShapeError("identities must have one entry per batch item");
  }
  if (model.parts.adapter || model.parts.control) {
    if (!in.condition) throw ContractError("this model variant needs a condition image");
    const Shape cs{b, c.condition_channels, c.image_size, c.image_size};
    if (in.condition->shape() != cs) {
      throw ShapeError("condition has shape " + to_string(in.condition->shape()) +
                       ", expected " + to_string(cs));
    }
  }
}

}  // namespace

template <typename T>
Var model_forward(LayerContext<T>& ctx, const ModelInputs<T>& inputs) {
  const auto& model = ctx.model();
  check_inputs(model, inputs);
  if (model.parts.control) return controlnet_forward(ctx, inputs);
  auto& tape = ctx.tape();
  Var temb = time_embedding(ctx, inputs.timesteps);
  Var text = text_context(ctx, inputs.captions);
  std::optional<Var> identity;
  if (model.parts.identity) {
    const auto& c = model.config;
    identity = tape.constant(
        identity_tokens<T>(inputs.identities, c.identity_tokens, c.context_dim));
  }
  Var x = tape.constant(inputs.x);
  std::optional<Var> features;
  if (model.parts.adapter) {
    Var a = adapter_forward(ctx, tape.constant(*inputs.condition));
    if (model.config.adapter_site == AdapterSite::input) {
      typename Tape<T>::Scope scope(tape, "adapter");
      x = ag::add(tape, x, a);
    } else {
      features = a;
    }
  }
  return unet_forward(ctx, x, temb, text, identity, nullptr, features);
}

template <typename T>
Tensor<T> predict(const Model<T>& model, const ModelInputs<T>& inputs) {
  Tape<T> tape(false);
  LayerContext<T> ctx(tape, model);
  Var y = model_forward(ctx, inputs);
  return tape.value(y);
}

#define REPCN_INSTANTIATE(T)                                                              \
  template Tensor<T> timestep_embedding(const std::vector<std::size_t>&, std::size_t);    \
  template Tensor<T> identity_tokens(const std::vector<std::size_t>&, std::size_t,        \
                                     std::size_t);                                        \
  template Var time_embedding(LayerContext<T>&, const std::vector<std::size_t>&);         \
  template Var text_context(LayerContext<T>&, const std::vector<std::size_t>&);           \
  template EncoderOutputs encoder_forward(LayerContext<T>&, const std::string&, Var, Var, \
                                          Var, std::optional<Var>, std::optional<Var>);   \
  template Var unet_forward(LayerContext<T>&, Var, Var, Var, std::optional<Var>,          \
                            const EncoderOutputs*, std::optional<Var>);                   \
  template Var model_forward(LayerContext<T>&, const ModelInputs<T>&);                    \
  template Tensor<T> predict(const Model<T>&, const ModelInputs<T>&);

REPCN_INSTANTIATE(float)
REPCN_INSTANTIATE(double)
#undef REPCN_INSTANTIATE

}  // namespace repcn
