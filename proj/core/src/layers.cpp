#include "repcn/layers.hpp"

#include <cmath>

namespace repcn {

template <typename T>
LinearParams<T> init_modal_copy(const LinearParams<T>& original, T w, bool scale_bias) {
  LinearParams<T> modal;
  modal.weight = mul_scalar(original.weight, w);
  modal.bias = scale_bias ? mul_scalar(original.bias, w) : Tensor<T>(original.bias.shape());
  modal.trainable = true;
  return modal;
}

template <typename T>
Conv2dParams<T> init_modal_copy(const Conv2dParams<T>& original, T w, bool scale_bias) {
  Conv2dParams<T> modal;
  modal.kernel = mul_scalar(original.kernel, w);
  modal.bias = scale_bias ? mul_scalar(original.bias, w) : Tensor<T>(original.bias.shape());
  modal.stride = original.stride;
  modal.padding = original.padding;
  modal.trainable = true;
  return modal;
}

template <typename T>
LinearParams<T> linear_params(const Model<T>& model, const std::string& layer, bool modal) {
  const auto& spec = model.layer(layer);
  if (spec.kind != LayerKind::linear) throw ContractError("'" + layer + "' is not a linear layer");
  const auto& w = model.params.at(modal ? modal_weight_name(layer) : weight_name(layer));
  const auto& b = model.params.at(modal ? modal_bias_name(layer) : bias_name(layer));
  return LinearParams<T>{w.value, b.value, w.trainable};
}

template <typename T>
Conv2dParams<T> conv_params(const Model<T>& model, const std::string& layer, bool modal) {
  const auto& spec = model.layer(layer);
  if (spec.kind != LayerKind::conv2d) throw ContractError("'" + layer + "' is not a conv layer");
  const auto& w = model.params.at(modal ? modal_weight_name(layer) : weight_name(layer));
  const auto& b = model.params.at(modal ? modal_bias_name(layer) : bias_name(layer));
  return Conv2dParams<T>{w.value, b.value, spec.stride, spec.padding, w.trainable};
}

template <typename T>
Var LayerContext<T>::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const auto& p = model_.params.at(name);
  Var v = tape_.leaf(name, p.value, p.trainable);
  bound_.emplace(name, v);
  return v;
}

namespace {

template <typename T>
bool has_modal(const LayerContext<T>& ctx, const std::string& name) {
  return ctx.has_param(modal_weight_name(name));
}

template <typename T>
Var apply_affine(LayerContext<T>& ctx, const LayerSpec& spec, Var x, const std::string& weight,
                 const std::string& bias) {
  auto& tape = ctx.tape();
  if (spec.kind == LayerKind::conv2d) {
    return ag::conv2d(tape, x, ctx.param(weight), ctx.param(bias),
                      ConvGeometry{spec.stride, spec.padding});
  }
  return ag::linear(tape, x, ctx.param(weight), ctx.param(bias));
}

template <typename T>
Var affine_layer(LayerContext<T>& ctx, const std::string& name, Var x, LayerKind kind) {
  const auto& spec = ctx.model().layer(name);
  if (spec.kind != kind) {
    throw ContractError("layer '" + name + "' is a " + layer_kind_name(spec.kind) + ", not a " +
                        layer_kind_name(kind));
  }
  typename Tape<T>::Scope scope(ctx.tape(), name);
  Var y = apply_affine(ctx, spec, x, weight_name(name), bias_name(name));
  if (!has_modal(ctx, name)) return y;
  Var y_modal = apply_affine(ctx, spec, x, modal_weight_name(name), modal_bias_name(name));
  return ag::add(ctx.tape(), y, y_modal);
}

}  // namespace

template <typename T>
Var linear_layer(LayerContext<T>& ctx, const std::string& name, Var x) {
  return affine_layer(ctx, name, x, LayerKind::linear);
}

template <typename T>
Var conv_layer(LayerContext<T>& ctx, const std::string& name, Var x) {
  return affine_layer(ctx, name, x, LayerKind::conv2d);
}

template <typename T>
Var token_linear(LayerContext<T>& ctx, const std::string& name, Var x) {
  auto& tape = ctx.tape();
  const Shape s = tape.value(x).shape();
  if (s.size() != 3) throw ShapeError("token_linear expects [B,N,C], got " + to_string(s));
  Var flat = ag::reshape(tape, x, Shape{s[0] * s[1], s[2]});
  Var y = linear_layer(ctx, name, flat);
  return ag::reshape(tape, y, Shape{s[0], s[1], tape.value(y).dim(1)});
}

template <typename T>
Var dual_branch_forward(LayerContext<T>& ctx, const std::string& name, Var x) {
  if (!has_modal(ctx, name)) {
    throw ContractError("layer '" + name + "' has no modal branch");
  }
  const auto& spec = ctx.model().layer(name);
  return affine_layer(ctx, name, x, spec.kind);
}

template <typename T>
Var group_norm_layer(LayerContext<T>& ctx, const std::string& name, Var x) {
  const auto& spec = ctx.model().layer(name);
  if (spec.kind != LayerKind::group_norm) throw ContractError("'" + name + "' is not a norm layer");
  auto& tape = ctx.tape();
  typename Tape<T>::Scope scope(tape, name);
  Var h = ag::group_norm(tape, x, spec.groups, static_cast<T>(kNormEps));
  return ag::channel_affine(tape, h, ctx.param(weight_name(name)), ctx.param(bias_name(name)));
}

template <typename T>
Var zero_conv_forward(LayerContext<T>& ctx, const std::string& name, Var x) {
  const auto& spec = ctx.model().layer(name);
  if (spec.kind != LayerKind::conv2d || spec.kernel != 1) {
    throw ContractError("zero convolution '" + name + "' must be a 1x1 conv");
  }
  return conv_layer(ctx, name, x);
}

template <typename T>
Var adapter_forward(LayerContext<T>& ctx, Var condition) {
  auto& tape = ctx.tape();
  const Shape c = tape.value(condition).shape();
  const auto& cfg = ctx.config();
  if (c.size() != 4 || c[1] != cfg.condition_channels || c[2] != cfg.image_size ||
      c[3] != cfg.image_size) {
    throw ShapeError("adapter: condition shape " + to_string(c) + " does not match [B," +
                     std::to_string(cfg.condition_channels) + "," +
                     std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) + "]");
  }
  Var h = conv_layer(ctx, "adapter.conv0", condition);
  {
    typename Tape<T>::Scope scope(tape, "adapter");
    h = ag::silu(tape, h);
  }
  h = conv_layer(ctx, "adapter.conv1", h);
  {
    typename Tape<T>::Scope scope(tape, "adapter");
    h = ag::silu(tape, h);
  }
  return conv_layer(ctx, "adapter.conv2", h);
}

template <typename T>
Var attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t heads) {
  const std::size_t width = tape.value(q).dim(2);
  if (tape.value(k).dim(2) != width || tape.value(v).dim(2) != width) {
    throw ShapeError("attention: query width " + std::to_string(width) +
                     " differs from key/value width");
  }
  const T scale = T{1} / std::sqrt(static_cast<T>(width / heads));
  Var qh = ag::split_heads(tape, q, heads);
  Var kh = ag::split_heads(tape, k, heads);
  Var vh = ag::split_heads(tape, v, heads);
  Var scores = ag::mul_scalar(tape, ag::bmm(tape, qh, kh, true), scale);
  Var probs = ag::softmax(tape, scores);
  return ag::merge_heads(tape, ag::bmm(tape, probs, vh, false), heads);
}

template <typename T>
Var cross_attention_identity(LayerContext<T>& ctx, const std::string& name, Var q_input,
                             Var text, std::optional<Var> identity) {
  auto& tape = ctx.tape();
  const std::size_t context_in = ctx.model().layer(name + ".k").in;
  auto check_context = [&](Var v, const char* what) {
    const auto& s = tape.value(v).shape();
    if (s.size() != 3 || s[2] != context_in) {
      throw ShapeError(std::string(what) + " context " + to_string(s) +
                       " does not match key/value input width " + std::to_string(context_in));
    }
  };
  check_context(text, "text");
  const std::size_t heads = ctx.config().heads;
  Var q = token_linear(ctx, name + ".q", q_input);
  Var k = token_linear(ctx, name + ".k", text);
  Var v = token_linear(ctx, name + ".v", text);
  Var out;
  {
    typename Tape<T>::Scope scope(tape, name);
    out = attention(tape, q, k, v, heads);
  }
  if (!identity) return out;
  check_context(*identity, "identity");
  if (!ctx.model().has_layer(name + ".id_k")) {
    throw ContractError("'" + name + "' has no identity projections");
  }
  Var k_id = token_linear(ctx, name + ".id_k", *identity);
  Var v_id = token_linear(ctx, name + ".id_v", *identity);
  typename Tape<T>::Scope scope(tape, name + ".identity");
  Var out_id = attention(tape, q, k_id, v_id, heads);
  return ag::add(tape, out, out_id);
}

template <typename T>
Var self_attention_block(LayerContext<T>& ctx, const std::string& name, Var x) {
  auto& tape = ctx.tape();
  const Shape s = tape.value(x).shape();
  Var h = ag::to_tokens(tape, group_norm_layer(ctx, name + ".norm", x));
  Var q = token_linear(ctx, name + ".q", h);
  Var k = token_linear(ctx, name + ".k", h);
  Var v = token_linear(ctx, name + ".v", h);
  Var a;
  {
    typename Tape<T>::Scope scope(tape, name);
    a = attention(tape, q, k, v, ctx.config().heads);
  }
  Var o = ag::from_tokens(tape, token_linear(ctx, name + ".out", a), s[2], s[3]);
  typename Tape<T>::Scope scope(tape, name);
  return ag::add(tape, x, o);
}

template <typename T>
Var cross_attention_block(LayerContext<T>& ctx, const std::string& name, Var x, Var text,
                          std::optional<Var> identity) {
  auto& tape = ctx.tape();
  const Shape s = tape.value(x).shape();
  Var h = ag::to_tokens(tape, group_norm_layer(ctx, name + ".norm", x));
  Var a = cross_attention_identity(ctx, name, h, text, identity);
  Var o = ag::from_tokens(tape, token_linear(ctx, name + ".out", a), s[2], s[3]);
  typename Tape<T>::Scope scope(tape, name);
  return ag::add(tape, x, o);
}

template <typename T>
Var res_block(LayerContext<T>& ctx, const std::string& name, Var x, Var temb) {
  auto& tape = ctx.tape();
  Var h = group_norm_layer(ctx, name + ".norm1", x);
  {
    typename Tape<T>::Scope scope(tape, name);
    h = ag::silu(tape, h);
  }
  h = conv_layer(ctx, name + ".conv1", h);
  Var t = linear_layer(ctx, name + ".temb", temb);
  {
    typename Tape<T>::Scope scope(tape, name);
    h = ag::add_channel(tape, h, t);
  }
  h = group_norm_layer(ctx, name + ".norm2", h);
  {
    typename Tape<T>::Scope scope(tape, name);
    h = ag::silu(tape, h);
  }
  h = conv_layer(ctx, name + ".conv2", h);
  Var skip = ctx.model().has_layer(name + ".skip") ? conv_layer(ctx, name + ".skip", x) : x;
  typename Tape<T>::Scope scope(tape, name);
  return ag::add(tape, h, skip);
}

#define REPCN_INSTANTIATE(T)                                                                 \
  template LinearParams<T> init_modal_copy(const LinearParams<T>&, T, bool);                 \
  template Conv2dParams<T> init_modal_copy(const Conv2dParams<T>&, T, bool);                 \
  template LinearParams<T> linear_params(const Model<T>&, const std::string&, bool);         \
  template Conv2dParams<T> conv_params(const Model<T>&, const std::string&, bool);           \
  template class LayerContext<T>;                                                            \
  template Var linear_layer(LayerContext<T>&, const std::string&, Var);                      \
  template Var conv_layer(LayerContext<T>&, const std::string&, Var);                        \
  template Var token_linear(LayerContext<T>&, const std::string&, Var);                      \
  template Var dual_branch_forward(LayerContext<T>&, const std::string&, Var);               \
  template Var group_norm_layer(LayerContext<T>&, const std::string&, Var);                  \
  template Var zero_conv_forward(LayerContext<T>&, const std::string&, Var);                 \
  template Var adapter_forward(LayerContext<T>&, Var);                                       \
  template Var attention(Tape<T>&, Var, Var, Var, std::size_t);                              \
  template Var cross_attention_identity(LayerContext<T>&, const std::string&, Var, Var,      \
                                        std::optional<Var>);                                 \
  template Var self_attention_block(LayerContext<T>&, const std::string&, Var);              \
  template Var cross_attention_block(LayerContext<T>&, const std::string&, Var, Var,         \
                                     std::optional<Var>);                                    \
  template Var res_block(LayerContext<T>&, const std::string&, Var, Var);

REPCN_INSTANTIATE(float)
REPCN_INSTANTIATE(double)
#undef REPCN_INSTANTIATE

}  // namespace repcn
