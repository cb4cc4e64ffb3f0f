#pragma once

#include <map>
#include <optional>
#include <string>

#include "repcn/autograd.hpp"
#include "repcn/model.hpp"

namespace repcn {

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
  bool trainable = false;
};

template <typename T>
struct Conv2dParams {
  Tensor<T> kernel;  // [Cout, Cin, Kh, Kw]
  Tensor<T> bias;    // [Cout]
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool trainable = false;
};

// Frozen original weights next to their trainable modal copy.
template <typename P>
struct DualBranchLayer {
  P original;
  P modal;
};

// Modal copy initialized as w * original. Biases are scaled too unless
// `scale_bias` is false, in which case they start at zero.
template <typename T>
LinearParams<T> init_modal_copy(const LinearParams<T>& original, T w, bool scale_bias = true);
template <typename T>
Conv2dParams<T> init_modal_copy(const Conv2dParams<T>& original, T w, bool scale_bias = true);

// Views of a registered layer's tensors.
template <typename T>
LinearParams<T> linear_params(const Model<T>& model, const std::string& layer, bool modal = false);
template <typename T>
Conv2dParams<T> conv_params(const Model<T>& model, const std::string& layer, bool modal = false);

// Binds model parameters to tape leaves on first use.
template <typename T>
class LayerContext {
 public:
  LayerContext(Tape<T>& tape, const Model<T>& model) : tape_(tape), model_(model) {}

  Tape<T>& tape() { return tape_; }
  const Model<T>& model() const { return model_; }
  const ModelConfig& config() const { return model_.config; }

  Var param(const std::string& name);
  bool has_param(const std::string& name) const { return model_.params.contains(name); }

 private:
  Tape<T>& tape_;
  const Model<T>& model_;
  std::map<std::string, Var> bound_;
};

// Registered linear layer on x[N,in]. When the model carries a modal copy of
// the layer the result is F(x; original) + F(x; modal).
template <typename T>
Var linear_layer(LayerContext<T>& ctx, const std::string& name, Var x);
// Same for a registered conv layer on x[B,Cin,H,W].
template <typename T>
Var conv_layer(LayerContext<T>& ctx, const std::string& name, Var x);
// Linear layer applied to the last axis of x[B,N,in].
template <typename T>
Var token_linear(LayerContext<T>& ctx, const std::string& name, Var x);

// Explicit two-branch forward; the layer must have a modal copy.
template <typename T>
Var dual_branch_forward(LayerContext<T>& ctx, const std::string& name, Var x);

template <typename T>
Var group_norm_layer(LayerContext<T>& ctx, const std::string& name, Var x);

// 1x1 convolution used by the ControlNet branch; rejects other kernel sizes.
template <typename T>
Var zero_conv_forward(LayerContext<T>& ctx, const std::string& name, Var x);

// Condition image [B,Cc,H,W] -> [B,Cimg,H,W], added to the U-Net input.
template <typename T>
Var adapter_forward(LayerContext<T>& ctx, Var condition);

// softmax(q k^T / sqrt(d)) v per head; q[B,N,C], k/v[B,M,C].
template <typename T>
Var attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t heads);

// Sum of text and identity cross-attention sharing one query projection:
//   CrossAttn(Q, F_text) + CrossAttn(Q, F_id)
// q_input[B,N,C]; text[B,Tt,d]; identity[B,Tid,d]. Returns [B,N,C] before
// the output projection. Without identity tokens only the text term is used.
template <typename T>
Var cross_attention_identity(LayerContext<T>& ctx, const std::string& name, Var q_input,
                             Var text, std::optional<Var> identity);

// Residual self-attention over the spatial tokens of x[B,C,H,W].
template <typename T>
Var self_attention_block(LayerContext<T>& ctx, const std::string& name, Var x);
// Residual cross-attention block; identity tokens are used when given.
template <typename T>
Var cross_attention_block(LayerContext<T>& ctx, const std::string& name, Var x, Var text,
                          std::optional<Var> identity);

// GroupNorm-SiLU-conv residual block with additive timestep conditioning.
// `temb` is the activated time embedding [B,E].
template <typename T>
Var res_block(LayerContext<T>& ctx, const std::string& name, Var x, Var temb);

inline constexpr double kNormEps = 1e-5;

}  // namespace repcn
