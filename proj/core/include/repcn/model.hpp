#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "repcn/tensor.hpp"

namespace repcn {

enum class LayerKind { conv2d, linear, group_norm, embedding };

// Which part of the model a layer belongs to. Only `base` conv/linear layers
// get modal copies; adapter, identity and control layers are new weights.
enum class LayerRole { base, adapter, identity, control };

const char* layer_kind_name(LayerKind kind);
const char* layer_role_name(LayerRole role);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::linear;
  LayerRole role = LayerRole::base;
  std::size_t in = 0;   // input channels / features, embedding rows
  std::size_t out = 0;  // output channels / features, embedding width
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 0;  // group_norm only

  bool is_affine_operator() const {
    return kind == LayerKind::conv2d || kind == LayerKind::linear;
  }
  Shape weight_shape() const;
  Shape bias_shape() const;
  // Tensor names owned by this layer (modal copies excluded).
  std::vector<std::string> tensor_names() const;
};

std::string weight_name(const std::string& layer);
std::string bias_name(const std::string& layer);
std::string modal_weight_name(const std::string& layer);
std::string modal_bias_name(const std::string& layer);

// Where the adapter output joins the U-Net: added to the noisy image, or to
// the conv_in features.
enum class AdapterSite { input, features };

const char* adapter_site_name(AdapterSite site);
AdapterSite parse_adapter_site(const std::string& name);

// Toy U-Net hyperparameters. Widths must be divisible by `groups` and the
// attention widths by `heads`.
struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t image_channels = 1;
  std::size_t condition_channels = 1;
  std::size_t channels = 16;
  std::size_t mid_channels = 32;
  std::size_t time_embed_dim = 32;
  std::size_t groups = 8;
  std::size_t heads = 2;
  std::size_t context_dim = 32;
  std::size_t text_tokens = 2;
  std::size_t identity_tokens = 4;
  std::size_t num_captions = 3;
  std::size_t adapter_channels = 4;
  AdapterSite adapter_site = AdapterSite::features;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Optional parts attached to the base U-Net.
struct Components {
  bool modal = false;     // trainable copy of every base conv/linear layer
  bool adapter = false;   // condition adapter, see AdapterSite
  bool identity = false;  // identity-token key/value projections
  bool control = false;   // ControlNet encoder copy with zero convolutions

  friend bool operator==(const Components&, const Components&) = default;
};

enum class Variant { base, dual, fused, controlnet, custom };

const char* variant_name(Variant v);
Variant classify(const Components& parts);

template <typename T>
struct Param {
  Tensor<T> value;
  bool trainable = false;
};

// Named parameter tensors in deterministic (lexicographic) order.
template <typename T>
class ParamStore {
 public:
  using Map = std::map<std::string, Param<T>>;

  void set(const std::string& name, Tensor<T> value, bool trainable) {
    params_[name] = Param<T>{std::move(value), trainable};
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Param<T>& at(const std::string& name) const;
  Param<T>& at(const std::string& name);
  void erase(const std::string& name) { params_.erase(name); }

  std::size_t size() const { return params_.size(); }
  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.value.size();
    return n;
  }

  typename Map::const_iterator begin() const { return params_.begin(); }
  typename Map::const_iterator end() const { return params_.end(); }
  typename Map::iterator begin() { return params_.begin(); }
  typename Map::iterator end() { return params_.end(); }

 private:
  Map params_;
};

// The model graph: a layer registry plus the tensors backing it.
template <typename T>
struct Model {
  ModelConfig config;
  Components parts;
  std::vector<LayerSpec> layers;
  ParamStore<T> params;
  std::uint64_t pretrain_steps = 0;  // 0 means the base was never trained

  const LayerSpec& layer(const std::string& name) const;
  bool has_layer(const std::string& name) const;
  Variant variant() const { return classify(parts); }

  // Sets every parameter's trainable flag according to `trainable`.
  template <typename Pred>
  void set_trainable(Pred&& trainable) {
    for (auto& [name, p] : params) p.trainable = trainable(name);
  }
};

// Layer registry of the toy U-Net with the requested components attached.
std::vector<LayerSpec> build_layer_specs(const ModelConfig& config, const Components& parts);

// Names of the layers whose modal copies exist in a dual model.
std::vector<std::string> duplicable_layers(const std::vector<LayerSpec>& layers);

// Freshly initialized single-branch base model, every tensor trainable.
template <typename T>
Model<T> init_base(const ModelConfig& config, std::uint64_t seed);

// Initializes the tensors of `spec` into `store`: uniform(+-1/sqrt(fan_in))
// for conv/linear, unit scale for norms, N(0,1) for embeddings.
template <typename T>
void init_layer(const LayerSpec& spec, ParamStore<T>& store, std::uint64_t seed,
                bool trainable);

// Throws ContractError naming the first missing, extra or misshapen tensor.
template <typename T>
void validate_model(const Model<T>& model);

// Same model with every tensor converted to scalar type U.
template <typename U, typename T>
Model<U> cast_model(const Model<T>& model) {
  Model<U> out;
  out.config = model.config;
  out.parts = model.parts;
  out.layers = model.layers;
  out.pretrain_steps = model.pretrain_steps;
  for (const auto& [name, p] : model.params) {
    out.params.set(name, p.value.template cast<U>(), p.trainable);
  }
  return out;
}

}  // namespace repcn
