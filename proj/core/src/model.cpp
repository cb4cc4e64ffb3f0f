#include "repcn/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "repcn/error.hpp"

namespace repcn {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::linear: return "linear";
    case LayerKind::group_norm: return "group_norm";
    case LayerKind::embedding: return "embedding";
  }
  return "unknown";
}

const char* layer_role_name(LayerRole role) {
  switch (role) {
    case LayerRole::base: return "base";
    case LayerRole::adapter: return "adapter";
    case LayerRole::identity: return "identity";
    case LayerRole::control: return "control";
  }
  return "unknown";
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::base: return "base";
    case Variant::dual: return "dual";
    case Variant::fused: return "fused";
    case Variant::controlnet: return "controlnet";
    case Variant::custom: return "custom";
  }
  return "unknown";
}

Variant classify(const Components& parts) {
  if (parts == Components{}) return Variant::base;
  if (parts == Components{true, true, true, false}) return Variant::dual;
  if (parts == Components{false, true, true, false}) return Variant::fused;
  if (parts == Components{false, false, false, true}) return Variant::controlnet;
  return Variant::custom;
}

Shape LayerSpec::weight_shape() const {
  switch (kind) {
    case LayerKind::conv2d: return {out, in, kernel, kernel};
    case LayerKind::linear: return {out, in};
    case LayerKind::group_norm: return {out};
    case LayerKind::embedding: return {in, out};
  }
  return {};
}

Shape LayerSpec::bias_shape() const { return {out}; }

std::vector<std::string> LayerSpec::tensor_names() const {
  if (kind == LayerKind::embedding) return {weight_name(name)};
  return {weight_name(name), bias_name(name)};
}

std::string weight_name(const std::string& layer) { return layer + ".weight"; }
std::string bias_name(const std::string& layer) { return layer + ".bias"; }
std::string modal_weight_name(const std::string& layer) { return layer + ".modal.weight"; }
std::string modal_bias_name(const std::string& layer) { return layer + ".modal.bias"; }

const char* adapter_site_name(AdapterSite site) {
  return site == AdapterSite::input ? "input" : "features";
}

AdapterSite parse_adapter_site(const std::string& name) {
  if (name == "input") return AdapterSite::input;
  if (name == "features") return AdapterSite::features;
  throw ContractError("unknown adapter site '" + name + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("model config: " + what); };
  if (image_size < 8 || image_size % 2 != 0) fail("image_size must be even and >= 8");
  if (image_channels == 0 || condition_channels == 0) fail("channel counts must be positive");
  if (channels == 0 || mid_channels == 0 || time_embed_dim == 0 || context_dim == 0)
    fail("widths must be positive");
  if (groups == 0) fail("groups must be positive");
  for (std::size_t c : {channels, mid_channels, channels + mid_channels, 2 * mid_channels}) {
    if (c % groups != 0) fail("groups must divide every normalized width");
  }
  if (heads == 0 || mid_channels % heads != 0) fail("heads must divide mid_channels");
  if (text_tokens == 0 || identity_tokens == 0 || num_captions == 0 || adapter_channels == 0)
    fail("token counts and adapter width must be positive");
}

namespace {

LayerSpec conv(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
               std::size_t stride, std::size_t padding, LayerRole role) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::conv2d;
  s.role = role;
  s.in = in;
  s.out = out;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec linear(std::string name, std::size_t in, std::size_t out, LayerRole role) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::linear;
  s.role = role;
  s.in = in;
  s.out = out;
  return s;
}

LayerSpec norm(std::string name, std::size_t channels, std::size_t groups, LayerRole role) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::group_norm;
  s.role = role;
  s.in = channels;
  s.out = channels;
  s.groups = groups;
  return s;
}

void res_block(std::vector<LayerSpec>& out, const std::string& name, std::size_t in,
               std::size_t width, const ModelConfig& c, LayerRole role) {
  out.push_back(norm(name + ".norm1", in, c.groups, role));
  out.push_back(conv(name + ".conv1", in, width, 3, 1, 1, role));
  out.push_back(linear(name + ".temb", c.time_embed_dim, width, role));
  out.push_back(norm(name + ".norm2", width, c.groups, role));
  out.push_back(conv(name + ".conv2", width, width, 3, 1, 1, role));
  if (in != width) out.push_back(conv(name + ".skip", in, width, 1, 1, 0, role));
}

// conv_in through the mid block; shared by the base and the ControlNet copy.
void encoder_and_mid(std::vector<LayerSpec>& out, const std::string& prefix,
                     const ModelConfig& c, LayerRole role) {
  const std::size_t c1 = c.channels, c2 = c.mid_channels;
  out.push_back(conv(prefix + "conv_in", c.image_channels, c1, 3, 1, 1, role));
  res_block(out, prefix + "enc1", c1, c1, c, role);
  out.push_back(conv(prefix + "down", c1, c1, 3, 2, 1, role));
  res_block(out, prefix + "enc2", c1, c2, c, role);
  res_block(out, prefix + "mid.res", c2, c2, c, role);
  out.push_back(norm(prefix + "mid.attn.norm", c2, c.groups, role));
  for (const char* p : {"q", "k", "v", "out"}) {
    out.push_back(linear(prefix + "mid.attn." + p, c2, c2, role));
  }
  out.push_back(norm(prefix + "mid.xattn.norm", c2, c.groups, role));
  out.push_back(linear(prefix + "mid.xattn.q", c2, c2, role));
  out.push_back(linear(prefix + "mid.xattn.k", c.context_dim, c2, role));
  out.push_back(linear(prefix + "mid.xattn.v", c.context_dim, c2, role));
  out.push_back(linear(prefix + "mid.xattn.out", c2, c2, role));
}

}  // namespace

std::vector<LayerSpec> build_layer_specs(const ModelConfig& c, const Components& parts) {
  c.validate();
  const std::size_t c1 = c.channels, c2 = c.mid_channels;
  std::vector<LayerSpec> out;
  out.push_back(linear("time.fc1", c1, c.time_embed_dim, LayerRole::base));
  out.push_back(linear("time.fc2", c.time_embed_dim, c.time_embed_dim, LayerRole::base));
  {
    LayerSpec table;
    table.name = "text.embed";
    table.kind = LayerKind::embedding;
    table.in = c.num_captions;
    table.out = c.text_tokens * c.context_dim;
    out.push_back(table);
  }
  encoder_and_mid(out, "", c, LayerRole::base);
  res_block(out, "dec2", 2 * c2, c2, c, LayerRole::base);
  res_block(out, "dec1", c2 + c1, c1, c, LayerRole::base);
  out.push_back(norm("out.norm", c1, c.groups, LayerRole::base));
  out.push_back(conv("out.conv", c1, c.image_channels, 3, 1, 1, LayerRole::base));

  if (parts.adapter) {
    const std::size_t a = c.adapter_channels;
    out.push_back(conv("adapter.conv0", c.condition_channels, a, 3, 1, 1, LayerRole::adapter));
    out.push_back(conv("adapter.conv1", a, a, 3, 1, 1, LayerRole::adapter));
    const std::size_t width = c.adapter_site == AdapterSite::input ? c.image_channels : c.channels;
    out.push_back(conv("adapter.conv2", a, width, 3, 1, 1, LayerRole::adapter));
  }
  if (parts.identity) {
    out.push_back(linear("mid.xattn.id_k", c.context_dim, c2, LayerRole::identity));
    out.push_back(linear("mid.xattn.id_v", c.context_dim, c2, LayerRole::identity));
  }
  if (parts.control) {
    out.push_back(conv("control.zin", c.condition_channels, c.image_channels, 1, 1, 0,
                       LayerRole::control));
    encoder_and_mid(out, "control.", c, LayerRole::control);
    out.push_back(conv("control.zout1", c1, c1, 1, 1, 0, LayerRole::control));
    out.push_back(conv("control.zout2", c2, c2, 1, 1, 0, LayerRole::control));
    out.push_back(conv("control.zmid", c2, c2, 1, 1, 0, LayerRole::control));
  }
  return out;
}

std::vector<std::string> duplicable_layers(const std::vector<LayerSpec>& layers) {
  std::vector<std::string> names;
  for (const auto& l : layers) {
    if (l.role == LayerRole::base && l.is_affine_operator()) names.push_back(l.name);
  }
  return names;
}

template <typename T>
const Param<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
Param<T>& ParamStore<T>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
const LayerSpec& Model<T>::layer(const std::string& name) const {
  for (const auto& l : layers) {
    if (l.name == name) return l;
  }
  throw ContractError("no layer named '" + name + "'");
}

template <typename T>
bool Model<T>::has_layer(const std::string& name) const {
  return std::any_of(layers.begin(), layers.end(),
                     [&](const LayerSpec& l) { return l.name == name; });
}

namespace {

// FNV-1a, so per-layer seeds do not depend on the standard library's hash.
std::uint64_t stable_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

template <typename T>
void init_layer(const LayerSpec& spec, ParamStore<T>& store, std::uint64_t seed,
                bool trainable) {
  std::mt19937_64 rng(seed ^ stable_hash(spec.name));
  switch (spec.kind) {
    case LayerKind::conv2d:
    case LayerKind::linear: {
      const Shape ws = spec.weight_shape();
      const std::size_t fan_in = num_elements(ws) / ws[0];
      const T bound = T{1} / std::sqrt(static_cast<T>(fan_in));
      store.set(weight_name(spec.name), Tensor<T>::uniform(ws, rng, -bound, bound), trainable);
      store.set(bias_name(spec.name), Tensor<T>::uniform(spec.bias_shape(), rng, -bound, bound),
                trainable);
      break;
    }
    case LayerKind::group_norm:
      store.set(weight_name(spec.name), Tensor<T>::ones(spec.weight_shape()), trainable);
      store.set(bias_name(spec.name), Tensor<T>::zeros(spec.bias_shape()), trainable);
      break;
    case LayerKind::embedding:
      store.set(weight_name(spec.name), Tensor<T>::randn(spec.weight_shape(), rng), trainable);
      break;
  }
}

template <typename T>
Model<T> init_base(const ModelConfig& config, std::uint64_t seed) {
  Model<T> model;
  model.config = config;
  model.layers = build_layer_specs(config, model.parts);
  for (const auto& spec : model.layers) init_layer(spec, model.params, seed, true);
  return model;
}

template <typename T>
void validate_model(const Model<T>& model) {
  const auto expected = build_layer_specs(model.config, model.parts);
  if (expected.size() != model.layers.size()) {
    throw ContractError("layer registry does not match the configured components");
  }
  std::set<std::string> names;
  auto expect = [&](const std::string& name, const Shape& shape) {
    if (!model.params.contains(name)) throw ContractError("missing tensor '" + name + "'");
    const auto& v = model.params.at(name).value;
    if (v.shape() != shape) {
      throw ContractError("tensor '" + name + "' has shape " + to_string(v.shape()) +
                          ", expected " + to_string(shape));
    }
    names.insert(name);
  };
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& spec = model.layers[i];
    if (spec.name != expected[i].name || spec.kind != expected[i].kind ||
        spec.in != expected[i].in || spec.out != expected[i].out) {
      throw ContractError("layer '" + spec.name + "' does not match the registry");
    }
    const auto tensors = spec.tensor_names();
    expect(tensors[0], spec.weight_shape());
    if (tensors.size() > 1) expect(tensors[1], spec.bias_shape());
    if (model.parts.modal && spec.role == LayerRole::base && spec.is_affine_operator()) {
      expect(modal_weight_name(spec.name), spec.weight_shape());
      expect(modal_bias_name(spec.name), spec.bias_shape());
    }
  }
  for (const auto& [name, p] : model.params) {
    if (!names.count(name)) throw ContractError("unexpected tensor '" + name + "'");
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Model<float>;
template struct Model<double>;
template Model<float> init_base(const ModelConfig&, std::uint64_t);
template Model<double> init_base(const ModelConfig&, std::uint64_t);
template void init_layer(const LayerSpec&, ParamStore<float>&, std::uint64_t, bool);
template void init_layer(const LayerSpec&, ParamStore<double>&, std::uint64_t, bool);
template void validate_model(const Model<float>&);
template void validate_model(const Model<double>&);

}  // namespace repcn
