#include "repcn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <vector>

#include "json.hpp"

namespace repcn {

using nlohmann::json;

namespace {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    std::reverse(b, b + sizeof(U));
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

json config_json(const ModelConfig& c) {
  return json{{"image_size", c.image_size},
              {"image_channels", c.image_channels},
              {"condition_channels", c.condition_channels},
              {"channels", c.channels},
              {"mid_channels", c.mid_channels},
              {"time_embed_dim", c.time_embed_dim},
              {"groups", c.groups},
              {"heads", c.heads},
              {"context_dim", c.context_dim},
              {"text_tokens", c.text_tokens},
              {"identity_tokens", c.identity_tokens},
              {"num_captions", c.num_captions},
              {"adapter_channels", c.adapter_channels},
              {"adapter_site", adapter_site_name(c.adapter_site)}};
}

json run_json(const RunConfig& r) {
  return json{{"seed", r.seed},       {"steps", r.steps},
              {"lr", r.lr},           {"w", r.w},
              {"alpha", r.alpha},     {"beta", r.beta},
              {"dataset_size", r.dataset_size}, {"image_size", r.image_size},
              {"timesteps", r.timesteps},       {"batch", r.batch}};
}

// Reads `obj[key]` and reports the dotted field path on failure.
template <typename V>
V field(const json& obj, const std::string& key, const std::string& path) {
  const std::string where = path.empty() ? key : path + "." + key;
  if (!obj.is_object() || !obj.contains(key)) {
    throw FormatError("checkpoint header: missing field '" + where + "'");
  }
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception&) {
    throw FormatError("checkpoint header: field '" + where + "' has the wrong type");
  }
}

ModelConfig parse_config(const json& j) {
  const std::string p = "model_config";
  ModelConfig c;
  c.image_size = field<std::size_t>(j, "image_size", p);
  c.image_channels = field<std::size_t>(j, "image_channels", p);
  c.condition_channels = field<std::size_t>(j, "condition_channels", p);
  c.channels = field<std::size_t>(j, "channels", p);
  c.mid_channels = field<std::size_t>(j, "mid_channels", p);
  c.time_embed_dim = field<std::size_t>(j, "time_embed_dim", p);
  c.groups = field<std::size_t>(j, "groups", p);
  c.heads = field<std::size_t>(j, "heads", p);
  c.context_dim = field<std::size_t>(j, "context_dim", p);
  c.text_tokens = field<std::size_t>(j, "text_tokens", p);
  c.identity_tokens = field<std::size_t>(j, "identity_tokens", p);
  c.num_captions = field<std::size_t>(j, "num_captions", p);
  c.adapter_channels = field<std::size_t>(j, "adapter_channels", p);
  const auto site = field<std::string>(j, "adapter_site", p);
  try {
    c.adapter_site = parse_adapter_site(site);
    c.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint header: model_config: ") + e.what());
  }
  return c;
}

RunConfig parse_run(const json& j) {
  const std::string p = "run_config";
  RunConfig r;
  r.seed = field<std::uint64_t>(j, "seed", p);
  r.steps = field<std::uint64_t>(j, "steps", p);
  r.lr = field<double>(j, "lr", p);
  r.w = field<double>(j, "w", p);
  r.alpha = field<double>(j, "alpha", p);
  r.beta = field<double>(j, "beta", p);
  r.dataset_size = field<std::uint64_t>(j, "dataset_size", p);
  r.image_size = field<std::uint64_t>(j, "image_size", p);
  r.timesteps = field<std::uint64_t>(j, "timesteps", p);
  r.batch = field<std::uint64_t>(j, "batch", p);
  return r;
}

}  // namespace

template <typename T>
void save_checkpoint(std::ostream& out, const Model<T>& model, const RunConfig& run) {
  validate_model(model);
  const DType dt = dtype_of<T>();
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, p] : model.params) {
    const std::uint64_t nbytes = p.value.size() * sizeof(T);
    tensors.push_back(json{{"name", name},
                           {"dtype", dtype_name(dt)},
                           {"shape", p.value.shape()},
                           {"offset", offset},
                           {"nbytes", nbytes},
                           {"trainable", p.trainable}});
    offset += nbytes;
  }
  const json header{{"format_version", kCheckpointVersion},
                    {"variant", variant_name(model.variant())},
                    {"components",
                     {{"modal", model.parts.modal},
                      {"adapter", model.parts.adapter},
                      {"identity", model.parts.identity},
                      {"control", model.parts.control}}},
                    {"model_config", config_json(model.config)},
                    {"run_config", run_json(run)},
                    {"pretrain_steps", model.pretrain_steps},
                    {"payload_bytes", offset},
                    {"tensors", tensors}};
  const std::string text = header.dump(1);
  const std::uint64_t len = to_little<std::uint64_t>(text.size());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<T> buf;
  for (const auto& [name, p] : model.params) {
    const auto data = p.value.data();
    buf.assign(data.begin(), data.end());
    for (T& v : buf) v = to_little(v);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(T)));
  }
  if (!out) throw FormatError("failed to write checkpoint");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model,
                     const RunConfig& run) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  save_checkpoint(out, model, run);
}

template <typename T>
Checkpoint<T> load_checkpoint(std::istream& in) {
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw FormatError("not a repcn checkpoint (bad magic)");
  }
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) {
    throw FormatError("checkpoint truncated in header length");
  }
  len = to_little(len);
  if (len > (1ull << 30)) throw FormatError("checkpoint header length is implausible");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw FormatError("checkpoint truncated in header");
  }
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const auto version = field<std::uint32_t>(header, "format_version", "");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint field 'format_version' is " + std::to_string(version) +
                      ", expected " + std::to_string(kCheckpointVersion));
  }
  Checkpoint<T> ck;
  Model<T>& model = ck.model;
  model.config = parse_config(field<json>(header, "model_config", ""));
  ck.run = parse_run(field<json>(header, "run_config", ""));
  const json comps = field<json>(header, "components", "");
  model.parts.modal = field<bool>(comps, "modal", "components");
  model.parts.adapter = field<bool>(comps, "adapter", "components");
  model.parts.identity = field<bool>(comps, "identity", "components");
  model.parts.control = field<bool>(comps, "control", "components");
  const auto variant = field<std::string>(header, "variant", "");
  if (variant != variant_name(model.variant())) {
    throw FormatError("checkpoint field 'variant' is '" + variant + "' but components describe '" +
                      variant_name(model.variant()) + "'");
  }
  model.pretrain_steps = field<std::uint64_t>(header, "pretrain_steps", "");
  model.layers = build_layer_specs(model.config, model.parts);

  const auto payload_bytes = field<std::uint64_t>(header, "payload_bytes", "");
  std::vector<char> payload;
  payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  if (payload.size() != payload_bytes) {
    throw FormatError("checkpoint field 'payload_bytes' says " + std::to_string(payload_bytes) +
                      " but the file carries " + std::to_string(payload.size()));
  }

  const json tensors = field<json>(header, "tensors", "");
  if (!tensors.is_array()) throw FormatError("checkpoint field 'tensors' must be an array");
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const json& t = tensors[i];
    const std::string path = "tensors[" + std::to_string(i) + "]";
    const auto name = field<std::string>(t, "name", path);
    const std::string where = path + " ('" + name + "')";
    const auto dtype = field<std::string>(t, "dtype", path);
    if (dtype != dtype_name(dtype_of<T>())) {
      throw FormatError("checkpoint field '" + where + ".dtype' is '" + dtype + "', expected " +
                        dtype_name(dtype_of<T>()));
    }
    const auto shape = field<Shape>(t, "shape", path);
    const auto offset = field<std::uint64_t>(t, "offset", path);
    const auto nbytes = field<std::uint64_t>(t, "nbytes", path);
    const bool trainable = field<bool>(t, "trainable", path);
    if (shape.empty() || std::find(shape.begin(), shape.end(), 0) != shape.end() ||
        num_elements(shape) * sizeof(T) != nbytes) {
      throw FormatError("checkpoint field '" + where + ".shape' does not match its nbytes");
    }
    if (offset > payload.size() || nbytes > payload.size() - offset) {
      throw FormatError("checkpoint field '" + where + ".offset' points outside the payload");
    }
    if (model.params.contains(name)) {
      throw FormatError("checkpoint tensor '" + name + "' appears more than once");
    }
    spans.emplace_back(offset, offset + nbytes);
    std::vector<T> data(num_elements(shape));
    std::memcpy(data.data(), payload.data() + offset, nbytes);
    for (T& v : data) v = to_little(v);
    model.params.set(name, Tensor<T>(shape, std::move(data)), trainable);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) {
      throw FormatError("checkpoint tensor offsets overlap");
    }
  }
  try {
    validate_model(model);
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint tensors: ") + e.what());
  }
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  return load_checkpoint<T>(in);
}

#define REPCN_INSTANTIATE(T)                                                                 \
  template void save_checkpoint(std::ostream&, const Model<T>&, const RunConfig&);          \
  template void save_checkpoint(const std::filesystem::path&, const Model<T>&,              \
                                const RunConfig&);                                           \
  template Checkpoint<T> load_checkpoint(std::istream&);                                     \
  template Checkpoint<T> load_checkpoint(const std::filesystem::path&);

REPCN_INSTANTIATE(float)
REPCN_INSTANTIATE(double)
#undef REPCN_INSTANTIATE

}  // namespace repcn
