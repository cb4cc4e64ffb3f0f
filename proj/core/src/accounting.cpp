#include "repcn/accounting.hpp"

#include <map>

namespace repcn {

std::uint64_t CostReport::total_params() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.params;
  return n;
}

std::uint64_t CostReport::total_flops() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.flops;
  return n;
}

std::uint64_t CostReport::total_macs() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.macs;
  return n;
}

namespace {

std::uint64_t layer_params(const LayerSpec& spec, bool with_modal) {
  std::uint64_t n = num_elements(spec.weight_shape());
  if (spec.tensor_names().size() > 1) n += num_elements(spec.bias_shape());
  if (with_modal && spec.role == LayerRole::base && spec.is_affine_operator()) n *= 2;
  return n;
}

const char* cost_kind_of(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return cost_kind_name(CostKind::conv2d);
    case LayerKind::linear: return cost_kind_name(CostKind::linear);
    case LayerKind::group_norm: return cost_kind_name(CostKind::norm);
    case LayerKind::embedding: return layer_kind_name(LayerKind::embedding);
  }
  return "?";
}

}  // namespace

template <typename T>
std::uint64_t count_params(const Model<T>& model) {
  return model.params.total_scalars();
}

template <typename T>
std::uint64_t count_params(const Model<T>& model, LayerRole role) {
  std::uint64_t n = 0;
  for (const auto& spec : model.layers) {
    if (spec.role == role) n += layer_params(spec, model.parts.modal);
  }
  return n;
}

template <typename T>
CostReport count_flops(const Model<T>& model, const Shape& input_shape) {
  const auto& c = model.config;
  const Shape expected{input_shape.empty() ? 0 : input_shape[0], c.image_channels, c.image_size,
                       c.image_size};
  if (input_shape.size() != 4 || input_shape != expected || input_shape[0] == 0) {
    throw ShapeError("input shape " + to_string(input_shape) + " does not fit the model, expected " +
                     to_string(expected) + " with B >= 1");
  }
  const std::size_t b = input_shape[0];
  ModelInputs<T> in;
  in.x = Tensor<T>(input_shape);
  in.timesteps.assign(b, 1);
  in.captions.assign(b, 0);
  in.identities.assign(b, 0);
  in.condition = Tensor<T>({b, c.condition_channels, c.image_size, c.image_size});

  Tape<T> tape(false);
  tape.track_costs(true);
  LayerContext<T> ctx(tape, model);
  model_forward(ctx, in);

  CostReport report;
  report.variant = variant_name(model.variant());
  report.input_shape = input_shape;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  auto row = [&](const std::string& name, const std::string& kind) -> CostRow& {
    auto [it, inserted] = index.try_emplace({name, kind}, report.rows.size());
    if (inserted) report.rows.push_back(CostRow{name, kind, 0, 0, 0});
    return report.rows[it->second];
  };
  for (const auto& e : tape.costs()) {
    CostRow& r = row(e.scope, cost_kind_name(e.kind));
    r.macs += e.macs;
    r.flops += e.flops;
  }
  for (const auto& spec : model.layers) {
    row(spec.name, cost_kind_of(spec.kind)).params += layer_params(spec, model.parts.modal);
  }
  return report;
}

void write_csv(std::ostream& out, const CostReport& report) {
  out << "# " << kCostConvention << "; input " << to_string(report.input_shape) << "\n";
  out << "variant,name,kind,params,flops,macs\n";
  for (const auto& r : report.rows) {
    out << report.variant << ',' << r.name << ',' << r.kind << ',' << r.params << ',' << r.flops
        << ',' << r.macs << '\n';
  }
  out << report.variant << ",total,total," << report.total_params() << ','
      << report.total_flops() << ',' << report.total_macs() << '\n';
}

template std::uint64_t count_params(const Model<float>&);
template std::uint64_t count_params(const Model<double>&);
template std::uint64_t count_params(const Model<float>&, LayerRole);
template std::uint64_t count_params(const Model<double>&, LayerRole);
template CostReport count_flops(const Model<float>&, const Shape&);
template CostReport count_flops(const Model<double>&, const Shape&);

}  // namespace repcn
