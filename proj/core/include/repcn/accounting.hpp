#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "repcn/unet.hpp"

namespace repcn {

struct CostRow {
  std::string name;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t macs = 0;
};

// Analytic cost of one forward. Rows are keyed by (name, kind) in the order
// the forward first touches them; layers that cost nothing still carry their
// parameter count.
struct CostReport {
  std::string variant;
  Shape input_shape;
  std::vector<CostRow> rows;

  std::uint64_t total_params() const;
  std::uint64_t total_flops() const;
  std::uint64_t total_macs() const;
};

// Exact scalar count over every tensor, frozen and trainable.
template <typename T>
std::uint64_t count_params(const Model<T>& model);

// Scalars owned by layers with the given role, modal copies included.
template <typename T>
std::uint64_t count_params(const Model<T>& model, LayerRole role);

// Conv MACs = Cout Cin Kh Kw Hout Wout B, linear MACs = in out tokens B,
// attention products count as matmuls, FLOPs = 2 MACs for all of these.
// Norms, affine scales, activations and additions cost 1 FLOP per element.
// Reshapes, concatenations, upsampling and table lookups are free.
template <typename T>
CostReport count_flops(const Model<T>& model, const Shape& input_shape);

inline constexpr const char* kCostConvention =
    "conv/linear/matmul FLOPs = 2*MACs (bias folded in); norm, affine, activation and "
    "addition = 1 FLOP per element; reshape/concat/upsample/lookup = 0";

// Comment line, header row, one row per CostRow and a trailing total row.
void write_csv(std::ostream& out, const CostReport& report);

}  // namespace repcn
