#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "repcn/kernels.hpp"
#include "repcn/tensor.hpp"

namespace repcn {

// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

enum class CostKind { conv2d, linear, matmul, norm, elementwise };

const char* cost_kind_name(CostKind kind);

// One analytic cost record emitted by a traced op.
struct CostEntry {
  std::string scope;
  CostKind kind;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

// Reverse-mode tape. Nodes are appended in execution order, so every parent
// id is smaller than its child's. With gradient recording off the tape only
// keeps values, which is what sampling and cost accounting use.
template <typename T>
class Tape {
 public:
  struct BackwardArgs {
    const Tape& tape;
    const Tensor<T>& output;
    const Tensor<T>& grad;
    // One slot per parent, null where that parent needs no gradient.
    std::span<Tensor<T>* const> parent_grads;
  };
  using BackwardFn = std::function<void(const BackwardArgs&)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Named parameter leaf. Only trainable leaves receive gradients.
  Var leaf(std::string name, Tensor<T> value, bool trainable);
  Var constant(Tensor<T> value);
  Var push(Tensor<T> value, std::vector<Var> parents, BackwardFn fn);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const std::string& name(Var v) const { return nodes_.at(v.id).name; }
  const std::vector<std::size_t>& parents(Var v) const { return nodes_.at(v.id).parents; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }

  void track_costs(bool on) { tracking_costs_ = on; }
  bool tracking_costs() const { return tracking_costs_; }
  void add_cost(CostKind kind, std::uint64_t macs, std::uint64_t flops);
  const std::vector<CostEntry>& costs() const { return costs_; }

  // Attributes costs recorded while alive to `name`.
  class Scope {
   public:
    Scope(Tape& tape, std::string name) : tape_(&tape) {
      tape_->scopes_.push_back(std::move(name));
    }
    ~Scope() { tape_->scopes_.pop_back(); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* tape_;
  };

  template <typename U>
  friend GradMap<U> backward(const Tape<U>& tape, Var loss);

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable_leaf = false;
    std::string name;
  };

  bool recording_;
  bool tracking_costs_ = false;
  std::vector<Node> nodes_;
  std::set<std::string> leaf_names_;
  std::vector<std::string> scopes_;
  std::vector<CostEntry> costs_;
};

// Gradients of a scalar `loss` with respect to every trainable leaf on the
// tape, keyed by leaf name. Frozen leaves and constants get no entry.
template <typename T>
GradMap<T> backward(const Tape<T>& tape, Var loss);

// Traced ops. Shapes follow the plain kernels in kernels.hpp.
namespace ag {

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b);
// x[N,in] * w[out,in]^T + bias[out]
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias);
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var kernel, Var bias, ConvGeometry geometry);
// Batched a[B,M,K] * b[B,K,N], or b[B,N,K]^T when transpose_b.
template <typename T>
Var bmm(Tape<T>& tape, Var a, Var b, bool transpose_b);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
template <typename T>
Var sub(Tape<T>& tape, Var a, Var b);
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);
template <typename T>
Var mul_scalar(Tape<T>& tape, Var a, T s);
// x[B,C,...] + v[B,C] broadcast over trailing dims.
template <typename T>
Var add_channel(Tape<T>& tape, Var x, Var v);
template <typename T>
Var silu(Tape<T>& tape, Var x);
// Softmax over the last axis.
template <typename T>
Var softmax(Tape<T>& tape, Var x);
template <typename T>
Var group_norm(Tape<T>& tape, Var x, std::size_t groups, T eps);
// x[B,C,...] * gamma[C] + beta[C]
template <typename T>
Var channel_affine(Tape<T>& tape, Var x, Var gamma, Var beta);
template <typename T>
Var mse(Tape<T>& tape, Var a, Var b);
template <typename T>
Var sum(Tape<T>& tape, Var x);

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape);
// [B,C,H,W] <-> [B,H*W,C]
template <typename T>
Var to_tokens(Tape<T>& tape, Var x);
template <typename T>
Var from_tokens(Tape<T>& tape, Var x, std::size_t height, std::size_t width);
// [B,N,C] <-> [B*heads,N,C/heads]
template <typename T>
Var split_heads(Tape<T>& tape, Var x, std::size_t heads);
template <typename T>
Var merge_heads(Tape<T>& tape, Var x, std::size_t heads);
template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b);
template <typename T>
Var upsample_nearest2x(Tape<T>& tape, Var x);
// Rows of table[V,D] selected by ids -> [ids.size(), D].
template <typename T>
Var embedding(Tape<T>& tape, Var table, const std::vector<std::size_t>& ids);

}  // namespace ag
}  // namespace repcn
