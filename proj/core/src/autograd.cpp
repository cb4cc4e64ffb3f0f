#include "repcn/autograd.hpp"

#include <cmath>
#include <string>

namespace repcn {

const char* cost_kind_name(CostKind kind) {
  switch (kind) {
    case CostKind::conv2d: return "conv2d";
    case CostKind::linear: return "linear";
    case CostKind::matmul: return "matmul";
    case CostKind::norm: return "norm";
    case CostKind::elementwise: return "elementwise";
  }
  return "unknown";
}

template <typename T>
Var Tape<T>::leaf(std::string name, Tensor<T> value, bool trainable) {
  if (!leaf_names_.insert(name).second) {
    throw ContractError("parameter '" + name + "' bound twice on one tape");
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = recording_ && trainable;
  node.trainable_leaf = trainable;
  node.name = std::move(name);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::push(Tensor<T> value, std::vector<Var> parents, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  bool needs = false;
  for (Var p : parents) needs = needs || nodes_.at(p.id).requires_grad;
  if (recording_ && needs) {
    node.requires_grad = true;
    node.backward = std::move(fn);
    node.parents.reserve(parents.size());
    for (Var p : parents) node.parents.push_back(p.id);
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
void Tape<T>::add_cost(CostKind kind, std::uint64_t macs, std::uint64_t flops) {
  if (!tracking_costs_) return;
  costs_.push_back(CostEntry{scopes_.empty() ? std::string("(root)") : scopes_.back(),
                             kind, macs, flops});
}

template <typename T>
GradMap<T> backward(const Tape<T>& tape, Var loss) {
  const auto& nodes = tape.nodes_;
  if (loss.id >= nodes.size()) throw ContractError("backward: loss is not on this tape");
  if (nodes[loss.id].value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        to_string(nodes[loss.id].value.shape()));
  }
  std::vector<Tensor<T>> grads(loss.id + 1);
  grads[loss.id] = Tensor<T>(nodes[loss.id].value.shape(), T{1});
  std::vector<Tensor<T>*> slots;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const auto& node = nodes[id];
    if (!node.requires_grad || grads[id].empty() || !node.backward) continue;
    slots.assign(node.parents.size(), nullptr);
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      const std::size_t p = node.parents[i];
      if (!nodes[p].requires_grad) continue;
      if (grads[p].empty()) grads[p] = Tensor<T>(nodes[p].value.shape());
      slots[i] = &grads[p];
    }
    node.backward(typename Tape<T>::BackwardArgs{tape, node.value, grads[id], slots});
    grads[id] = Tensor<T>();
  }
  GradMap<T> out;
  for (std::size_t id = 0; id < nodes.size(); ++id) {
    const auto& node = nodes[id];
    if (!node.trainable_leaf || !node.requires_grad) continue;
    if (id < grads.size() && !grads[id].empty()) {
      out.emplace(node.name, std::move(grads[id]));
    } else {
      out.emplace(node.name, Tensor<T>(node.value.shape()));
    }
  }
  return out;
}

namespace ag {
namespace {

template <typename T>
void add_into(Tensor<T>* dst, const Tensor<T>& src) {
  if (dst) *dst += src;
}

template <typename T>
void add_elementwise_cost(Tape<T>& tape, const Tensor<T>& out) {
  tape.add_cost(CostKind::elementwise, 0, out.size());
}

}  // namespace

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = repcn::matmul(tape.value(a), tape.value(b));
  const auto& av = tape.value(a);
  const std::uint64_t macs = av.dim(0) * av.dim(1) * out.dim(1);
  tape.add_cost(CostKind::matmul, macs, 2 * macs);
  return tape.push(std::move(out), {a, b}, [a, b](const typename Tape<T>::BackwardArgs& args) {
    const auto& av = args.tape.value(a);
    const auto& bv = args.tape.value(b);
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (auto* ga = args.parent_grads[0]) {
      std::vector<T> bt(n * k);
      kernels::transpose(k, n, bv.raw(), bt.data());
      kernels::gemm(m, k, n, args.grad.raw(), n, bt.data(), k, ga->raw(), k, true);
    }
    if (auto* gb = args.parent_grads[1]) {
      std::vector<T> at(k * m);
      kernels::transpose(m, k, av.raw(), at.data());
      kernels::gemm(k, n, m, at.data(), m, args.grad.raw(), n, gb->raw(), n, true);
    }
  });
}

template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  const auto& bv = tape.value(bias);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
    throw ShapeError("linear: input " + to_string(xv.shape()) +
                     " incompatible with weight " + to_string(wv.shape()));
  }
  if (bv.rank() != 1 || bv.dim(0) != wv.dim(0)) {
    throw ShapeError("linear: bias " + to_string(bv.shape()) +
                     " incompatible with weight " + to_string(wv.shape()));
  }
  const std::size_t rows = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  std::vector<T> wt(in * out_dim);
  kernels::transpose(out_dim, in, wv.raw(), wt.data());
  Tensor<T> out({rows, out_dim});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(bv.raw(), out_dim, out.raw() + r * out_dim);
  kernels::gemm(rows, out_dim, in, xv.raw(), in, wt.data(), out_dim, out.raw(), out_dim, true);
  const std::uint64_t macs = rows * in * out_dim;
  tape.add_cost(CostKind::linear, macs, 2 * macs);
  return tape.push(std::move(out), {x, weight, bias},
                   [x, weight](const typename Tape<T>::BackwardArgs& args) {
    const auto& xv = args.tape.value(x);
    const auto& wv = args.tape.value(weight);
    const std::size_t rows = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
    const T* g = args.grad.raw();
    if (auto* gx = args.parent_grads[0]) {
      kernels::gemm(rows, in, out_dim, g, out_dim, wv.raw(), in, gx->raw(), in, true);
    }
    if (auto* gw = args.parent_grads[1]) {
      std::vector<T> gt(out_dim * rows);
      kernels::transpose(rows, out_dim, g, gt.data());
      kernels::gemm(out_dim, in, rows, gt.data(), rows, xv.raw(), in, gw->raw(), in, true);
    }
    if (auto* gb = args.parent_grads[2]) {
      for (std::size_t o = 0; o < out_dim; ++o) {
        T acc = 0;
        for (std::size_t r = 0; r < rows; ++r) acc += g[r * out_dim + o];
        (*gb)[o] += acc;
      }
    }
  });
}

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var kernel, Var bias, ConvGeometry geometry) {
  const auto& xv = tape.value(x);
  Tensor<T> out = repcn::conv2d(xv, tape.value(kernel), tape.value(bias), geometry.stride,
                                geometry.padding);
  const auto s = kernels::conv_shape(xv.shape(), tape.value(kernel).shape(), geometry.stride,
                                     geometry.padding);
  const std::uint64_t macs = xv.dim(0) * s.channels_out * s.patch() * s.out_pixels();
  tape.add_cost(CostKind::conv2d, macs, 2 * macs);
  return tape.push(std::move(out), {x, kernel, bias},
                   [x, kernel, s](const typename Tape<T>::BackwardArgs& args) {
    const auto& xv = args.tape.value(x);
    const std::size_t batch = xv.dim(0);
    if (auto* gx = args.parent_grads[0]) {
      kernels::conv2d_backward_input(s, batch, args.grad.raw(), args.tape.value(kernel).raw(),
                                     gx->raw());
    }
    auto* gk = args.parent_grads[1];
    auto* gb = args.parent_grads[2];
    if (gk || gb) {
      kernels::conv2d_backward_params(s, batch, xv.raw(), args.grad.raw(),
                                      gk ? gk->raw() : nullptr, gb ? gb->raw() : nullptr);
    }
  });
}

template <typename T>
Var bmm(Tape<T>& tape, Var a, Var b, bool transpose_b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw ShapeError("bmm: incompatible shapes " + to_string(av.shape()) + " and " +
                     to_string(bv.shape()));
  }
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if ((transpose_b ? bv.dim(2) : bv.dim(1)) != k) {
    throw ShapeError("bmm: inner dimensions differ for " + to_string(av.shape()) + " and " +
                     to_string(bv.shape()));
  }
  Tensor<T> out({batch, m, n});
  std::vector<T> scratch(transpose_b ? k * n : 0);
  for (std::size_t i = 0; i < batch; ++i) {
    const T* bp = bv.raw() + i * k * n;
    if (transpose_b) {
      kernels::transpose(n, k, bp, scratch.data());
      bp = scratch.data();
    }
    kernels::gemm(m, n, k, av.raw() + i * m * k, k, bp, n, out.raw() + i * m * n, n, false);
  }
  const std::uint64_t macs = batch * m * n * k;
  tape.add_cost(CostKind::matmul, macs, 2 * macs);
  return tape.push(std::move(out), {a, b},
                   [a, b, transpose_b, batch, m, n, k](const typename Tape<T>::BackwardArgs& args) {
    const auto& av = args.tape.value(a);
    const auto& bv = args.tape.value(b);
    std::vector<T> t1(std::max(k * n, m * k));
    std::vector<T> t2(m * n);
    for (std::size_t i = 0; i < batch; ++i) {
      const T* g = args.grad.raw() + i * m * n;
      const T* ap = av.raw() + i * m * k;
      const T* bp = bv.raw() + i * k * n;
      if (auto* ga = args.parent_grads[0]) {
        // dA = G * B^T  (B is [K,N]) or G * Bstored ([N,K]) when transposed.
        const T* rhs = bp;
        if (!transpose_b) {
          kernels::transpose(k, n, bp, t1.data());
          rhs = t1.data();
        }
        kernels::gemm(m, k, n, g, n, rhs, k, ga->raw() + i * m * k, k, true);
      }
      if (auto* gb = args.parent_grads[1]) {
        if (!transpose_b) {
          // dB[K,N] = A^T * G
          kernels::transpose(m, k, ap, t1.data());
          kernels::gemm(k, n, m, t1.data(), m, g, n, gb->raw() + i * k * n, n, true);
        } else {
          // dBstored[N,K] = G^T * A
          kernels::transpose(m, n, g, t2.data());
          kernels::gemm(n, k, m, t2.data(), m, ap, k, gb->raw() + i * k * n, k, true);
        }
      }
    }
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = repcn::add(tape.value(a), tape.value(b));
  add_elementwise_cost(tape, out);
  return tape.push(std::move(out), {a, b}, [](const typename Tape<T>::BackwardArgs& args) {
    add_into(args.parent_grads[0], args.grad);
    add_into(args.parent_grads[1], args.grad);
  });
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = repcn::sub(tape.value(a), tape.value(b));
  add_elementwise_cost(tape, out);
  return tape.push(std::move(out), {a, b}, [](const typename Tape<T>::BackwardArgs& args) {
    add_into(args.parent_grads[0], args.grad);
    if (auto* gb = args.parent_grads[1]) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] -= args.grad[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  av.require_same_shape(bv, "mul");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  add_elementwise_cost(tape, out);
  return tape.push(std::move(out), {a, b}, [a, b](const typename Tape<T>::BackwardArgs& args) {
    const auto& av = args.tape.value(a);
    const auto& bv = args.tape.value(b);
    if (auto* ga = args.parent_grads[0]) {
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += args.grad[i] * bv[i];
    }
    if (auto* gb = args.parent_grads[1]) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += args.grad[i] * av[i];
    }
  });
}

template <typename T>
Var mul_scalar(Tape<T>& tape, Var a, T s) {
  Tensor<T> out = repcn::mul_scalar(tape.value(a), s);
  add_elementwise_cost(tape, out);
  return tape.push(std::move(out), {a}, [s](const typename Tape<T>::BackwardArgs& args) {
    auto* ga = args.parent_grads[0];
    for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += args.grad[i] * s;
  });
}

template <typename T>
Var add_channel(Tape<T>& tape, Var x, Var v) {
  const auto& xv = tape.value(x);
  const auto& vv = tape.value(v);
  if (xv.rank() < 2 || vv.rank() != 2 || vv.dim(0) != xv.dim(0) || vv.dim(1) != xv.dim(1)) {
    throw ShapeError("add_channel: cannot broadcast " + to_string(vv.shape()) + " over " +
                     to_string(xv.shape()));
  }
  const std::size_t planes = xv.dim(0) * xv.dim(1);
  const std::size_t inner = xv.size() / planes;
  Tensor<T> out = xv;
  for (std::size_t p = 0; p < planes; ++p) {
    T* dst = out.raw() + p * inner;
    for (std::size_t i = 0; i < inner; ++i) dst[i] += vv[p];
  }
  add_elementwise_cost(tape, out);
  return tape.push(std::move(out), {x, v}, [planes, inner](const typename Tape<T>::BackwardArgs& args) {
    add_into(args.parent_grads[0], args.grad);
    if (auto* gv = args.parent_grads[1]) {
      for (std::size_t p = 0; p < planes; ++p) {
        T acc = 0;
        for (std::size_t i = 0; i < inner; ++i) acc += args.grad[p * inner + i];
        (*gv)[p] += acc;
      }
    }
  });
}

template <typename T>
Var silu(Tape<T>& tape, Var x) {
  Tensor<T> out = repcn::silu(tape.value(x));
  add_elementwise_cost(tape, out);
  return tape.push(std::move(out), {x}, [x](const typename Tape<T>::BackwardArgs& args) {
    const auto& xv = args.tape.value(x);
    auto* gx = args.parent_grads[0];
    for (std::size_t i = 0; i < gx->size(); ++i) {
      const T sig = T{1} / (T{1} + std::exp(-xv[i]));
      (*gx)[i] += args.grad[i] * sig * (T{1} + xv[i] * (T{1} - sig));
    }
  });
}

template <typename T>
Var softmax(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  if (xv.rank() == 0) throw ShapeError("softmax of a scalar");
  Tensor<T> out = repcn::softmax(xv, xv.rank() - 1);
  add_elementwise_cost(tape, out);
  const std::size_t n = xv.dim(xv.rank() - 1);
  return tape.push(std::move(out), {x}, [n](const typename Tape<T>::BackwardArgs& args) {
    auto* gx = args.parent_grads[0];
    const std::size_t rows = args.output.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = args.output.raw() + r * n;
      const T* g = args.grad.raw() + r * n;
      T dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
      T* dst = gx->raw() + r * n;
      for (std::size_t i = 0; i < n; ++i) dst[i] += y[i] * (g[i] - dot);
    }
  });
}

template <typename T>
Var group_norm(Tape<T>& tape, Var x, std::size_t groups, T eps) {
  Tensor<T> out;
  auto stats = kernels::group_norm_forward(tape.value(x), groups, eps, out);
  tape.add_cost(CostKind::norm, 0, out.size());
  return tape.push(std::move(out), {x},
                   [stats = std::move(stats), groups](const typename Tape<T>::BackwardArgs& args) {
    kernels::group_norm_backward(args.output, stats, groups, args.grad, *args.parent_grads[0]);
  });
}

template <typename T>
Var channel_affine(Tape<T>& tape, Var x, Var gamma, Var beta) {
  const auto& xv = tape.value(x);
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  if (xv.rank() < 2 || gv.shape() != Shape{xv.dim(1)} || bv.shape() != Shape{xv.dim(1)}) {
    throw ShapeError("channel_affine: parameters " + to_string(gv.shape()) + "/" +
                     to_string(bv.shape()) + " do not match input " + to_string(xv.shape()));
  }
  const std::size_t batch = xv.dim(0), channels = xv.dim(1);
  const std::size_t inner = xv.size() / (batch * channels);
  Tensor<T> out(xv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[off + i] = xv[off + i] * gv[c] + bv[c];
    }
  }
  tape.add_cost(CostKind::norm, 0, out.size());
  return tape.push(std::move(out), {x, gamma, beta},
                   [x, gamma, batch, channels, inner](const typename Tape<T>::BackwardArgs& args) {
    const auto& xv = args.tape.value(x);
    const auto& gv = args.tape.value(gamma);
    auto* gx = args.parent_grads[0];
    auto* gg = args.parent_grads[1];
    auto* gb = args.parent_grads[2];
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t off = (b * channels + c) * inner;
        T sg = 0, sb = 0;
        for (std::size_t i = 0; i < inner; ++i) {
          const T g = args.grad[off + i];
          if (gx) (*gx)[off + i] += g * gv[c];
          sg += g * xv[off + i];
          sb += g;
        }
        if (gg) (*gg)[c] += sg;
        if (gb) (*gb)[c] += sb;
      }
    }
  });
}

template <typename T>
Var mse(Tape<T>& tape, Var a, Var b) {
  const T value = repcn::mse(tape.value(a), tape.value(b));
  return tape.push(Tensor<T>::scalar(value), {a, b},
                   [a, b](const typename Tape<T>::BackwardArgs& args) {
    const auto& av = args.tape.value(a);
    const auto& bv = args.tape.value(b);
    const T scale = T{2} * args.grad.item() / static_cast<T>(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T d = scale * (av[i] - bv[i]);
      if (auto* ga = args.parent_grads[0]) (*ga)[i] += d;
      if (auto* gb = args.parent_grads[1]) (*gb)[i] -= d;
    }
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  T acc = 0;
  for (T v : tape.value(x).data()) acc += v;
  return tape.push(Tensor<T>::scalar(acc), {x}, [](const typename Tape<T>::BackwardArgs& args) {
    auto* gx = args.parent_grads[0];
    const T g = args.grad.item();
    for (T& v : gx->data()) v += g;
  });
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
  Tensor<T> out = tape.value(x).reshaped(std::move(shape));
  return tape.push(std::move(out), {x}, [](const typename Tape<T>::BackwardArgs& args) {
    auto* gx = args.parent_grads[0];
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += args.grad[i];
  });
}

namespace {

// [B, A, C] -> [B, C, A] for each batch; used by the token layout ops.
template <typename T>
void batched_transpose(std::size_t batch, std::size_t rows, std::size_t cols, const T* in,
                       T* out) {
  for (std::size_t b = 0; b < batch; ++b) {
    kernels::transpose(rows, cols, in + b * rows * cols, out + b * rows * cols);
  }
}

template <typename T>
void batched_transpose_add(std::size_t batch, std::size_t rows, std::size_t cols, const T* in,
                           T* out) {
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = in + b * rows * cols;
    T* dst = out + b * rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] += src[r * cols + c];
    }
  }
}

}  // namespace

template <typename T>
Var to_tokens(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 4) throw ShapeError("to_tokens expects [B,C,H,W], got " + to_string(xv.shape()));
  const std::size_t batch = xv.dim(0), channels = xv.dim(1), pixels = xv.dim(2) * xv.dim(3);
  Tensor<T> out({batch, pixels, channels});
  batched_transpose(batch, channels, pixels, xv.raw(), out.raw());
  return tape.push(std::move(out), {x},
                   [batch, channels, pixels](const typename Tape<T>::BackwardArgs& args) {
    batched_transpose_add(batch, pixels, channels, args.grad.raw(), args.parent_grads[0]->raw());
  });
}

template <typename T>
Var from_tokens(Tape<T>& tape, Var x, std::size_t height, std::size_t width) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 3 || xv.dim(1) != height * width) {
    throw ShapeError("from_tokens: " + to_string(xv.shape()) + " is not [B," +
                     std::to_string(height * width) + ",C]");
  }
  const std::size_t batch = xv.dim(0), pixels = xv.dim(1), channels = xv.dim(2);
  Tensor<T> out({batch, channels, height, width});
  batched_transpose(batch, pixels, channels, xv.raw(), out.raw());
  return tape.push(std::move(out), {x},
                   [batch, channels, pixels](const typename Tape<T>::BackwardArgs& args) {
    batched_transpose_add(batch, channels, pixels, args.grad.raw(), args.parent_grads[0]->raw());
  });
}

namespace {

// [B,N,h,d] <-> [B,h,N,d] index shuffle shared by split/merge heads.
template <typename T>
void shuffle_heads(std::size_t batch, std::size_t tokens, std::size_t heads, std::size_t width,
                   const T* in, T* out, bool split, bool accumulate) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < tokens; ++n) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t merged = ((b * tokens + n) * heads + h) * width;
        const std::size_t separate = ((b * heads + h) * tokens + n) * width;
        const T* src = in + (split ? merged : separate);
        T* dst = out + (split ? separate : merged);
        for (std::size_t i = 0; i < width; ++i) {
          if (accumulate) dst[i] += src[i]; else dst[i] = src[i];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var split_heads(Tape<T>& tape, Var x, std::size_t heads) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 3 || heads == 0 || xv.dim(2) % heads != 0) {
    throw ShapeError("split_heads: width of " + to_string(xv.shape()) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t batch = xv.dim(0), tokens = xv.dim(1), width = xv.dim(2) / heads;
  Tensor<T> out({batch * heads, tokens, width});
  shuffle_heads(batch, tokens, heads, width, xv.raw(), out.raw(), true, false);
  return tape.push(std::move(out), {x},
                   [batch, tokens, heads, width](const typename Tape<T>::BackwardArgs& args) {
    shuffle_heads(batch, tokens, heads, width, args.grad.raw(), args.parent_grads[0]->raw(),
                  false, true);
  });
}

template <typename T>
Var merge_heads(Tape<T>& tape, Var x, std::size_t heads) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 3 || heads == 0 || xv.dim(0) % heads != 0) {
    throw ShapeError("merge_heads: leading dim of " + to_string(xv.shape()) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t batch = xv.dim(0) / heads, tokens = xv.dim(1), width = xv.dim(2);
  Tensor<T> out({batch, tokens, width * heads});
  shuffle_heads(batch, tokens, heads, width, xv.raw(), out.raw(), false, false);
  return tape.push(std::move(out), {x},
                   [batch, tokens, heads, width](const typename Tape<T>::BackwardArgs& args) {
    shuffle_heads(batch, tokens, heads, width, args.grad.raw(), args.parent_grads[0]->raw(),
                  true, true);
  });
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
      av.dim(3) != bv.dim(3)) {
    throw ShapeError("concat_channels: " + to_string(av.shape()) + " and " +
                     to_string(bv.shape()) + " differ outside the channel axis");
  }
  const std::size_t batch = av.dim(0);
  const std::size_t a_block = av.size() / batch, b_block = bv.size() / batch;
  Tensor<T> out({batch, av.dim(1) + bv.dim(1), av.dim(2), av.dim(3)});
  for (std::size_t i = 0; i < batch; ++i) {
    T* dst = out.raw() + i * (a_block + b_block);
    std::copy_n(av.raw() + i * a_block, a_block, dst);
    std::copy_n(bv.raw() + i * b_block, b_block, dst + a_block);
  }
  return tape.push(std::move(out), {a, b},
                   [batch, a_block, b_block](const typename Tape<T>::BackwardArgs& args) {
    for (std::size_t i = 0; i < batch; ++i) {
      const T* src = args.grad.raw() + i * (a_block + b_block);
      if (auto* ga = args.parent_grads[0]) {
        T* dst = ga->raw() + i * a_block;
        for (std::size_t j = 0; j < a_block; ++j) dst[j] += src[j];
      }
      if (auto* gb = args.parent_grads[1]) {
        T* dst = gb->raw() + i * b_block;
        for (std::size_t j = 0; j < b_block; ++j) dst[j] += src[a_block + j];
      }
    }
  });
}

template <typename T>
Var upsample_nearest2x(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 4) throw ShapeError("upsample expects [B,C,H,W], got " + to_string(xv.shape()));
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.raw() + p * h * w;
    T* dst = out.raw() + p * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  return tape.push(std::move(out), {x}, [planes, h, w](const typename Tape<T>::BackwardArgs& args) {
    auto* gx = args.parent_grads[0];
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = args.grad.raw() + p * 4 * h * w;
      T* dst = gx->raw() + p * h * w;
      for (std::size_t y = 0; y < 2 * h; ++y) {
        for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
      }
    }
  });
}

template <typename T>
Var embedding(Tape<T>& tape, Var table, const std::vector<std::size_t>& ids) {
  const auto& tv = tape.value(table);
  if (tv.rank() != 2) throw ShapeError("embedding table must be 2-D, got " + to_string(tv.shape()));
  const std::size_t width = tv.dim(1);
  for (std::size_t id : ids) {
    if (id >= tv.dim(0)) {
      throw ShapeError("embedding id " + std::to_string(id) + " out of range for table " +
                       to_string(tv.shape()));
    }
  }
  Tensor<T> out({ids.size(), width});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(tv.raw() + ids[r] * width, width, out.raw() + r * width);
  }
  return tape.push(std::move(out), {table}, [ids, width](const typename Tape<T>::BackwardArgs& args) {
    auto* gt = args.parent_grads[0];
    for (std::size_t r = 0; r < ids.size(); ++r) {
      for (std::size_t i = 0; i < width; ++i) (*gt)[ids[r] * width + i] += args.grad[r * width + i];
    }
  });
}

#define REPCN_INSTANTIATE(T)                                                          \
  template Var matmul(Tape<T>&, Var, Var);                                            \
  template Var linear(Tape<T>&, Var, Var, Var);                                       \
  template Var conv2d(Tape<T>&, Var, Var, Var, ConvGeometry);                         \
  template Var bmm(Tape<T>&, Var, Var, bool);                                         \
  template Var add(Tape<T>&, Var, Var);                                               \
  template Var sub(Tape<T>&, Var, Var);                                               \
  template Var mul(Tape<T>&, Var, Var);                                               \
  template Var mul_scalar(Tape<T>&, Var, T);                                          \
  template Var add_channel(Tape<T>&, Var, Var);                                       \
  template Var silu(Tape<T>&, Var);                                                   \
  template Var softmax(Tape<T>&, Var);                                                \
  template Var group_norm(Tape<T>&, Var, std::size_t, T);                             \
  template Var channel_affine(Tape<T>&, Var, Var, Var);                               \
  template Var mse(Tape<T>&, Var, Var);                                               \
  template Var sum(Tape<T>&, Var);                                                    \
  template Var reshape(Tape<T>&, Var, Shape);                                         \
  template Var to_tokens(Tape<T>&, Var);                                              \
  template Var from_tokens(Tape<T>&, Var, std::size_t, std::size_t);                  \
  template Var split_heads(Tape<T>&, Var, std::size_t);                               \
  template Var merge_heads(Tape<T>&, Var, std::size_t);                               \
  template Var concat_channels(Tape<T>&, Var, Var);                                   \
  template Var upsample_nearest2x(Tape<T>&, Var);                                     \
  template Var embedding(Tape<T>&, Var, const std::vector<std::size_t>&);

REPCN_INSTANTIATE(float)
REPCN_INSTANTIATE(double)
#undef REPCN_INSTANTIATE

}  // namespace ag

template class Tape<float>;
template class Tape<double>;
template GradMap<float> backward(const Tape<float>&, Var);
template GradMap<double> backward(const Tape<double>&, Var);

}  // namespace repcn
