#pragma once

// Brute-force oracles and fixtures shared by the tests. Everything here is
// written independently of the library kernels.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "repcn/repcn.hpp"

namespace repcn::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 8;
  c.channels = 8;
  c.mid_channels = 16;
  c.time_embed_dim = 16;
  c.groups = 4;
  c.heads = 2;
  c.context_dim = 8;
  c.adapter_channels = 4;
  return c;
}

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(d(rng));
  return t;
}

template <typename T>
Tensor<T> matmul_oracle(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += double(a.at(i, p)) * double(b.at(p, j));
      c.at(i, j) = static_cast<T>(s);
    }
  }
  return c;
}

template <typename T>
Tensor<T> conv_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                      std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - Kh) / stride + 1, Wo = (W + 2 * pad - Kw) / stride + 1;
  Tensor<T> y({B, Co, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double s = bias.size() ? double(bias[o]) : 0.0;
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t ky = 0; ky < Kh; ++ky)
              for (std::size_t kx = 0; kx < Kw; ++kx) {
                const long iy = long(oy * stride + ky) - long(pad);
                const long ix = long(ox * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                s += double(x.at(b, c, std::size_t(iy), std::size_t(ix))) *
                     double(w.at(o, c, ky, kx));
              }
          y.at(b, o, oy, ox) = static_cast<T>(s);
        }
  return y;
}

// y[N,out] = x[N,in] W^T + b
template <typename T>
Tensor<T> linear_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor<T> y({n, out});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = double(b[o]);
      for (std::size_t i = 0; i < in; ++i) s += double(x.at(r, i)) * double(w.at(o, i));
      y.at(r, o) = static_cast<T>(s);
    }
  return y;
}

// Single-context multi-head attention: q[B,N,C], k,v[B,M,C].
inline Tensor<double> attention_oracle(const Tensor<double>& q, const Tensor<double>& k,
                                       const Tensor<double>& v, std::size_t heads) {
  const std::size_t B = q.dim(0), N = q.dim(1), C = q.dim(2), M = k.dim(1), d = C / heads;
  Tensor<double> out({B, N, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < N; ++i) {
        std::vector<double> s(M);
        double mx = -1e300;
        for (std::size_t j = 0; j < M; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < d; ++e) dot += q.at(b, i, h * d + e) * k.at(b, j, h * d + e);
          s[j] = dot / std::sqrt(double(d));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t e = 0; e < d; ++e) {
          double acc = 0;
          for (std::size_t j = 0; j < M; ++j) acc += s[j] / z * v.at(b, j, h * d + e);
          out.at(b, i, h * d + e) = acc;
        }
      }
  return out;
}

// Token-wise linear on [B,N,in].
inline Tensor<double> token_linear_oracle(const Tensor<double>& x, const Tensor<double>& w,
                                          const Tensor<double>& b) {
  const Shape s = x.shape();
  Tensor<double> flat = x.reshaped({s[0] * s[1], s[2]});
  return linear_oracle(flat, w, b).reshaped({s[0], s[1], w.dim(0)});
}

// max|a-n| relative to the larger of the two gradients' magnitudes.
template <typename T>
double grad_rel_error(const Tensor<T>& analytic, const Tensor<T>& numeric) {
  double diff = 0, scale = 1e-8;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(double(analytic[i]) - double(numeric[i])));
    scale = std::max({scale, std::abs(double(analytic[i])), std::abs(double(numeric[i]))});
  }
  return diff / scale;
}

using GraphFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Binds `inputs` as trainable leaves, contracts the graph output with a fixed
// random tensor and compares backward() against central differences for
// every input. Returns the worst relative error.
inline double gradcheck(const GraphFn& graph, const std::vector<Tensor<double>>& inputs,
                        std::uint64_t seed, double eps = 1e-5) {
  auto loss_of = [&](const std::vector<Tensor<double>>& xs, bool record, GradMap<double>* grads) {
    Tape<double> tape(record);
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      leaves.push_back(tape.leaf("in" + std::to_string(i), xs[i], true));
    }
    Var y = graph(tape, leaves);
    const Tensor<double> r = random_tensor<double>(tape.value(y).shape(), seed ^ 0xABCDEFull);
    Var loss = ag::sum(tape, ag::mul(tape, y, tape.constant(r)));
    if (grads) *grads = backward(tape, loss);
    return tape.value(loss).item();
  };
  GradMap<double> grads;
  loss_of(inputs, true, &grads);
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto xs = inputs;
    const Tensor<double> numeric = finite_diff_grad(
        [&](const Tensor<double>& probe) {
          xs[i] = probe;
          return loss_of(xs, false, nullptr);
        },
        inputs[i], eps);
    worst = std::max(worst, grad_rel_error(grads.at("in" + std::to_string(i)), numeric));
  }
  return worst;
}

// Every layer of the requested architecture randomly initialized and trainable.
template <typename T>
Model<T> init_model(const ModelConfig& config, const Components& parts, std::uint64_t seed) {
  Model<T> m;
  m.config = config;
  m.parts = parts;
  m.layers = build_layer_specs(config, parts);
  for (const auto& spec : m.layers) {
    init_layer(spec, m.params, seed, true);
    if (parts.modal && spec.role == LayerRole::base && spec.is_affine_operator()) {
      const auto w = m.params.at(weight_name(spec.name)).value;
      const auto b = m.params.at(bias_name(spec.name)).value;
      m.params.set(modal_weight_name(spec.name),
                   random_tensor<T>(w.shape(), seed ^ std::hash<std::string>{}(spec.name), 0.3), true);
      m.params.set(modal_bias_name(spec.name),
                   random_tensor<T>(b.shape(), seed ^ std::hash<std::string>{}(spec.name) ^ 1, 0.3), true);
    }
  }
  return m;
}

// A model holding a single registered layer, optionally with a modal copy.
template <typename T>
Model<T> single_layer_model(const LayerSpec& spec, const Tensor<T>& w, const Tensor<T>& b,
                            const Tensor<T>* w_modal = nullptr, const Tensor<T>* b_modal = nullptr) {
  Model<T> m;
  m.layers = {spec};
  m.params.set(weight_name(spec.name), w, false);
  m.params.set(bias_name(spec.name), b, false);
  if (w_modal) {
    m.params.set(modal_weight_name(spec.name), *w_modal, true);
    m.params.set(modal_bias_name(spec.name), *b_modal, true);
  }
  return m;
}

inline LayerSpec linear_spec(const std::string& name, std::size_t in, std::size_t out) {
  LayerSpec s;
  s.name = name;
  s.kind = LayerKind::linear;
  s.in = in;
  s.out = out;
  return s;
}

inline LayerSpec conv_spec(const std::string& name, std::size_t in, std::size_t out,
                           std::size_t k, std::size_t stride, std::size_t pad) {
  LayerSpec s;
  s.name = name;
  s.kind = LayerKind::conv2d;
  s.in = in;
  s.out = out;
  s.kernel = k;
  s.stride = stride;
  s.padding = pad;
  return s;
}

using LayerFn = std::function<Var(LayerContext<double>&)>;

// Gradient check over named model tensors. Every tensor in `names` must be
// trainable in `model`.
inline double model_gradcheck(Model<double> model, const LayerFn& forward,
                              const std::vector<std::string>& names, std::uint64_t seed,
                              double eps = 1e-5) {
  auto loss_of = [&](const Model<double>& m, bool record, GradMap<double>* grads) {
    Tape<double> tape(record);
    LayerContext<double> ctx(tape, m);
    Var y = forward(ctx);
    const Tensor<double> r = random_tensor<double>(tape.value(y).shape(), seed ^ 0x5151ull);
    Var loss = ag::sum(tape, ag::mul(tape, y, tape.constant(r)));
    if (grads) *grads = backward(tape, loss);
    return tape.value(loss).item();
  };
  GradMap<double> grads;
  loss_of(model, true, &grads);
  double worst = 0;
  for (const auto& name : names) {
    const Tensor<double> original = model.params.at(name).value;
    const Tensor<double> numeric = finite_diff_grad(
        [&](const Tensor<double>& probe) {
          model.params.at(name).value = probe;
          return loss_of(model, false, nullptr);
        },
        original, eps);
    model.params.at(name).value = original;
    worst = std::max(worst, grad_rel_error(grads.at(name), numeric));
  }
  return worst;
}

// Frozen random base plus randomly perturbed modal/adapter/identity weights,
// standing in for a trained dual model.
template <typename T>
Model<T> random_dual(std::uint64_t seed, double w = 0.1) {
  auto base = init_base<T>(tiny_config(), seed);
  base.set_trainable([](const std::string&) { return false; });
  RepOptions opt;
  opt.w = w;
  opt.seed = seed;
  auto dual = attach_rep(base, opt);
  for (auto& [name, p] : dual.params) {
    if (!p.trainable) continue;
    p.value += random_tensor<T>(p.value.shape(), seed ^ std::hash<std::string>{}(name), 0.05);
  }
  return dual;
}

// Fixed denoising batch of `n` synthetic samples at the tiny resolution.
template <typename T>
TrainBatch<T> fixed_batch(std::size_t n, std::uint64_t seed, const NoiseSchedule& schedule) {
  static std::map<std::uint64_t, std::vector<SyntheticSample>> cache;
  auto& data = cache[seed * 1000 + n];
  if (data.empty()) data = make_dataset(n, seed, tiny_config().image_size);
  std::vector<const SyntheticSample*> ptrs;
  for (const auto& s : data) ptrs.push_back(&s);
  std::mt19937_64 rng(seed);
  return make_batch<T>(ptrs, schedule, rng);
}

inline NoiseSchedule tiny_schedule() {
  DiffusionConfig d;
  d.image_size = tiny_config().image_size;
  return NoiseSchedule{d};
}

template <typename T>
Model<T> frozen_base(std::uint64_t seed) {
  auto base = init_base<T>(tiny_config(), seed);
  base.set_trainable([](const std::string&) { return false; });
  return base;
}

}  // namespace repcn::testing
