#pragma once

#include <functional>

#include "repcn/tensor.hpp"

namespace repcn {

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, T eps) {
  if (!(eps > T{0})) throw ContractError("finite_diff_grad needs eps > 0");
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = probe[i];
    probe[i] = saved + eps;
    const T up = static_cast<T>(f(probe));
    probe[i] = saved - eps;
    const T down = static_cast<T>(f(probe));
    probe[i] = saved;
    grad[i] = (up - down) / (T{2} * eps);
  }
  return grad;
}

}  // namespace repcn
