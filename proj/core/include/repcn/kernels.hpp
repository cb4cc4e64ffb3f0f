#pragma once

#include <cstddef>
#include <vector>

#include "repcn/tensor.hpp"

// Plain (untraced) tensor math. The traced ops in autograd.hpp are thin
// wrappers around these; tests use them directly as forward references.
namespace repcn {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// floor((in + 2*padding - kernel) / stride) + 1; throws when non-positive.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel,
                               std::size_t stride, std::size_t padding);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, std::size_t stride, std::size_t padding);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
// Normalizes each of `groups` channel groups of an [B,C,...] tensor to zero
// mean and unit variance (biased variance, eps inside the sqrt). No affine.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, T eps);
template <typename T>
T mse(const Tensor<T>& a, const Tensor<T>& b);

namespace kernels {

// C[M,N] = A[M,K] * B[K,N] (+ C when accumulate), row-major with leading
// dimensions. Each output element sums over k in increasing order.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

// out[cols, rows] = in[rows, cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out);

struct ConvShape {
  std::size_t channels_in, height, width;
  std::size_t channels_out, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels_in * kernel_h * kernel_w; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

ConvShape conv_shape(const Shape& input, const Shape& kernel, std::size_t stride,
                     std::size_t padding);

// One image [Cin,H,W] -> columns [Cin*Kh*Kw, Hout*Wout].
template <typename T>
void im2col(const ConvShape& s, const T* image, T* columns);
// Adjoint of im2col; accumulates into image.
template <typename T>
void col2im(const ConvShape& s, const T* columns, T* image);

template <typename T>
void conv2d_forward(const ConvShape& s, std::size_t batch, const T* input,
                    const T* kernel, const T* bias, T* output);
// Accumulates into grad_input.
template <typename T>
void conv2d_backward_input(const ConvShape& s, std::size_t batch, const T* grad_out,
                           const T* kernel, T* grad_input);
// Accumulates into grad_kernel and grad_bias (either may be null).
template <typename T>
void conv2d_backward_params(const ConvShape& s, std::size_t batch, const T* input,
                            const T* grad_out, T* grad_kernel, T* grad_bias);

// Per (batch, group) statistics saved for the backward pass.
template <typename T>
struct GroupStats {
  std::vector<T> mean;
  std::vector<T> inv_std;
};

template <typename T>
GroupStats<T> group_norm_forward(const Tensor<T>& x, std::size_t groups, T eps,
                                 Tensor<T>& out);
// Accumulates into grad_x. `normalized` is the forward output.
template <typename T>
void group_norm_backward(const Tensor<T>& normalized, const GroupStats<T>& stats,
                         std::size_t groups, const Tensor<T>& grad_out,
                         Tensor<T>& grad_x);

}  // namespace kernels
}  // namespace repcn
