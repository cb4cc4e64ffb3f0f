#include "repcn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace repcn {

std::size_t conv_output_extent(std::size_t in, std::size_t kernel,
                               std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t padded = in + 2 * padding;
  if (kernel == 0 || kernel > padded) {
    throw ShapeError("conv2d: kernel extent " + std::to_string(kernel) +
                     " exceeds padded input extent " + std::to_string(padded));
  }
  return (padded - kernel) / stride + 1;
}

namespace kernels {

namespace {

// C[4 x JB] tile held in locals across the whole k loop. Each element still
// accumulates a[i,0]b[0,j], a[i,1]b[1,j], ... in order.
template <typename T, std::size_t Rows, std::size_t JB>
inline void gemm_tile(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
                      T* c, std::size_t ldc) {
  T acc[Rows][JB];
  for (std::size_t r = 0; r < Rows; ++r) {
    for (std::size_t j = 0; j < JB; ++j) acc[r][j] = c[r * ldc + j];
  }
  for (std::size_t p = 0; p < k; ++p) {
    const T* __restrict row = b + p * ldb;
    for (std::size_t r = 0; r < Rows; ++r) {
      const T w = a[r * lda + p];
      for (std::size_t j = 0; j < JB; ++j) acc[r][j] += w * row[j];
    }
  }
  for (std::size_t r = 0; r < Rows; ++r) {
    for (std::size_t j = 0; j < JB; ++j) c[r * ldc + j] = acc[r][j];
  }
}

template <typename T, std::size_t Rows>
void gemm_rows(std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
               std::size_t ldb, T* c, std::size_t ldc) {
  constexpr std::size_t JB = 64 / sizeof(T) * 2;
  std::size_t j = 0;
  for (; j + JB <= n; j += JB) gemm_tile<T, Rows, JB>(k, a, lda, b + j, ldb, c + j, ldc);
  for (; j < n; ++j) {
    for (std::size_t r = 0; r < Rows; ++r) {
      T s = c[r * ldc + j];
      for (std::size_t p = 0; p < k; ++p) s += a[r * lda + p] * b[p * ldb + j];
      c[r * ldc + j] = s;
    }
  }
}

}  // namespace

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, T{0});
  }
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<T, 4>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc);
  for (; i < m; ++i) gemm_rows<T, 1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc);
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
  constexpr std::size_t kBlock = 16;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    const std::size_t r1 = std::min(rows, r0 + kBlock);
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
      }
    }
  }
}

ConvShape conv_shape(const Shape& input, const Shape& kernel, std::size_t stride,
                     std::size_t padding) {
  if (input.size() != 4 || kernel.size() != 4) {
    throw ShapeError("conv2d expects input [B,Cin,H,W] and kernel [Cout,Cin,Kh,Kw], got " +
                     to_string(input) + " and " + to_string(kernel));
  }
  if (input[1] != kernel[1]) {
    throw ShapeError("conv2d: input channels " + to_string(input) +
                     " do not match kernel " + to_string(kernel));
  }
  ConvShape s{};
  s.channels_in = input[1];
  s.height = input[2];
  s.width = input[3];
  s.channels_out = kernel[0];
  s.kernel_h = kernel[2];
  s.kernel_w = kernel[3];
  s.stride = stride;
  s.padding = padding;
  s.out_h = conv_output_extent(s.height, s.kernel_h, stride, padding);
  s.out_w = conv_output_extent(s.width, s.kernel_w, stride, padding);
  return s;
}

namespace {

bool is_pointwise(const ConvShape& s) {
  return s.kernel_h == 1 && s.kernel_w == 1 && s.stride == 1 && s.padding == 0;
}

}  // namespace

template <typename T>
void im2col(const ConvShape& s, const T* image, T* columns) {
  const std::size_t pixels = s.out_pixels();
  const long pad = static_cast<long>(s.padding);
  const long height = static_cast<long>(s.height);
  const long width = static_cast<long>(s.width);
  for (std::size_t c = 0; c < s.channels_in; ++c) {
    const T* plane = image + c * s.height * s.width;
    for (std::size_t ky = 0; ky < s.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < s.kernel_w; ++kx) {
        T* dst = columns + ((c * s.kernel_h + ky) * s.kernel_w + kx) * pixels;
        for (std::size_t oy = 0; oy < s.out_h; ++oy) {
          const long iy = static_cast<long>(oy * s.stride + ky) - pad;
          T* out_row = dst + oy * s.out_w;
          if (iy < 0 || iy >= height) {
            std::fill_n(out_row, s.out_w, T{0});
            continue;
          }
          const T* in_row = plane + iy * width;
          for (std::size_t ox = 0; ox < s.out_w; ++ox) {
            const long ix = static_cast<long>(ox * s.stride + kx) - pad;
            out_row[ox] = (ix < 0 || ix >= width) ? T{0} : in_row[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvShape& s, const T* columns, T* image) {
  const std::size_t pixels = s.out_pixels();
  const long pad = static_cast<long>(s.padding);
  const long height = static_cast<long>(s.height);
  const long width = static_cast<long>(s.width);
  for (std::size_t c = 0; c < s.channels_in; ++c) {
    T* plane = image + c * s.height * s.width;
    for (std::size_t ky = 0; ky < s.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < s.kernel_w; ++kx) {
        const T* src = columns + ((c * s.kernel_h + ky) * s.kernel_w + kx) * pixels;
        for (std::size_t oy = 0; oy < s.out_h; ++oy) {
          const long iy = static_cast<long>(oy * s.stride + ky) - pad;
          if (iy < 0 || iy >= height) continue;
          T* in_row = plane + iy * width;
          const T* col_row = src + oy * s.out_w;
          for (std::size_t ox = 0; ox < s.out_w; ++ox) {
            const long ix = static_cast<long>(ox * s.stride + kx) - pad;
            if (ix >= 0 && ix < width) in_row[ix] += col_row[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_forward(const ConvShape& s, std::size_t batch, const T* input,
                    const T* kernel, const T* bias, T* output) {
  const std::size_t in_size = s.channels_in * s.height * s.width;
  const std::size_t pixels = s.out_pixels();
  const std::size_t out_size = s.channels_out * pixels;
  const bool pointwise = is_pointwise(s);
  std::vector<T> columns(pointwise ? 0 : s.patch() * pixels);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* cols = input + b * in_size;
    if (!pointwise) {
      im2col(s, cols, columns.data());
      cols = columns.data();
    }
    T* out = output + b * out_size;
    for (std::size_t o = 0; o < s.channels_out; ++o) {
      std::fill_n(out + o * pixels, pixels, bias ? bias[o] : T{0});
    }
    gemm(s.channels_out, pixels, s.patch(), kernel, s.patch(), cols, pixels, out, pixels,
         true);
  }
}

template <typename T>
void conv2d_backward_input(const ConvShape& s, std::size_t batch, const T* grad_out,
                           const T* kernel, T* grad_input) {
  const std::size_t in_size = s.channels_in * s.height * s.width;
  const std::size_t pixels = s.out_pixels();
  const std::size_t out_size = s.channels_out * pixels;
  std::vector<T> kernel_t(s.patch() * s.channels_out);
  transpose(s.channels_out, s.patch(), kernel, kernel_t.data());
  const bool pointwise = is_pointwise(s);
  std::vector<T> columns(pointwise ? 0 : s.patch() * pixels);
  for (std::size_t b = 0; b < batch; ++b) {
    if (pointwise) {
      gemm(s.patch(), pixels, s.channels_out, kernel_t.data(), s.channels_out,
           grad_out + b * out_size, pixels, grad_input + b * in_size, pixels, true);
      continue;
    }
    gemm(s.patch(), pixels, s.channels_out, kernel_t.data(), s.channels_out,
         grad_out + b * out_size, pixels, columns.data(), pixels, false);
    col2im(s, columns.data(), grad_input + b * in_size);
  }
}

template <typename T>
void conv2d_backward_params(const ConvShape& s, std::size_t batch, const T* input,
                            const T* grad_out, T* grad_kernel, T* grad_bias) {
  const std::size_t in_size = s.channels_in * s.height * s.width;
  const std::size_t pixels = s.out_pixels();
  const std::size_t out_size = s.channels_out * pixels;
  const bool pointwise = is_pointwise(s);
  std::vector<T> columns(pointwise || !grad_kernel ? 0 : s.patch() * pixels);
  std::vector<T> columns_t(grad_kernel ? s.patch() * pixels : 0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* dout = grad_out + b * out_size;
    if (grad_bias) {
      for (std::size_t o = 0; o < s.channels_out; ++o) {
        T acc = 0;
        for (std::size_t p = 0; p < pixels; ++p) acc += dout[o * pixels + p];
        grad_bias[o] += acc;
      }
    }
    if (!grad_kernel) continue;
    const T* cols = input + b * in_size;
    if (!pointwise) {
      im2col(s, cols, columns.data());
      cols = columns.data();
    }
    transpose(s.patch(), pixels, cols, columns_t.data());
    gemm(s.channels_out, s.patch(), pixels, dout, pixels, columns_t.data(), s.patch(),
         grad_kernel, s.patch(), true);
  }
}

template <typename T>
GroupStats<T> group_norm_forward(const Tensor<T>& x, std::size_t groups, T eps,
                                 Tensor<T>& out) {
  if (x.rank() < 2) throw ShapeError("group_norm expects [B,C,...], got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0);
  const std::size_t channels = x.dim(1);
  if (groups == 0 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(groups) +
                     " groups do not divide " + std::to_string(channels) + " channels");
  }
  const std::size_t group_size = x.size() / (batch * groups);
  GroupStats<T> stats{std::vector<T>(batch * groups), std::vector<T>(batch * groups)};
  out = Tensor<T>(x.shape());
  for (std::size_t g = 0; g < batch * groups; ++g) {
    const T* src = x.raw() + g * group_size;
    T* dst = out.raw() + g * group_size;
    T sum = 0;
    for (std::size_t i = 0; i < group_size; ++i) sum += src[i];
    const T mean = sum / static_cast<T>(group_size);
    T sq = 0;
    for (std::size_t i = 0; i < group_size; ++i) {
      const T d = src[i] - mean;
      sq += d * d;
    }
    const T inv_std = T{1} / std::sqrt(sq / static_cast<T>(group_size) + eps);
    for (std::size_t i = 0; i < group_size; ++i) dst[i] = (src[i] - mean) * inv_std;
    stats.mean[g] = mean;
    stats.inv_std[g] = inv_std;
  }
  return stats;
}

template <typename T>
void group_norm_backward(const Tensor<T>& normalized, const GroupStats<T>& stats,
                         std::size_t groups, const Tensor<T>& grad_out,
                         Tensor<T>& grad_x) {
  const std::size_t count = stats.inv_std.size();
  const std::size_t group_size = normalized.size() / count;
  (void)groups;
  for (std::size_t g = 0; g < count; ++g) {
    const T* xhat = normalized.raw() + g * group_size;
    const T* dy = grad_out.raw() + g * group_size;
    T* dx = grad_x.raw() + g * group_size;
    T sum_dy = 0;
    T sum_dy_xhat = 0;
    for (std::size_t i = 0; i < group_size; ++i) {
      sum_dy += dy[i];
      sum_dy_xhat += dy[i] * xhat[i];
    }
    const T n = static_cast<T>(group_size);
    const T mean_dy = sum_dy / n;
    const T mean_dy_xhat = sum_dy_xhat / n;
    const T inv_std = stats.inv_std[g];
    for (std::size_t i = 0; i < group_size; ++i) {
      dx[i] += inv_std * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
    }
  }
}

}  // namespace kernels

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  kernels::gemm(a.dim(0), b.dim(1), a.dim(1), a.raw(), a.dim(1), b.raw(), b.dim(1),
                out.raw(), b.dim(1), false);
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  const auto s = kernels::conv_shape(input.shape(), kernel.shape(), stride, padding);
  if (bias.rank() != 1 || bias.dim(0) != s.channels_out) {
    throw ShapeError("conv2d: bias shape " + to_string(bias.shape()) +
                     " does not match kernel " + to_string(kernel.shape()));
  }
  Tensor<T> out({input.dim(0), s.channels_out, s.out_h, s.out_w});
  kernels::conv2d_forward(s, input.dim(0), input.raw(), kernel.raw(), bias.raw(),
                          out.raw());
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  out += b;
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "sub");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  out *= s;
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.data()) v = v / (T{1} + std::exp(-v));
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const T* src = x.raw() + o * n * inner + in;
      T* dst = out.raw() + o * n * inner + in;
      T peak = src[0];
      for (std::size_t i = 1; i < n; ++i) peak = std::max(peak, src[i * inner]);
      T total = 0;
      for (std::size_t i = 0; i < n; ++i) {
        dst[i * inner] = std::exp(src[i * inner] - peak);
        total += dst[i * inner];
      }
      for (std::size_t i = 0; i < n; ++i) dst[i * inner] /= total;
    }
  }
  return out;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, T eps) {
  Tensor<T> out;
  kernels::group_norm_forward(x, groups, eps, out);
  return out;
}

template <typename T>
T mse(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "mse");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<T>(a.size());
}

#define REPCN_INSTANTIATE(T)                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                            std::size_t, std::size_t);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                  \
  template Tensor<T> silu(const Tensor<T>&);                                           \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t, T);                     \
  template T mse(const Tensor<T>&, const Tensor<T>&);                                  \
  namespace kernels {                                                                  \
  template void gemm(std::size_t, std::size_t, std::size_t, const T*, std::size_t,     \
                     const T*, std::size_t, T*, std::size_t, bool);                    \
  template void transpose(std::size_t, std::size_t, const T*, T*);                     \
  template void im2col(const ConvShape&, const T*, T*);                                \
  template void col2im(const ConvShape&, const T*, T*);                                \
  template void conv2d_forward(const ConvShape&, std::size_t, const T*, const T*,      \
                               const T*, T*);                                          \
  template void conv2d_backward_input(const ConvShape&, std::size_t, const T*,         \
                                      const T*, T*);                                   \
  template void conv2d_backward_params(const ConvShape&, std::size_t, const T*,        \
                                       const T*, T*, T*);                              \
  template GroupStats<T> group_norm_forward(const Tensor<T>&, std::size_t, T,          \
                                            Tensor<T>&);                               \
  template void group_norm_backward(const Tensor<T>&, const GroupStats<T>&,            \
                                    std::size_t, const Tensor<T>&, Tensor<T>&);        \
  }

REPCN_INSTANTIATE(float)
REPCN_INSTANTIATE(double)

#undef REPCN_INSTANTIATE

}  // namespace repcn
