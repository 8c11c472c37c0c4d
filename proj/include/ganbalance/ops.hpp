#pragma once

// Differentiable layer primitives over NCHW tensors.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ganbalance/tensor.hpp"

namespace ganbalance {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t channels, height, width;  // image side
  std::size_t kh, kw, stride, padding;
  std::size_t out_h, out_w;             // column side
};

// Output columns [lo, hi) whose input column ow*stride + kj - padding lies
// inside the image.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t out, std::size_t extent, std::size_t k,
                                                      std::size_t stride, std::size_t padding) {
  const std::size_t lo = k >= padding ? 0 : (padding - k + stride - 1) / stride;
  const std::size_t hi = extent + padding <= k ? 0 : std::min(out, (extent + padding - k + stride - 1) / stride);
  return {std::min(lo, hi), hi};
}

// cols: [channels*kh*kw, out_h*out_w], rows `ld` apart (ld >= out_h*out_w
// lets several samples share one column matrix).
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols, std::size_t ld = 0) {
  const std::size_t plane = ld ? ld : g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const auto [oh_lo, oh_hi] = valid_span(g.out_h, g.height, ki, g.stride, g.padding);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const auto [ow_lo, ow_hi] = valid_span(g.out_w, g.width, kj, g.stride, g.padding);
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        std::fill(row, row + oh_lo * g.out_w, T(0));
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          const std::size_t ih = oh * g.stride + ki - g.padding;
          T* dst = row + oh * g.out_w;
          const T* src = image + (c * g.height + ih) * g.width + (ow_lo * g.stride + kj - g.padding);
          std::fill(dst, dst + ow_lo, T(0));
          if (g.stride == 1) {
            std::copy(src, src + (ow_hi - ow_lo), dst + ow_lo);
          } else {
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow, src += g.stride) dst[ow] = *src;
          }
          std::fill(dst + ow_hi, dst + g.out_w, T(0));
        }
        std::fill(row + oh_hi * g.out_w, row + g.out_h * g.out_w, T(0));
      }
    }
  }
}

// Adjoint of im2col: scatters columns back, accumulating into image.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* image, std::size_t ld = 0) {
  const std::size_t plane = ld ? ld : g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const auto [oh_lo, oh_hi] = valid_span(g.out_h, g.height, ki, g.stride, g.padding);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const auto [ow_lo, ow_hi] = valid_span(g.out_w, g.width, kj, g.stride, g.padding);
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          const std::size_t ih = oh * g.stride + ki - g.padding;
          const T* src = row + oh * g.out_w;
          T* dst = image + (c * g.height + ih) * g.width + (ow_lo * g.stride + kj - g.padding);
          for (std::size_t ow = ow_lo; ow < ow_hi; ++ow, dst += g.stride) *dst += src[ow];
        }
      }
    }
  }
}

// Samples per column chunk: keeps the shared column matrix cache-sized.
inline std::size_t conv_chunk(std::size_t n, std::size_t per_sample) {
  constexpr std::size_t kTarget = std::size_t{1} << 16;
  return std::max<std::size_t>(1, std::min(n, kTarget / std::max<std::size_t>(per_sample, 1)));
}

// [n, c, plane] block rows s0..s0+nb  <->  [c, nb*plane]
template <typename T>
void gather_channels(const T* src, std::size_t s0, std::size_t nb, std::size_t c, std::size_t plane, T* dst) {
  const std::size_t ld = nb * plane;
  for (std::size_t j = 0; j < nb; ++j)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(src + ((s0 + j) * c + ch) * plane, plane, dst + ch * ld + j * plane);
}

inline void require_rank(const Shape& shape, std::size_t rank, const char* op, const char* what) {
  if (shape.size() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + to_string(shape));
}

}  // namespace detail

/// Cross-correlation (no kernel flip) with zero padding.
/// input [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  detail::require_rank(input.shape(), 4, "conv2d", "input");
  detail::require_rank(weight.shape(), 4, "conv2d", "weight");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin)
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels but weight " +
                     to_string(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  if (bias.shape() != Shape{cout})
    throw ShapeError("conv2d: bias shape " + to_string(bias.shape()) + " != [" +
                     std::to_string(cout) + "]");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw ShapeError("conv2d: kernel " + to_string(weight.shape()) +
                     " larger than padded input " + to_string(input.shape()));

  const detail::ConvGeometry g{cin, h, w, kh, kw, stride, padding,
                               (h + 2 * padding - kh) / stride + 1,
                               (w + 2 * padding - kw) / stride + 1};
  const std::size_t k = cin * kh * kw, plane = g.out_h * g.out_w, in_plane = h * w;
  const std::size_t chunk = detail::conv_chunk(n, k * plane);
  Buffer<T> out(n * cout * plane);
  Buffer<T> cols(k * chunk * plane), ochunk(cout * chunk * plane);
  detail::ConstMapMat<T> wmat(weight.data().data(), cout, k);
  for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
    const std::size_t nb = std::min(chunk, n - s0), ld = nb * plane;
    for (std::size_t j = 0; j < nb; ++j)
      detail::im2col(input.data().data() + (s0 + j) * cin * in_plane, g, cols.data() + j * plane, ld);
    detail::MapMat<T>(ochunk.data(), cout, ld).noalias() = wmat * detail::ConstMapMat<T>(cols.data(), k, ld);
    for (std::size_t j = 0; j < nb; ++j)
      for (std::size_t c = 0; c < cout; ++c) {
        const T* src = ochunk.data() + c * ld + j * plane;
        T* dst = out.data() + ((s0 + j) * cout + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + bias[c];
      }
  }

  return BasicTensor<T>::from_op(
      "conv2d", Shape{n, cout, g.out_h, g.out_w}, std::move(out), {input, weight, bias},
      [g, n, cout, k, plane, in_plane, chunk](auto& self) {
        auto& x = *self.inputs[0];
        auto& wt = *self.inputs[1];
        auto& b = *self.inputs[2];
        Buffer<T> cols(k * chunk * plane), dch(cout * chunk * plane);
        detail::ConstMapMat<T> wmat(wt.data.data(), cout, k);
        if (b.requires_grad) {
          auto& db = b.grad_buffer();
          for (std::size_t c = 0; c < cout; ++c) {
            double acc = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
              const T* d = self.grad.data() + (s * cout + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) acc += d[i];
            }
            db[c] += static_cast<T>(acc);
          }
        }
        if (!wt.requires_grad && !x.requires_grad) return;
        for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
          const std::size_t nb = std::min(chunk, n - s0), ld = nb * plane;
          detail::gather_channels(self.grad.data(), s0, nb, cout, plane, dch.data());
          detail::ConstMapMat<T> dout(dch.data(), cout, ld);
          if (wt.requires_grad) {
            for (std::size_t j = 0; j < nb; ++j)
              detail::im2col(x.data.data() + (s0 + j) * g.channels * in_plane, g, cols.data() + j * plane, ld);
            detail::MapMat<T> dw(wt.grad_buffer().data(), cout, k);
            dw.noalias() += dout * detail::ConstMapMat<T>(cols.data(), k, ld).transpose();
          }
          if (x.requires_grad) {
            detail::MapMat<T>(cols.data(), k, ld).noalias() = wmat.transpose() * dout;
            for (std::size_t j = 0; j < nb; ++j)
              detail::col2im(cols.data() + j * plane, g, x.grad_buffer().data() + (s0 + j) * g.channels * in_plane,
                             ld);
          }
        }
      });
}

/// Fractionally-strided convolution: the input-adjoint of conv2d with the same
/// stride and padding. input [N,Cin,H,W], weight [Cin,Cout,kh,kw], bias [Cout];
/// output extent (H-1)*stride - 2*padding + kh.
template <typename T>
BasicTensor<T> conv2d_transpose(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias, std::size_t stride,
                                std::size_t padding) {
  detail::require_rank(input.shape(), 4, "conv2d_transpose", "input");
  detail::require_rank(weight.shape(), 4, "conv2d_transpose", "weight");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(0) != cin)
    throw ShapeError("conv2d_transpose: input has " + std::to_string(cin) +
                     " channels but weight " + to_string(weight.shape()) + " expects " +
                     std::to_string(weight.dim(0)));
  if (bias.shape() != Shape{cout})
    throw ShapeError("conv2d_transpose: bias shape " + to_string(bias.shape()) + " != [" +
                     std::to_string(cout) + "]");
  if (stride < 1) throw ShapeError("conv2d_transpose: stride must be >= 1");
  const auto out_h = static_cast<std::ptrdiff_t>((h - 1) * stride + kh) -
                     static_cast<std::ptrdiff_t>(2 * padding);
  const auto out_w = static_cast<std::ptrdiff_t>((w - 1) * stride + kw) -
                     static_cast<std::ptrdiff_t>(2 * padding);
  if (out_h <= 0 || out_w <= 0)
    throw ShapeError("conv2d_transpose: non-positive output extent for input " +
                     to_string(input.shape()) + " and weight " + to_string(weight.shape()));

  const detail::ConvGeometry g{cout, static_cast<std::size_t>(out_h),
                               static_cast<std::size_t>(out_w), kh, kw, stride, padding, h, w};
  const std::size_t k = cout * kh * kw, plane = h * w, out_plane = g.height * g.width;
  const std::size_t chunk = detail::conv_chunk(n, k * plane);
  Buffer<T> out(n * cout * out_plane, T(0));
  Buffer<T> cols(k * chunk * plane), xch(cin * chunk * plane);
  detail::ConstMapMat<T> wmat(weight.data().data(), cin, k);
  for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
    const std::size_t nb = std::min(chunk, n - s0), ld = nb * plane;
    detail::gather_channels(input.data().data(), s0, nb, cin, plane, xch.data());
    detail::MapMat<T>(cols.data(), k, ld).noalias() =
        wmat.transpose() * detail::ConstMapMat<T>(xch.data(), cin, ld);
    for (std::size_t j = 0; j < nb; ++j) {
      T* dst = out.data() + (s0 + j) * cout * out_plane;
      detail::col2im(cols.data() + j * plane, g, dst, ld);
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t i = 0; i < out_plane; ++i) dst[c * out_plane + i] += bias[c];
    }
  }

  return BasicTensor<T>::from_op(
      "conv2d_transpose", Shape{n, cout, g.height, g.width}, std::move(out),
      {input, weight, bias}, [g, n, cin, cout, k, plane, out_plane, chunk](auto& self) {
        auto& x = *self.inputs[0];
        auto& wt = *self.inputs[1];
        auto& b = *self.inputs[2];
        if (b.requires_grad) {
          auto& db = b.grad_buffer();
          for (std::size_t c = 0; c < cout; ++c) {
            double acc = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
              const T* d = self.grad.data() + (s * cout + c) * out_plane;
              for (std::size_t i = 0; i < out_plane; ++i) acc += d[i];
            }
            db[c] += static_cast<T>(acc);
          }
        }
        if (!x.requires_grad && !wt.requires_grad) return;
        Buffer<T> dcols(k * chunk * plane), xch(cin * chunk * plane);
        detail::ConstMapMat<T> wmat(wt.data.data(), cin, k);
        for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
          const std::size_t nb = std::min(chunk, n - s0), ld = nb * plane;
          for (std::size_t j = 0; j < nb; ++j)
            detail::im2col(self.grad.data() + (s0 + j) * cout * out_plane, g, dcols.data() + j * plane, ld);
          detail::ConstMapMat<T> dc(dcols.data(), k, ld);
          if (x.requires_grad) {
            detail::MapMat<T>(xch.data(), cin, ld).noalias() = wmat * dc;
            auto& gx = x.grad_buffer();
            for (std::size_t j = 0; j < nb; ++j)
              for (std::size_t c = 0; c < cin; ++c) {
                const T* src = xch.data() + c * ld + j * plane;
                T* dst = gx.data() + ((s0 + j) * cin + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
              }
          }
          if (wt.requires_grad) {
            detail::gather_channels(x.data.data(), s0, nb, cin, plane, xch.data());
            detail::MapMat<T> dw(wt.grad_buffer().data(), cin, k);
            dw.noalias() += detail::ConstMapMat<T>(xch.data(), cin, ld) * dc.transpose();
          }
        }
      });
}

/// Non-overlapping 2x2 max pooling. Backward routes each window's gradient to
/// its first row-major maximum.
template <typename T>
BasicTensor<T> maxpool2x2(const BasicTensor<T>& input) {
  detail::require_rank(input.shape(), 4, "maxpool2x2", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("maxpool2x2: spatial extents must be even, got " + to_string(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  Buffer<T> out(n * c * oh * ow);
  std::vector<std::uint32_t> argmax(out.size());
  const auto src = input.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = src.data() + p * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t window[4] = {(2 * i) * w + 2 * j, (2 * i) * w + 2 * j + 1,
                                       (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1};
        std::size_t best = window[0];
        for (std::size_t q = 1; q < 4; ++q)
          if (plane[window[q]] > plane[best]) best = window[q];
        const std::size_t o = p * oh * ow + i * ow + j;
        out[o] = plane[best];
        argmax[o] = static_cast<std::uint32_t>(p * h * w + best);
      }
    }
  }
  return BasicTensor<T>::from_op("maxpool2x2", Shape{n, c, oh, ow}, std::move(out), {input},
                                 [argmax = std::move(argmax)](auto& self) {
                                   auto& g = self.inputs[0]->grad_buffer();
                                   for (std::size_t o = 0; o < argmax.size(); ++o)
                                     g[argmax[o]] += self.grad[o];
                                 });
}

enum class Activation { relu, leaky_relu, tanh, sigmoid };

inline std::string to_string(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

template <typename T>
T logistic(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// Elementwise activation. `slope` is the negative-side slope of leaky_relu.
template <typename T>
BasicTensor<T> apply_activation(const BasicTensor<T>& input, Activation kind, T slope = T(0.2)) {
  const auto x = input.data();
  const std::size_t n = x.size();
  Buffer<T> out(n);
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::max(x[i], T(0));
      break;
    case Activation::leaky_relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::max(x[i], T(0)) + slope * std::min(x[i], T(0));
      break;
    case Activation::tanh:  // libm tanhf is an order of magnitude slower here
      Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(out.data(), static_cast<Eigen::Index>(n)) =
          Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(x.data(), static_cast<Eigen::Index>(n)).tanh();
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = logistic(x[i]);
      break;
  }
  return BasicTensor<T>::from_op(to_string(kind), input.shape(), std::move(out), {input},
                                 [kind, slope](auto& self) {
                                   auto& in = *self.inputs[0];
                                   T* g = in.grad_buffer().data();
                                   const T* dy = self.grad.data();
                                   const T* xi = in.data.data();
                                   const T* y = self.data.data();
                                   const std::size_t m = self.data.size();
                                   switch (kind) {
                                     case Activation::relu:
                                       for (std::size_t i = 0; i < m; ++i) g[i] += xi[i] > T(0) ? dy[i] : T(0);
                                       break;
                                     case Activation::leaky_relu:
                                       for (std::size_t i = 0; i < m; ++i) g[i] += dy[i] * (xi[i] > T(0) ? T(1) : slope);
                                       break;
                                     case Activation::tanh:
                                       for (std::size_t i = 0; i < m; ++i) g[i] += dy[i] * (T(1) - y[i] * y[i]);
                                       break;
                                     case Activation::sigmoid:
                                       for (std::size_t i = 0; i < m; ++i) g[i] += dy[i] * y[i] * (T(1) - y[i]);
                                       break;
                                   }
                                 });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) { return apply_activation(x, Activation::relu); }
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) { return apply_activation(x, Activation::sigmoid); }

/// Fully connected layer: input [N,K] x weight [K,M] + bias [M].
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                     const BasicTensor<T>& bias) {
  detail::require_rank(input.shape(), 2, "dense", "input");
  detail::require_rank(weight.shape(), 2, "dense", "weight");
  const std::size_t n = input.dim(0), k = input.dim(1), m = weight.dim(1);
  if (weight.dim(0) != k)
    throw ShapeError("dense: input " + to_string(input.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  if (bias.shape() != Shape{m})
    throw ShapeError("dense: bias shape " + to_string(bias.shape()) + " != [" +
                     std::to_string(m) + "]");
  Buffer<T> out(n * m);
  detail::MapMat<T> y(out.data(), n, m);
  y.noalias() = detail::ConstMapMat<T>(input.data().data(), n, k) *
                detail::ConstMapMat<T>(weight.data().data(), k, m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) y(r, c) += bias[c];
  return BasicTensor<T>::from_op(
      "dense", Shape{n, m}, std::move(out), {input, weight, bias}, [n, k, m](auto& self) {
        auto& x = *self.inputs[0];
        auto& wt = *self.inputs[1];
        auto& b = *self.inputs[2];
        detail::ConstMapMat<T> dy(self.grad.data(), n, m);
        if (x.requires_grad)
          detail::MapMat<T>(x.grad_buffer().data(), n, k).noalias() +=
              dy * detail::ConstMapMat<T>(wt.data.data(), k, m).transpose();
        if (wt.requires_grad)
          detail::MapMat<T>(wt.grad_buffer().data(), k, m).noalias() +=
              detail::ConstMapMat<T>(x.data.data(), n, k).transpose() * dy;
        if (b.requires_grad) {
          auto& db = b.grad_buffer();
          for (std::size_t c = 0; c < m; ++c) db[c] += dy.col(c).sum();
        }
      });
}

/// Row-wise softmax over [N,C], computed with max subtraction.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& input) {
  detail::require_rank(input.shape(), 2, "softmax", "input");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const auto x = input.data();
  Buffer<T> out(x.size());
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = x.data() + r * c;
    const T peak = *std::max_element(row, row + c);
    double total = 0.0;
    std::vector<double> e(c);
    for (std::size_t j = 0; j < c; ++j) total += e[j] = std::exp(static_cast<double>(row[j] - peak));
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = static_cast<T>(e[j] / total);
  }
  return BasicTensor<T>::from_op("softmax", input.shape(), std::move(out), {input},
                                 [n, c](auto& self) {
                                   auto& g = self.inputs[0]->grad_buffer();
                                   const auto& y = self.data;
                                   for (std::size_t r = 0; r < n; ++r) {
                                     double dot = 0.0;
                                     for (std::size_t j = 0; j < c; ++j)
                                       dot += static_cast<double>(self.grad[r * c + j]) * y[r * c + j];
                                     for (std::size_t j = 0; j < c; ++j)
                                       g[r * c + j] += static_cast<T>(
                                           y[r * c + j] * (self.grad[r * c + j] - dot));
                                   }
                                 });
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean negative log-likelihood of the labelled class; probabilities are
/// clamped below at kProbabilityFloor.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& probs, std::span<const int> labels) {
  detail::require_rank(probs.shape(), 2, "cross_entropy", "probs");
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  if (labels.size() != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  std::vector<int> owned(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (owned[r] < 0 || static_cast<std::size_t>(owned[r]) >= c)
      throw std::out_of_range("cross_entropy: label " + std::to_string(owned[r]) +
                              " outside [0," + std::to_string(c) + ")");
    const double p = std::max<double>(probs[r * c + static_cast<std::size_t>(owned[r])],
                                      kProbabilityFloor);
    total -= std::log(p);
  }
  return BasicTensor<T>::from_op(
      "cross_entropy", Shape{1}, {static_cast<T>(total / static_cast<double>(n))}, {probs},
      [n, c, owned = std::move(owned)](auto& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t r = 0; r < n; ++r) {
          const std::size_t idx = r * c + static_cast<std::size_t>(owned[r]);
          const double p = in.data[idx];
          if (p > kProbabilityFloor)
            g[idx] += static_cast<T>(-self.grad[0] / (static_cast<double>(n) * p));
        }
      });
}

/// Mean binary cross-entropy of sigmoid(logits) against a constant target,
/// evaluated in the overflow-free softplus form.
template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, T target) {
  const auto o = logits.data();
  double total = 0.0;
  for (auto v : o) {
    const double x = v;
    total += std::max(x, 0.0) - x * target + std::log1p(std::exp(-std::abs(x)));
  }
  const double count = static_cast<double>(o.size());
  return BasicTensor<T>::from_op("bce_with_logits", Shape{1},
                                 {static_cast<T>(total / count)}, {logits},
                                 [target, count](auto& self) {
                                   auto& in = *self.inputs[0];
                                   auto& g = in.grad_buffer();
                                   const double scale = self.grad[0] / count;
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                     g[i] += static_cast<T>((logistic<double>(in.data[i]) - target) * scale);
                                 });
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class NormMode { train, eval };

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel normalization of [N,C,H,W] (or [N,C]) followed by gamma/beta.
/// Train mode normalizes with batch statistics and folds them into the running
/// estimates; eval mode uses the running estimates.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, BatchNormState<T>& state, NormMode mode) {
  if (input.rank() != 4 && input.rank() != 2)
    throw ShapeError("batchnorm2d: input must be [N,C,H,W] or [N,C], got " + to_string(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t spatial = input.size() / (n * c);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError("batchnorm2d: gamma/beta must be [" + std::to_string(c) + "]");
  if (state.running_mean.size() != c || state.running_var.size() != c)
    throw ShapeError("batchnorm2d: running statistics sized for " +
                     std::to_string(state.running_mean.size()) + " channels, input has " +
                     std::to_string(c));
  const std::size_t count = n * spatial;
  if (mode == NormMode::train && count < 2)
    throw ShapeError("batchnorm2d: train mode needs at least two values per channel, got " +
                     to_string(input.shape()));

  const auto x = input.data();
  Buffer<T> out(x.size()), xhat(x.size()), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == NormMode::train) {
      double acc = 0.0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < spatial; ++i) acc += x[(s * c + ch) * spatial + i];
      mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < spatial; ++i) {
          const double d = x[(s * c + ch) * spatial + i] - mu;
          sq += d * d;
        }
      var = sq / static_cast<double>(count);
      state.running_mean[ch] = static_cast<T>(state.momentum * state.running_mean[ch] +
                                              (1.0 - state.momentum) * mu);
      state.running_var[ch] = static_cast<T>(state.momentum * state.running_var[ch] +
                                             (1.0 - state.momentum) * var);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const double istd = 1.0 / std::sqrt(var + state.eps);
    inv_std[ch] = static_cast<T>(istd);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < spatial; ++i) {
        const std::size_t idx = (s * c + ch) * spatial + i;
        xhat[idx] = static_cast<T>((x[idx] - mu) * istd);
        out[idx] = gamma[ch] * xhat[idx] + beta[ch];
      }
  }

  const bool batch_stats = mode == NormMode::train;
  return BasicTensor<T>::from_op(
      "batchnorm2d", input.shape(), std::move(out), {input, gamma, beta},
      [n, c, spatial, count, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          auto& self) {
        auto& in = *self.inputs[0];
        auto& ga = *self.inputs[1];
        auto& be = *self.inputs[2];
        const auto& dy = self.grad;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < spatial; ++i) {
              const std::size_t idx = (s * c + ch) * spatial + i;
              sum_dy += dy[idx];
              sum_dy_xhat += static_cast<double>(dy[idx]) * xhat[idx];
            }
          if (ga.requires_grad) ga.grad_buffer()[ch] += static_cast<T>(sum_dy_xhat);
          if (be.requires_grad) be.grad_buffer()[ch] += static_cast<T>(sum_dy);
          if (!in.requires_grad) continue;
          auto& g = in.grad_buffer();
          const double scale = static_cast<double>(ga.data[ch]) * inv_std[ch];
          const double m = static_cast<double>(count);
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < spatial; ++i) {
              const std::size_t idx = (s * c + ch) * spatial + i;
              if (batch_stats)
                g[idx] += static_cast<T>(scale * (dy[idx] - sum_dy / m -
                                                  xhat[idx] * sum_dy_xhat / m));
              else
                g[idx] += static_cast<T>(scale * dy[idx]);
            }
        }
      });
}

}  // namespace ganbalance
