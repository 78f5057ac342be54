// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pkn/gemm.hpp"
#include "pkn/tensor.hpp"

namespace pkn {

namespace debug {

/// Multiplier applied to the conv2d weight gradient. Anything other than 1
/// corrupts the backward rule; used only to prove that gradient checking
/// catches a broken rule.
inline double& conv_weight_grad_scale() {
  static double scale = 1.0;
  return scale;
}

}  // namespace debug

namespace detail {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kernel, stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

inline std::size_t pooled_extent(const char* op, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (k == 0 || stride == 0) throw ConfigError(std::string(op) + ": kernel and stride must be positive");
  if (in + 2 * pad < k) {
    throw ConfigError(std::string(op) + ": window " + std::to_string(k) + " does not fit input extent " +
                      std::to_string(in) + " with padding " + std::to_string(pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// cols[patch, batch * positions]; column index = n * positions + oh * out_w + ow.
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t ncols = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t kh = 0; kh < g.kernel; ++kh)
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        T* row = cols + ((c * g.kernel + kh) * g.kernel + kw) * ncols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const T* plane = x + (n * g.channels + c) * g.height * g.width;
          T* dst = row + n * g.positions();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long ih = long(oh * g.stride + kh) - long(g.padding);
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long iw = long(ow * g.stride + kw) - long(g.padding);
              const bool inside = ih >= 0 && ih < long(g.height) && iw >= 0 && iw < long(g.width);
              dst[oh * g.out_w + ow] = inside ? plane[ih * g.width + iw] : T(0);
            }
          }
        }
      }
}

template <class T>
void col2im(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t ncols = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t kh = 0; kh < g.kernel; ++kh)
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        const T* row = cols + ((c * g.kernel + kh) * g.kernel + kw) * ncols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          T* plane = dx + (n * g.channels + c) * g.height * g.width;
          const T* src = row + n * g.positions();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long ih = long(oh * g.stride + kh) - long(g.padding);
            if (ih < 0 || ih >= long(g.height)) continue;
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long iw = long(ow * g.stride + kw) - long(g.padding);
              if (iw >= 0 && iw < long(g.width)) plane[ih * g.width + iw] += src[oh * g.out_w + ow];
            }
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution, NCHW input and OIKK weight, lowered to a single matmul
/// over the patch matrix of the whole batch.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected NCHW input and OIKK weight, got " + to_string(input.shape()) + " and " +
                         to_string(weight.shape()));
  }
  if (weight.dim(1) != input.dim(1) || weight.dim(2) != weight.dim(3)) {
    throw DimensionError("conv2d: weight " + to_string(weight.shape()) + " does not match input " +
                         to_string(input.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != weight.dim(0))) {
    throw DimensionError("conv2d: bias " + to_string(bias->shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
                         stride, padding, 0, 0};
  g.out_h = detail::pooled_extent("conv2d", g.height, g.kernel, stride, padding);
  g.out_w = detail::pooled_extent("conv2d", g.width, g.kernel, stride, padding);

  const std::size_t ncols = g.batch * g.positions();
  std::vector<T> cols(g.patch() * ncols);
  detail::im2col(g, input.values().data(), cols.data());
  std::vector<T> y(g.out_channels * ncols);
  detail::gemm_nn(g.out_channels, ncols, g.patch(), weight.values().data(), cols.data(), y.data(), false);

  std::vector<T> out(g.batch * g.out_channels * g.positions());
  const T* bv = bias ? bias->values().data() : nullptr;
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const T* src = y.data() + o * ncols + n * g.positions();
      T* dst = out.data() + (n * g.out_channels + o) * g.positions();
      const T b = bv ? bv[o] : T(0);
      for (std::size_t p = 0; p < g.positions(); ++p) dst[p] = src[p] + b;
    }

  auto xi = input.impl(), wi = weight.impl();
  auto bi = bias ? bias->impl() : nullptr;
  auto backward = [xi, wi, bi, g, cols = std::move(cols)](const std::vector<T>& grad) {
    const std::size_t ncols = g.batch * g.positions();
    std::vector<T> dy(g.out_channels * ncols);
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        const T* src = grad.data() + (n * g.out_channels + o) * g.positions();
        std::copy(src, src + g.positions(), dy.data() + o * ncols + n * g.positions());
      }
    if (wi->requires_grad) {
      auto& gw = wi->grad_buffer();
      const double fault = debug::conv_weight_grad_scale();
      if (fault == 1.0) {
        detail::gemm_nt(g.out_channels, g.patch(), ncols, dy.data(), cols.data(), gw.data(), true);
      } else {
        std::vector<T> tmp(gw.size());
        detail::gemm_nt(g.out_channels, g.patch(), ncols, dy.data(), cols.data(), tmp.data(), false);
        for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += T(fault) * tmp[i];
      }
    }
    if (bi && bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        T acc = 0;
        for (std::size_t c = 0; c < ncols; ++c) acc += dy[o * ncols + c];
        gb[o] += acc;
      }
    }
    if (xi->requires_grad) {
      std::vector<T> dcols(g.patch() * ncols);
      detail::gemm_tn(g.patch(), ncols, g.out_channels, wi->data.data(), dy.data(), dcols.data(), false);
      detail::col2im(g, dcols.data(), xi->grad_buffer().data());
    }
  };
  Shape shape{g.batch, g.out_channels, g.out_h, g.out_w};
  if (bias) return detail::make_result<T>(shape, std::move(out), "conv2d", {&input, &weight, &*bias}, std::move(backward));
  return detail::make_result<T>(shape, std::move(out), "conv2d", {&input, &weight}, std::move(backward));
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
  return conv2d(input, weight, std::optional<Tensor<T>>(bias), stride, padding);
}

namespace detail {

template <class T>
ConvGeometry pool_geometry(const char* op, const Tensor<T>& x, std::size_t k, std::size_t stride) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + ": expected NCHW input, got " + to_string(x.shape()));
  if (k > x.dim(2) || k > x.dim(3)) {
    throw ConfigError(std::string(op) + ": window " + std::to_string(k) + " larger than input " +
                      to_string(x.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(1), k, stride, 0, 0, 0};
  g.out_h = pooled_extent(op, g.height, k, stride, 0);
  g.out_w = pooled_extent(op, g.width, k, stride, 0);
  return g;
}

}  // namespace detail

template <class T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  auto g = detail::pool_geometry("avgpool2d", x, k, stride);
  const T inv = T(1) / T(k * k);
  std::vector<T> out(g.batch * g.channels * g.positions());
  const auto& xv = x.values();
  for (std::size_t nc = 0; nc < g.batch * g.channels; ++nc) {
    const T* plane = xv.data() + nc * g.height * g.width;
    for (std::size_t oh = 0; oh < g.out_h; ++oh)
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        T acc = 0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) acc += plane[(oh * stride + i) * g.width + ow * stride + j];
        out[nc * g.positions() + oh * g.out_w + ow] = acc * inv;
      }
  }
  auto xi = x.impl();
  return detail::make_result<T>({g.batch, g.channels, g.out_h, g.out_w}, std::move(out), "avgpool2d", {&x},
                                [xi, g, inv](const std::vector<T>& grad) {
                                  auto& gx = xi->grad_buffer();
                                  for (std::size_t nc = 0; nc < g.batch * g.channels; ++nc) {
                                    T* plane = gx.data() + nc * g.height * g.width;
                                    for (std::size_t oh = 0; oh < g.out_h; ++oh)
                                      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                                        const T v = grad[nc * g.positions() + oh * g.out_w + ow] * inv;
                                        for (std::size_t i = 0; i < g.kernel; ++i)
                                          for (std::size_t j = 0; j < g.kernel; ++j)
                                            plane[(oh * g.stride + i) * g.width + ow * g.stride + j] += v;
                                      }
                                  }
                                });
}

/// Max pooling; the gradient goes to the first maximal element in
/// row-major window order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  auto g = detail::pool_geometry("maxpool2d", x, k, stride);
  std::vector<T> out(g.batch * g.channels * g.positions());
  std::vector<std::size_t> argmax(out.size());
  const auto& xv = x.values();
  for (std::size_t nc = 0; nc < g.batch * g.channels; ++nc) {
    const std::size_t base = nc * g.height * g.width;
    for (std::size_t oh = 0; oh < g.out_h; ++oh)
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        std::size_t best = base + (oh * stride) * g.width + ow * stride;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = base + (oh * stride + i) * g.width + ow * stride + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = nc * g.positions() + oh * g.out_w + ow;
        out[o] = xv[best];
        argmax[o] = best;
      }
  }
  auto xi = x.impl();
  return detail::make_result<T>({g.batch, g.channels, g.out_h, g.out_w}, std::move(out), "maxpool2d", {&x},
                                [xi, argmax = std::move(argmax)](const std::vector<T>& grad) {
                                  auto& gx = xi->grad_buffer();
                                  for (std::size_t o = 0; o < grad.size(); ++o) gx[argmax[o]] += grad[o];
                                });
}

}  // namespace pkn
