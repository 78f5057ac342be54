// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pkn/conv.hpp"
#include "pkn/ops.hpp"

namespace pkn {

/// Learnable state of one polynomial-kernel convolution layer.
///
/// The kernel is (x.w + balance)^degree + bias, and the regularized variant
/// multiplies the whole kernel by `scale`. `balance` and `scale` are scalars
/// shared by every output channel; `bias` has one entry per output channel.
template <class T>
struct PolyKervParams {
  int degree = 2;
  Tensor<T> balance;
  Tensor<T> bias;
  Tensor<T> scale;

  static PolyKervParams make(int degree, T balance, std::size_t out_channels, T scale = T(1),
                             bool requires_grad = true) {
    if (degree < 1) throw ConfigError("polykerv: degree must be >= 1, got " + std::to_string(degree));
    if (!(balance >= T(0))) {
      throw ConfigError("polykerv: balance factor must start non-negative, got " + std::to_string(double(balance)));
    }
    if (!(scale > T(0))) {
      throw ConfigError("polykerv: regularizing factor must start positive, got " + std::to_string(double(scale)));
    }
    return {degree, Tensor<T>::scalar(balance, requires_grad), Tensor<T>::zeros({out_channels}, requires_grad),
            Tensor<T>::scalar(scale, requires_grad)};
  }
};

/// Per output element: (patch . weight[o] + balance)^degree + bias[o].
template <class T>
Tensor<T> polykerv2d(const Tensor<T>& input, const Tensor<T>& weight, const PolyKervParams<T>& params,
                     std::size_t stride = 1, std::size_t padding = 0) {
  if (params.degree < 1) throw ConfigError("polykerv2d: degree must be >= 1, got " + std::to_string(params.degree));
  auto linear = conv2d(input, weight, std::optional<Tensor<T>>{}, stride, padding);
  return add_bias(pow(add(linear, params.balance), params.degree), params.bias);
}

/// scale * ((patch . weight[o] + balance)^degree + bias[o]).
template <class T>
Tensor<T> rpolykerv2d(const Tensor<T>& input, const Tensor<T>& weight, const PolyKervParams<T>& params,
                      std::size_t stride = 1, std::size_t padding = 0) {
  return mul(polykerv2d(input, weight, params, stride, padding), params.scale);
}

/// Coefficients, constant term first, of scale * (z + balance)^degree as a
/// polynomial in z (bias-free kernel).
inline std::vector<double> expand_rpkn(int degree, double scale, double balance) {
  if (degree < 1) throw ConfigError("expand_rpkn: degree must be >= 1, got " + std::to_string(degree));
  std::vector<double> coeffs(degree + 1);
  double binom = 1;
  for (int i = 0; i <= degree; ++i) {
    coeffs[i] = scale * binom * std::pow(balance, degree - i);
    binom = binom * (degree - i) / (i + 1);
  }
  return coeffs;
}

/// Horner evaluation of coefficients stored constant term first.
inline double evaluate_polynomial(const std::vector<double>& coeffs, double z) {
  double acc = 0;
  for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * z + *it;
  return acc;
}

/// Coefficients of the learnable quadratic activation a*x^2 + b*x + c.
template <class T>
struct ReactPknParams {
  Tensor<T> a;
  Tensor<T> b;
  Tensor<T> c;

  static ReactPknParams make(T a, T b, T c, bool requires_grad = true) {
    return {Tensor<T>::scalar(a, requires_grad), Tensor<T>::scalar(b, requires_grad),
            Tensor<T>::scalar(c, requires_grad)};
  }

  /// The degree-2 expansion of scale * (z + balance)^2: (scale, 2*scale*balance, scale*balance^2).
  static ReactPknParams from_kernel(T scale, T balance, bool requires_grad = true) {
    return make(scale, T(2) * scale * balance, scale * balance * balance, requires_grad);
  }
};

template <class T>
Tensor<T> react_pkn(const Tensor<T>& x, const ReactPknParams<T>& params) {
  return quadratic(x, params.a, params.b, params.c);
}

}  // namespace pkn
