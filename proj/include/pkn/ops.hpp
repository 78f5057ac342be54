// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "pkn/gemm.hpp"
#include "pkn/tensor.hpp"

namespace pkn {

namespace detail {

enum class Broadcast { none, lhs_scalar, rhs_scalar };

inline bool is_scalar_shape(const Shape& s) { return s.size() == 1 && s[0] == 1; }

template <class T>
Broadcast check_binary(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (is_scalar_shape(b.shape())) return Broadcast::rhs_scalar;
  if (is_scalar_shape(a.shape())) return Broadcast::lhs_scalar;
  throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                       " do not conform (only tensor-scalar broadcasting is supported)");
}

template <class T>
T ipow(T x, int n) {
  T r = T(1);
  for (int i = 0; i < n; ++i) r *= x;
  return r;
}

template <class Fn>
void for_broadcast(Broadcast mode, std::size_t n, Fn&& fn) {
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, mode == Broadcast::lhs_scalar ? 0 : i, mode == Broadcast::rhs_scalar ? 0 : i);
  }
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto mode = detail::check_binary("add", a, b);
  const Shape shape = mode == detail::Broadcast::lhs_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_broadcast(mode, n, [&](auto i, auto ia, auto ib) { out[i] = av[ia] + bv[ib]; });
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(shape, std::move(out), "add", {&a, &b}, [ai, bi, mode, n](const std::vector<T>& g) {
    if (ai->requires_grad) {
      auto& ga = ai->grad_buffer();
      detail::for_broadcast(mode, n, [&](auto i, auto ia, auto) { ga[ia] += g[i]; });
    }
    if (bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      detail::for_broadcast(mode, n, [&](auto i, auto, auto ib) { gb[ib] += g[i]; });
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto mode = detail::check_binary("sub", a, b);
  const Shape shape = mode == detail::Broadcast::lhs_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_broadcast(mode, n, [&](auto i, auto ia, auto ib) { out[i] = av[ia] - bv[ib]; });
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(shape, std::move(out), "sub", {&a, &b}, [ai, bi, mode, n](const std::vector<T>& g) {
    if (ai->requires_grad) {
      auto& ga = ai->grad_buffer();
      detail::for_broadcast(mode, n, [&](auto i, auto ia, auto) { ga[ia] += g[i]; });
    }
    if (bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      detail::for_broadcast(mode, n, [&](auto i, auto, auto ib) { gb[ib] -= g[i]; });
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto mode = detail::check_binary("mul", a, b);
  const Shape shape = mode == detail::Broadcast::lhs_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_broadcast(mode, n, [&](auto i, auto ia, auto ib) { out[i] = av[ia] * bv[ib]; });
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(shape, std::move(out), "mul", {&a, &b}, [ai, bi, mode, n](const std::vector<T>& g) {
    const auto& av = ai->data;
    const auto& bv = bi->data;
    if (ai->requires_grad) {
      auto& ga = ai->grad_buffer();
      detail::for_broadcast(mode, n, [&](auto i, auto ia, auto ib) { ga[ia] += g[i] * bv[ib]; });
    }
    if (bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      detail::for_broadcast(mode, n, [&](auto i, auto ia, auto ib) { gb[ib] += g[i] * av[ia]; });
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, std::type_identity_t<T> s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v += s;
  auto ai = a.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "add_scalar", {&a}, [ai](const std::vector<T>& g) {
    auto& ga = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, std::type_identity_t<T> s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  auto ai = a.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "mul_scalar", {&a}, [ai, s](const std::vector<T>& g) {
    auto& ga = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

/// x^n by repeated multiplication, valid for negative bases.
template <class T>
Tensor<T> pow(const Tensor<T>& a, int n) {
  if (n < 0) throw ConfigError("pow: exponent must be non-negative, got " + std::to_string(n));
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::ipow(av[i], n);
  auto ai = a.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "pow", {&a}, [ai, n](const std::vector<T>& g) {
    if (n == 0) return;
    auto& ga = ai->grad_buffer();
    const auto& av = ai->data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * T(n) * detail::ipow(av[i], n - 1);
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  auto ai = a.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "relu", {&a}, [ai](const std::vector<T>& g) {
    auto& ga = ai->grad_buffer();
    const auto& av = ai->data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > T(0)) ga[i] += g[i];
  });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " do not conform");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.data(), false);
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>({m, n}, std::move(out), "matmul", {&a, &b}, [ai, bi, m, n, k](const std::vector<T>& g) {
    if (ai->requires_grad) detail::gemm_nt(m, k, n, g.data(), bi->data.data(), ai->grad_buffer().data(), true);
    if (bi->requires_grad) detail::gemm_tn(k, n, m, ai->data.data(), g.data(), bi->grad_buffer().data(), true);
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  const auto& av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  auto ai = a.impl();
  return detail::make_result<T>({c, r}, std::move(out), "transpose", {&a}, [ai, r, c](const std::vector<T>& g) {
    auto& ga = ai->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  auto ai = a.impl();
  return detail::make_result<T>(std::move(shape), a.values(), "reshape", {&a}, [ai](const std::vector<T>& g) {
    auto& ga = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// [N, ...] -> [N, rest]
template <class T>
Tensor<T> flatten(const Tensor<T>& a) {
  return reshape(a, Shape{a.dim(0), a.numel() / a.dim(0)});
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0;
  for (auto v : a.values()) acc += v;
  auto ai = a.impl();
  return detail::make_result<T>({1}, {T(acc)}, "sum", {&a}, [ai](const std::vector<T>& g) {
    auto& ga = ai->grad_buffer();
    for (auto& v : ga) v += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0;
  for (auto v : a.values()) acc += v;
  const T inv = T(1) / T(a.numel());
  auto ai = a.impl();
  return detail::make_result<T>({1}, {T(acc) * inv}, "mean", {&a}, [ai, inv](const std::vector<T>& g) {
    auto& ga = ai->grad_buffer();
    for (auto& v : ga) v += g[0] * inv;
  });
}

namespace detail {

template <class T>
void check_rows(const char* op, const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 input, got " + to_string(x.shape()));
}

template <class T>
std::vector<T> row_softmax(const std::vector<T>& x, std::size_t rows, std::size_t cols) {
  std::vector<T> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* out = y.data() + r * cols;
    T mx = *std::max_element(in, in + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += (out[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) out[c] /= z;
  }
  return y;
}

template <class T>
std::vector<T> row_log_softmax(const std::vector<T>& x, std::size_t rows, std::size_t cols) {
  std::vector<T> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* out = y.data() + r * cols;
    T mx = *std::max_element(in, in + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[c] = in[c] - lse;
  }
  return y;
}

}  // namespace detail

/// Row-wise softmax of a [rows, cols] tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  detail::check_rows("softmax", x);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto y = detail::row_softmax(x.values(), rows, cols);
  auto saved = y;
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(y), "softmax", {&x},
                                [xi, saved = std::move(saved), rows, cols](const std::vector<T>& g) {
                                  auto& gx = xi->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const std::size_t o = r * cols;
                                    T dot = 0;
                                    for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * saved[o + c];
                                    for (std::size_t c = 0; c < cols; ++c) gx[o + c] += saved[o + c] * (g[o + c] - dot);
                                  }
                                });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  detail::check_rows("log_softmax", x);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto y = detail::row_log_softmax(x.values(), rows, cols);
  std::vector<T> probs(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) probs[i] = std::exp(y[i]);
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(y), "log_softmax", {&x},
                                [xi, probs = std::move(probs), rows, cols](const std::vector<T>& g) {
                                  auto& gx = xi->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const std::size_t o = r * cols;
                                    T total = 0;
                                    for (std::size_t c = 0; c < cols; ++c) total += g[o + c];
                                    for (std::size_t c = 0; c < cols; ++c) gx[o + c] += g[o + c] - probs[o + c] * total;
                                  }
                                });
}

/// Adds b[c] along dimension 1 of an [N, C, ...] tensor.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw DimensionError("add_bias: shapes " + to_string(x.shape()) + " and " + to_string(b.shape()) +
                         " do not conform");
  }
  const std::size_t outer = x.dim(0), channels = x.dim(1), inner = x.numel() / (outer * channels);
  std::vector<T> out(x.values());
  const auto& bv = b.values();
  for (std::size_t n = 0; n < outer; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      T* p = out.data() + (n * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bv[c];
    }
  auto xi = x.impl(), bi = b.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "add_bias", {&x, &b},
                                [xi, bi, outer, channels, inner](const std::vector<T>& g) {
                                  if (xi->requires_grad) {
                                    auto& gx = xi->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                  }
                                  if (bi->requires_grad) {
                                    auto& gb = bi->grad_buffer();
                                    for (std::size_t n = 0; n < outer; ++n)
                                      for (std::size_t c = 0; c < channels; ++c) {
                                        const T* p = g.data() + (n * channels + c) * inner;
                                        T acc = 0;
                                        for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                                        gb[c] += acc;
                                      }
                                  }
                                });
}

/// Elementwise a*x^2 + b*x + c with scalar-shaped coefficient tensors.
template <class T>
Tensor<T> quadratic(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  for (const auto* coef : {&a, &b, &c}) {
    if (!detail::is_scalar_shape(coef->shape())) {
      throw DimensionError("quadratic: coefficients must have shape [1], got " + to_string(coef->shape()));
    }
  }
  const T av = a.item(), bv = b.item(), cv = c.item();
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av * xv[i] * xv[i] + bv * xv[i] + cv;
  auto xi = x.impl(), ai = a.impl(), bi = b.impl(), ci = c.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "quadratic", {&x, &a, &b, &c},
                                [xi, ai, bi, ci](const std::vector<T>& g) {
                                  const auto& xv = xi->data;
                                  const T av = ai->data[0], bv = bi->data[0];
                                  if (xi->requires_grad) {
                                    auto& gx = xi->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(2) * av * xv[i] + bv);
                                  }
                                  double sa = 0, sb = 0, sc = 0;
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    sa += double(g[i]) * xv[i] * xv[i];
                                    sb += double(g[i]) * xv[i];
                                    sc += g[i];
                                  }
                                  if (ai->requires_grad) ai->grad_buffer()[0] += T(sa);
                                  if (bi->requires_grad) bi->grad_buffer()[0] += T(sb);
                                  if (ci->requires_grad) ci->grad_buffer()[0] += T(sc);
                                });
}

/// True when every element is finite.
template <class T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace pkn
