// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pkn/ops.hpp"

namespace pkn {

/// Mean over the batch of -log softmax(logits)[label].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::check_rows("cross_entropy", logits);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         to_string(logits.shape()));
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || std::size_t(labels[r]) >= cols) {
      throw InputError("cross_entropy: label " + std::to_string(labels[r]) + " at row " + std::to_string(r) +
                       " outside [0, " + std::to_string(cols) + ")");
    }
  }
  auto logp = detail::row_log_softmax(logits.values(), rows, cols);
  double loss = 0;
  for (std::size_t r = 0; r < rows; ++r) loss -= logp[r * cols + labels[r]];
  loss /= double(rows);
  std::vector<int> saved(labels.begin(), labels.end());
  auto li = logits.impl();
  return detail::make_result<T>({1}, {T(loss)}, "cross_entropy", {&logits},
                                [li, logp = std::move(logp), saved = std::move(saved), rows, cols](const std::vector<T>& g) {
                                  auto& gl = li->grad_buffer();
                                  const T scale = g[0] / T(rows);
                                  for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t c = 0; c < cols; ++c) {
                                      const T p = std::exp(logp[r * cols + c]);
                                      gl[r * cols + c] += scale * (p - (int(c) == saved[r] ? T(1) : T(0)));
                                    }
                                });
}

/// Mean over the batch of sum_c t_c (ln t_c - log softmax(s)_c).
///
/// The teacher distribution is treated as a constant; only the student
/// logits receive gradient.
template <class T>
Tensor<T> kl_divergence(const Tensor<T>& student_logits, const Tensor<T>& teacher_probs) {
  detail::check_rows("kl_divergence", student_logits);
  if (student_logits.shape() != teacher_probs.shape()) {
    throw DimensionError("kl_divergence: student " + to_string(student_logits.shape()) + " vs teacher " +
                         to_string(teacher_probs.shape()));
  }
  const std::size_t rows = student_logits.dim(0), cols = student_logits.dim(1);
  const auto& t = teacher_probs.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const T v = t[r * cols + c];
      if (!(v >= T(0))) {
        throw InputError("kl_divergence: teacher probability " + std::to_string(double(v)) + " at (" +
                         std::to_string(r) + "," + std::to_string(c) + ") is negative or NaN");
      }
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-5) {
      throw InputError("kl_divergence: teacher row " + std::to_string(r) + " sums to " + std::to_string(total));
    }
  }
  auto logq = detail::row_log_softmax(student_logits.values(), rows, cols);
  double loss = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] > T(0)) loss += double(t[i]) * (std::log(double(t[i])) - double(logq[i]));
  }
  loss /= double(rows);
  std::vector<T> target(t);
  auto si = student_logits.impl();
  return detail::make_result<T>({1}, {T(loss)}, "kl_divergence", {&student_logits},
                                [si, logq = std::move(logq), target = std::move(target), rows](const std::vector<T>& g) {
                                  auto& gs = si->grad_buffer();
                                  const T scale = g[0] / T(rows);
                                  for (std::size_t i = 0; i < gs.size(); ++i)
                                    gs[i] += scale * (std::exp(logq[i]) - target[i]);
                                });
}

/// Mean of squared differences.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  auto d = sub(a, b);
  return mean(mul(d, d));
}

}  // namespace pkn
