// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pkn/tensor.hpp"

namespace pkn::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

/// Worst |analytic - central difference| / max(1, |central difference|) over
/// every element of every input. `loss` must build a scalar from the inputs.
inline double finite_difference_error(std::vector<Tensor<double>> inputs,
                                      const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss,
                                      double h = 1e-4) {
  for (auto& t : inputs) t.zero_grad();
  loss(inputs).backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
  }
  NoGradGuard guard;
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss(inputs).item();
      data[i] = saved - h;
      const double down = loss(inputs).item();
      data[i] = saved;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(analytic[k][i] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace pkn::testing
