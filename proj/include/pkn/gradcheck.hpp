// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pkn/diagnostics.hpp"
#include "pkn/loss.hpp"

namespace pkn {

struct GradcheckOptions {
  double width = 0.125;
  Shape input_shape{3, 16, 16};
  std::size_t num_classes = 4;
  std::size_t batch = 2;
  std::size_t entries_per_param = 4;
  double step = 1e-6;       // relative to max(1, |p|)
  double tolerance = 1e-4;  // on the relative error
  double floor = 1e-7;      // absolute gradient scale below which errors count as absolute
  double max_activation_rms = 4.0;
  std::uint64_t seed = 0;
};

struct GradcheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0, numeric = 0, rel_error = 0;
};

struct GradcheckReport {
  std::string network, mode;
  std::vector<GradcheckEntry> entries;
  std::size_t params_checked = 0;
  std::size_t skipped_nonsmooth = 0;
  double weight_scale = 1.0;
  double worst_rel_error = 0;
  std::string worst_param;
  double tolerance = 1e-4;

  bool passed() const { return worst_rel_error < tolerance && !entries.empty(); }
  std::vector<std::string> failing_params() const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (!(e.rel_error < tolerance) && std::find(out.begin(), out.end(), e.param) == out.end()) out.push_back(e.param);
    return out;
  }
};

inline nlohmann::json to_json(const GradcheckReport& r) {
  nlohmann::json j{{"network", r.network},
                   {"mode", r.mode},
                   {"passed", r.passed()},
                   {"worst_rel_error", r.worst_rel_error},
                   {"worst_param", r.worst_param},
                   {"params_checked", r.params_checked},
                   {"entries_checked", r.entries.size()},
                   {"skipped_nonsmooth", r.skipped_nonsmooth},
                   {"weight_scale", r.weight_scale},
                   {"tolerance", r.tolerance}};
  j["failing"] = r.failing_params();
  return j;
}

namespace detail {

inline double gc_rel_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace detail

/// Central-difference check of every parameter tensor of `spec` at 64-bit.
///
/// A few entries per tensor are sampled. When an estimate disagrees with
/// the analytic gradient, it is redone with a 10x smaller step; if the two
/// estimates disagree with each other the point sits on a kink (ReLU,
/// max-pool tie) and is skipped, otherwise the smaller-step estimate is
/// the one that counts.
inline GradcheckReport gradcheck(const NetworkSpec& spec, const GradcheckOptions& o = {}) {
  auto net = Network<double>::build(spec, o.seed);
  // Non-zero biases so every bias path carries signal, and kernel scales
  // near 0.5 (not 1, so a dropped scale factor still shows) so early-layer
  // gradients stay above finite-difference noise.
  {
    std::mt19937_64 rng(o.seed ^ 0x5bd1e995u);
    std::uniform_real_distribution<double> bias(-0.1, 0.1), scale(0.4, 0.6);
    for (const auto& info : parameter_layout(spec)) {
      if (info.role != ParamRole::bias && info.role != ParamRole::scale) continue;
      for (auto& v : net.params().get(info.name).mutable_data()) v = info.role == ParamRole::bias ? bias(rng) : scale(rng);
    }
  }
  const auto x = standard_normal_batch<double>(spec.input_shape, o.batch, o.seed + 1);
  // Polynomial stacks blow activations up fast; shrink the weights until the
  // forward pass stays in a range where central differences are accurate.
  double weight_scale = 1.0;
  for (int i = 0; i < 200; ++i) {
    ForwardTrace trace;
    {
      NoGradGuard guard;
      net.forward(x, &trace);
    }
    const bool tame = std::all_of(trace.begin(), trace.end(),
                                  [&](const LayerRecord& r) { return r.finite && r.rms <= o.max_activation_rms; });
    if (tame) break;
    weight_scale *= 0.5;
    for (const auto& info : parameter_layout(spec)) {
      if (info.role != ParamRole::weight) continue;
      for (auto& v : net.params().get(info.name).mutable_data()) v *= 0.5;
    }
  }
  std::vector<int> labels(o.batch);
  for (std::size_t i = 0; i < o.batch; ++i) labels[i] = int((i * 7 + o.seed) % spec.num_classes);

  auto loss_at = [&] {
    NoGradGuard guard;
    return cross_entropy(net.forward(x), std::span<const int>(labels)).item();
  };

  net.zero_grad();
  auto loss = cross_entropy(net.forward(x), std::span<const int>(labels));
  loss.backward();

  GradcheckReport report;
  report.network = spec.name;
  report.tolerance = o.tolerance;
  report.weight_scale = weight_scale;
  std::mt19937_64 rng(o.seed + 2);
  for (auto& [name, t] : net.params()) {
    ++report.params_checked;
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(t.numel(), 0.0);
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), o.entries_per_param));
    auto data = t.mutable_data();
    for (auto j : idx) {
      const double p0 = data[j];
      auto numeric = [&](double h) {
        data[j] = p0 + h;
        const double fp = loss_at();
        data[j] = p0 - h;
        const double fm = loss_at();
        data[j] = p0;
        return (fp - fm) / (2 * h);
      };
      const double h = o.step * std::max(1.0, std::abs(p0));
      double n = numeric(h);
      double err = detail::gc_rel_error(analytic[j], n, o.floor);
      if (!(err < o.tolerance)) {
        const double n_small = numeric(h / 10);
        if (!(detail::gc_rel_error(n, n_small, o.floor) < o.tolerance)) {
          ++report.skipped_nonsmooth;
          continue;
        }
        n = n_small;
        err = detail::gc_rel_error(analytic[j], n, o.floor);
      }
      report.entries.push_back({name, j, analytic[j], n, err});
      if (!(err <= report.worst_rel_error)) {
        report.worst_rel_error = err;
        report.worst_param = name;
      }
    }
  }
  return report;
}

/// Tiny instance of a preset, optionally converted, then checked.
inline GradcheckReport gradcheck_preset(const std::string& preset, const std::optional<SurgeryMode>& mode,
                                        const GradcheckOptions& o = {}) {
  auto spec = build(ModelPreset{preset, o.width, o.num_classes, o.input_shape});
  if (mode) spec = surgery(spec, *mode);
  auto report = gradcheck(spec, o);
  report.network = preset;
  report.mode = mode ? to_string(mode->kind) + (mode->kind == SurgeryMode::Kind::react
                                                     ? std::string()
                                                     : "(d=" + std::to_string(mode->degree) + ")")
                     : "vanilla";
  return report;
}

}  // namespace pkn
