// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pkn/conv.hpp"
#include "pkn/ops.hpp"
#include "pkn/polykerv.hpp"
#include "pkn/spec.hpp"

namespace pkn {

/// Ordered name -> tensor map of learnable parameters.
template <class T>
class ParamRegistry {
 public:
  void add(std::string name, Tensor<T> tensor) {
    if (index_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
    index_[name] = entries_.size();
    entries_.emplace_back(std::move(name), std::move(tensor));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParamRegistry&>(*this).get(name));
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  /// Deep copy; the result shares no storage with this registry.
  ParamRegistry clone() const {
    ParamRegistry out;
    for (const auto& [name, t] : entries_) out.add(name, t.clone(t.requires_grad()));
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Fresh parameters for a spec, drawn in layout order from one seeded
/// stream. See parameter_layout() for the per-tensor rule.
template <class T>
ParamRegistry<T> init_parameters(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamRegistry<T> reg;
  for (const auto& info : parameter_layout(spec)) {
    std::vector<T> values(numel(info.shape), T(info.init));
    if (info.bound > 0) {
      std::uniform_real_distribution<double> dist(-info.bound, info.bound);
      for (auto& v : values) v = T(dist(rng));
    }
    reg.add(info.name, Tensor<T>(info.shape, std::move(values), true));
  }
  return reg;
}

/// One row of a forward trace: the output of a single executed layer.
struct LayerRecord {
  std::size_t index = 0;  // 1-based execution position
  std::string name;
  std::string kind;
  Shape shape;
  double rms = 0;
  bool finite = true;
};

using ForwardTrace = std::vector<LayerRecord>;

template <class T>
double rms_of(std::span<const T> values) {
  long double acc = 0;
  for (auto v : values) acc += (long double)v * v;
  return double(std::sqrt(acc / values.size()));
}

/// A NetworkSpec bound to its parameters.
template <class T = float>
class Network {
 public:
  Network(NetworkSpec spec, ParamRegistry<T> params) : spec_(std::move(spec)), params_(std::move(params)) {
    validate(spec_);
    for (const auto& info : parameter_layout(spec_)) {
      if (!params_.contains(info.name)) throw ConfigError("network '" + spec_.name + "': missing parameter " + info.name);
      const auto& t = params_.get(info.name);
      if (t.shape() != info.shape) {
        throw ConfigError("network '" + spec_.name + "': parameter " + info.name + " has shape " +
                          to_string(t.shape()) + ", expected " + to_string(info.shape));
      }
    }
  }

  static Network build(NetworkSpec spec, std::uint64_t seed) {
    auto params = init_parameters<T>(spec, seed);
    return Network(std::move(spec), std::move(params));
  }

  const NetworkSpec& spec() const { return spec_; }
  const ParamRegistry<T>& params() const { return params_; }
  ParamRegistry<T>& params() { return params_; }

  /// Forward pass over an [N, C, H, W] batch. When `trace` is given every
  /// executed layer (and every residual merge) appends one record; non-finite
  /// activations are recorded, not fatal.
  Tensor<T> forward(const Tensor<T>& x, ForwardTrace* trace = nullptr) const {
    if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != spec_.input_shape) {
      throw DimensionError("network '" + spec_.name + "': input " + to_string(x.shape()) +
                           " does not match N x " + to_string(spec_.input_shape));
    }
    return run(spec_.layers, x, trace);
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  /// Applies the optional positivity constraint on c_p / a_p after an update.
  void project_constraints() {
    constexpr T eps = T(1e-6);
    for_each_layer(spec_.layers, [&](const LayerSpec& l) {
      auto* p = std::get_if<PolyKerv2dLayer>(&l.op);
      if (!p || !p->clamp_positive) return;
      for (const char* suffix : {".cp", ".ap"}) {
        const auto name = l.name + suffix;
        if (!params_.contains(name)) continue;
        for (auto& v : params_.get(name).mutable_data()) v = std::max(v, eps);
      }
    });
  }

 private:
  Tensor<T> run(const std::vector<LayerSpec>& layers, Tensor<T> x, ForwardTrace* trace) const {
    for (const auto& layer : layers) {
      x = apply(layer, x, trace);
      if (trace) record(*trace, layer, x);
    }
    return x;
  }

  static void record(ForwardTrace& trace, const LayerSpec& layer, const Tensor<T>& out) {
    LayerRecord r;
    r.index = trace.size() + 1;
    r.name = layer.name;
    r.kind = kind_name(layer.op);
    r.shape = out.shape();
    r.finite = all_finite(out.data());
    r.rms = rms_of(out.data());
    trace.push_back(std::move(r));
  }

  const Tensor<T>& param(const std::string& layer, const char* suffix) const { return params_.get(layer + suffix); }

  Tensor<T> apply(const LayerSpec& layer, const Tensor<T>& x, ForwardTrace* trace) const {
    return std::visit(
        [&](const auto& op) -> Tensor<T> {
          using Op = std::decay_t<decltype(op)>;
          const auto& n = layer.name;
          if constexpr (std::is_same_v<Op, Conv2dLayer>) {
            std::optional<Tensor<T>> bias;
            if (op.bias) bias = param(n, ".bias");
            return conv2d(x, param(n, ".weight"), bias, op.stride, op.padding);
          } else if constexpr (std::is_same_v<Op, PolyKerv2dLayer>) {
            PolyKervParams<T> p{op.degree, param(n, ".cp"), param(n, ".bias"),
                                op.regularized ? param(n, ".ap") : Tensor<T>{}};
            return op.regularized ? rpolykerv2d(x, param(n, ".weight"), p, op.stride, op.padding)
                                  : polykerv2d(x, param(n, ".weight"), p, op.stride, op.padding);
          } else if constexpr (std::is_same_v<Op, ReactPknLayer>) {
            return quadratic(x, param(n, ".a"), param(n, ".b"), param(n, ".c"));
          } else if constexpr (std::is_same_v<Op, ReluLayer>) {
            return relu(x);
          } else if constexpr (std::is_same_v<Op, MaxPoolLayer>) {
            return maxpool2d(x, op.kernel, op.stride);
          } else if constexpr (std::is_same_v<Op, AvgPoolLayer>) {
            return avgpool2d(x, op.kernel, op.stride);
          } else if constexpr (std::is_same_v<Op, FlattenLayer>) {
            return flatten(x);
          } else if constexpr (std::is_same_v<Op, LinearLayer>) {
            auto y = matmul(x, param(n, ".weight"));
            return op.bias ? add_bias(y, param(n, ".bias")) : y;
          } else if constexpr (std::is_same_v<Op, ResidualLayer>) {
            auto body = run(op.body, x, trace);
            auto skip = op.shortcut.empty() ? x : run(op.shortcut, x, trace);
            return add(body, skip);
          } else {
            throw ConfigError("layer '" + n + "' has no kind");
          }
        },
        layer.op);
  }

  NetworkSpec spec_;
  ParamRegistry<T> params_;
};

/// Outcome of copying parameters between registries by name.
struct TransplantReport {
  std::vector<std::string> copied;
  std::vector<std::string> kept;        // present only in the destination
  std::vector<std::string> mismatched;  // same name, different shape
};

/// Copies every same-named, same-shaped parameter from `source` into `dest`.
/// With `strict`, a missing or mis-shaped weight tensor is an error that
/// lists the offending names.
template <class T>
TransplantReport transplant(const ParamRegistry<T>& source, Network<T>& dest, bool strict = true) {
  TransplantReport report;
  std::vector<std::string> missing_weights;
  for (const auto& info : parameter_layout(dest.spec())) {
    auto& target = dest.params().get(info.name);
    if (!source.contains(info.name)) {
      report.kept.push_back(info.name);
      if (info.role == ParamRole::weight) missing_weights.push_back(info.name);
      continue;
    }
    const auto& src = source.get(info.name);
    if (src.shape() != target.shape()) {
      report.mismatched.push_back(info.name + " " + to_string(src.shape()) + " -> " + to_string(target.shape()));
      continue;
    }
    std::copy(src.data().begin(), src.data().end(), target.mutable_data().begin());
    report.copied.push_back(info.name);
  }
  if (strict && (!report.mismatched.empty() || !missing_weights.empty())) {
    std::string msg = "incompatible checkpoint:";
    for (const auto& m : report.mismatched) msg += " [shape " + m + "]";
    for (const auto& m : missing_weights) msg += " [missing " + m + "]";
    throw ConfigError(msg);
  }
  return report;
}

}  // namespace pkn
