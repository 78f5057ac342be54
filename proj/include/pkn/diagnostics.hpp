// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pkn/network.hpp"
#include "pkn/surgery.hpp"
#include "pkn/zoo.hpp"

namespace pkn {

/// Outcome of comparing a network variant against its vanilla twin.
struct ProbeReport {
  std::string network;
  std::string mode;
  std::uint64_t seed = 0;
  std::optional<double> mse;  // unset when the variant's output is non-finite
  std::optional<std::size_t> first_nonfinite_layer;
  std::string first_nonfinite_name;
  ForwardTrace activations;  // variant network
  std::vector<double> grad_norms;

  bool finite() const { return mse.has_value(); }
};

inline nlohmann::json to_json(const ProbeReport& r) {
  using nlohmann::json;
  auto num_or_null = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j;
  j["network"] = r.network;
  j["mode"] = r.mode;
  j["seed"] = r.seed;
  j["finite"] = r.finite();
  j["mse"] = r.mse ? num_or_null(*r.mse) : json(nullptr);
  j["first_nonfinite_layer"] = r.first_nonfinite_layer ? json(*r.first_nonfinite_layer) : json(nullptr);
  if (r.first_nonfinite_layer) j["first_nonfinite_name"] = r.first_nonfinite_name;
  json trace = json::array();
  for (const auto& rec : r.activations) {
    trace.push_back({{"index", rec.index}, {"name", rec.name}, {"kind", rec.kind}, {"rms", num_or_null(rec.rms)},
                     {"finite", rec.finite}});
  }
  j["activations"] = std::move(trace);
  json norms = json::array();
  for (double g : r.grad_norms) norms.push_back(num_or_null(g));
  j["grad_norms"] = std::move(norms);
  return j;
}

/// One line of a line-delimited report file.
inline std::string to_jsonl(const ProbeReport& r) { return to_json(r).dump() + "\n"; }

/// Seeded standard-normal batch of shape N x input_shape.
template <class T>
Tensor<T> standard_normal_batch(const Shape& input_shape, std::size_t n, std::uint64_t seed) {
  Shape shape{n};
  shape.insert(shape.end(), input_shape.begin(), input_shape.end());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(normal(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

/// First trace entry with a non-finite element; earlier entries are all finite.
inline const LayerRecord* first_nonfinite(const ForwardTrace& trace) {
  for (const auto& r : trace)
    if (!r.finite) return &r;
  return nullptr;
}

/// RMS of every executed layer's output, in execution order.
template <class T>
std::vector<double> track_activations(const Network<T>& net, const Tensor<T>& input) {
  NoGradGuard guard;
  ForwardTrace trace;
  net.forward(input, &trace);
  std::vector<double> out;
  for (const auto& r : trace) out.push_back(r.rms);
  return out;
}

/// Forward both networks on the same input and compare final logits.
///
/// The variant's output counts as non-finite when it holds NaN or inf, or
/// when the MSE itself is not representable at the network's precision.
template <class T>
ProbeReport mse_probe(const Network<T>& vanilla, const Network<T>& variant, const Tensor<T>& input) {
  NoGradGuard guard;
  ProbeReport report;
  report.network = variant.spec().name;
  ForwardTrace vanilla_trace;
  auto a = vanilla.forward(input, &vanilla_trace);
  auto b = variant.forward(input, &report.activations);
  if (a.shape() != b.shape()) {
    throw ConfigError("mse_probe: output shapes differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (const auto* bad = first_nonfinite(report.activations)) {
    report.first_nonfinite_layer = bad->index;
    report.first_nonfinite_name = bad->name;
  }
  const bool outputs_finite = all_finite(a.data()) && all_finite(b.data());
  long double acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const long double d = (long double)a[i] - (long double)b[i];
    acc += d * d;
  }
  const long double mse = acc / a.numel();
  if (outputs_finite && mse <= (long double)std::numeric_limits<T>::max()) report.mse = double(mse);
  return report;
}

/// Builds the vanilla preset, derives the variant by surgery, transplants the
/// shared weights and probes both on a seeded standard-normal batch.
template <class T>
ProbeReport probe_preset(const ModelPreset& preset, const SurgeryMode& mode, std::uint64_t seed,
                         std::size_t batch = 1) {
  auto vanilla_spec = build(preset);
  auto vanilla = Network<T>::build(vanilla_spec, seed);
  auto variant = Network<T>::build(surgery(vanilla_spec, mode), seed);
  transplant(vanilla.params(), variant);
  auto report = mse_probe(vanilla, variant, standard_normal_batch<T>(preset.input_shape, batch, seed));
  report.network = preset.name;
  report.mode = to_string(mode.kind) + "(d=" + std::to_string(mode.degree) + ")";
  report.seed = seed;
  return report;
}

/// Where a training step first went non-finite.
struct Divergence {
  std::uint64_t step = 0;
  std::string location;  // "loss" or a parameter name
};

/// Checks the loss, then every parameter gradient in registry order.
template <class T>
std::optional<Divergence> nan_sentinel(std::uint64_t step, double loss, const ParamRegistry<T>& params) {
  if (!std::isfinite(loss)) return Divergence{step, "loss"};
  for (const auto& [name, t] : params) {
    if (t.has_grad() && !all_finite(t.grad())) return Divergence{step, name};
  }
  return std::nullopt;
}

/// Global L2 norm over every stored gradient.
template <class T>
double grad_norm(const ParamRegistry<T>& params) {
  long double acc = 0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (auto g : t.grad()) acc += (long double)g * g;
  }
  return double(std::sqrt(acc));
}

}  // namespace pkn
