// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <variant>

#include "pkn/spec.hpp"

namespace pkn {

/// Conversion applied by surgery().
struct SurgeryMode {
  enum class Kind { pkn, rpkn, react };
  Kind kind = Kind::pkn;
  int degree = 2;
  double balance = 0.5;  // c_p
  double scale = 0.009;  // a_p (rpkn)
  double react_a = 0.009, react_b = 0.5, react_c = 0.47;
  bool clamp_positive = false;

  static SurgeryMode pkn(int degree, double balance) { return {Kind::pkn, degree, balance}; }
  static SurgeryMode rpkn(int degree, double balance, double scale) { return {Kind::rpkn, degree, balance, scale}; }
  static SurgeryMode react(double a, double b, double c) {
    SurgeryMode m;
    m.kind = Kind::react;
    m.react_a = a;
    m.react_b = b;
    m.react_c = c;
    return m;
  }
};

inline std::string to_string(SurgeryMode::Kind k) {
  switch (k) {
    case SurgeryMode::Kind::pkn: return "pkn";
    case SurgeryMode::Kind::rpkn: return "rpkn";
    case SurgeryMode::Kind::react: return "react";
  }
  return "?";
}

namespace detail {

inline std::vector<LayerSpec> convert_layers(const std::vector<LayerSpec>& layers, const SurgeryMode& mode) {
  const bool kernel_mode = mode.kind != SurgeryMode::Kind::react;
  std::vector<LayerSpec> out;
  for (const auto& layer : layers) {
    LayerSpec next{layer.name, {}};
    bool keep = true;
    std::visit(
        [&](const auto& op) {
          using Op = std::decay_t<decltype(op)>;
          if constexpr (std::is_same_v<Op, std::monostate>) {
            throw ConversionError("surgery: layer '" + layer.name + "' has no recognised kind");
          } else if constexpr (std::is_same_v<Op, Conv2dLayer>) {
            if (kernel_mode) {
              PolyKerv2dLayer p;
              p.in_channels = op.in_channels;
              p.out_channels = op.out_channels;
              p.kernel = op.kernel;
              p.stride = op.stride;
              p.padding = op.padding;
              p.degree = mode.degree;
              p.balance = mode.balance;
              p.regularized = mode.kind == SurgeryMode::Kind::rpkn;
              p.scale = p.regularized ? mode.scale : 1.0;
              p.clamp_positive = mode.clamp_positive;
              next.op = p;
            } else {
              next.op = op;
            }
          } else if constexpr (std::is_same_v<Op, ReluLayer>) {
            if (kernel_mode)
              keep = false;
            else
              next.op = ReactPknLayer{mode.react_a, mode.react_b, mode.react_c};
          } else if constexpr (std::is_same_v<Op, MaxPoolLayer>) {
            next.op = AvgPoolLayer{op.kernel, op.stride};
          } else if constexpr (std::is_same_v<Op, ResidualLayer>) {
            next.op = ResidualLayer{convert_layers(op.body, mode), convert_layers(op.shortcut, mode)};
          } else {
            next.op = op;
          }
        },
        layer.op);
    if (keep) out.push_back(std::move(next));
  }
  return out;
}

}  // namespace detail

/// Rewrites a vanilla network into a polynomial variant.
///
/// pkn / rpkn: conv2d becomes (r)polykerv2d, relu is dropped, maxpool
/// becomes avgpool with the same window. react: relu becomes react_pkn,
/// maxpool becomes avgpool, convolutions stay. Linear layers and layer
/// names are preserved so weights can be transplanted by name.
inline NetworkSpec surgery(const NetworkSpec& spec, const SurgeryMode& mode) {
  if (mode.kind != SurgeryMode::Kind::react && mode.degree < 1) {
    throw ConfigError("surgery: degree must be >= 1, got " + std::to_string(mode.degree));
  }
  NetworkSpec out = spec;
  out.layers = detail::convert_layers(spec.layers, mode);
  infer_output_shape(out);
  return out;
}

}  // namespace pkn
