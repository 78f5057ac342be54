// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "pkn/error.hpp"
#include "pkn/tensor.hpp"

namespace pkn {

struct LayerSpec;

struct Conv2dLayer {
  std::size_t in_channels = 0, out_channels = 0, kernel = 3, stride = 1, padding = 0;
  bool bias = true;
  bool operator==(const Conv2dLayer&) const = default;
};

/// Polynomial-kernel convolution; `regularized` adds the learnable scale.
struct PolyKerv2dLayer {
  std::size_t in_channels = 0, out_channels = 0, kernel = 3, stride = 1, padding = 0;
  int degree = 2;
  double balance = 0.5;
  double scale = 1.0;
  bool regularized = false;
  bool clamp_positive = false;
  bool operator==(const PolyKerv2dLayer&) const = default;
};

struct ReactPknLayer {
  double a = 0.009, b = 0.5, c = 0.47;
  bool operator==(const ReactPknLayer&) const = default;
};

struct ReluLayer {
  bool operator==(const ReluLayer&) const = default;
};

struct MaxPoolLayer {
  std::size_t kernel = 2, stride = 2;
  bool operator==(const MaxPoolLayer&) const = default;
};

struct AvgPoolLayer {
  std::size_t kernel = 2, stride = 2;
  bool operator==(const AvgPoolLayer&) const = default;
};

struct LinearLayer {
  std::size_t in_features = 0, out_features = 0;
  bool bias = true;
  bool operator==(const LinearLayer&) const = default;
};

struct FlattenLayer {
  bool operator==(const FlattenLayer&) const = default;
};

/// out = body(x) + shortcut(x); an empty shortcut is the identity.
struct ResidualLayer {
  std::vector<LayerSpec> body;
  std::vector<LayerSpec> shortcut;
};

using LayerOp = std::variant<std::monostate, Conv2dLayer, PolyKerv2dLayer, ReactPknLayer, ReluLayer, MaxPoolLayer,
                             AvgPoolLayer, LinearLayer, FlattenLayer, ResidualLayer>;

struct LayerSpec {
  std::string name;
  LayerOp op;
};

inline bool operator==(const LayerSpec& a, const LayerSpec& b);

inline bool operator==(const ResidualLayer& a, const ResidualLayer& b) {
  return a.body == b.body && a.shortcut == b.shortcut;
}

inline bool operator==(const LayerSpec& a, const LayerSpec& b) { return a.name == b.name && a.op == b.op; }

struct NetworkSpec {
  static constexpr int kVersion = 1;
  std::string name;
  Shape input_shape;  // C, H, W
  std::size_t num_classes = 0;
  std::vector<LayerSpec> layers;
  bool operator==(const NetworkSpec&) const = default;
};

inline std::string kind_name(const LayerOp& op) {
  struct {
    std::string operator()(std::monostate) const { return "unset"; }
    std::string operator()(const Conv2dLayer&) const { return "conv2d"; }
    std::string operator()(const PolyKerv2dLayer& p) const { return p.regularized ? "rpolykerv2d" : "polykerv2d"; }
    std::string operator()(const ReactPknLayer&) const { return "react_pkn"; }
    std::string operator()(const ReluLayer&) const { return "relu"; }
    std::string operator()(const MaxPoolLayer&) const { return "maxpool"; }
    std::string operator()(const AvgPoolLayer&) const { return "avgpool"; }
    std::string operator()(const LinearLayer&) const { return "linear"; }
    std::string operator()(const FlattenLayer&) const { return "flatten"; }
    std::string operator()(const ResidualLayer&) const { return "residual"; }
  } visitor;
  return std::visit(visitor, op);
}

/// Visits every layer depth-first in execution order (body, then shortcut).
template <class Fn>
void for_each_layer(const std::vector<LayerSpec>& layers, Fn&& fn) {
  for (const auto& layer : layers) {
    fn(layer);
    if (auto* res = std::get_if<ResidualLayer>(&layer.op)) {
      for_each_layer(res->body, fn);
      for_each_layer(res->shortcut, fn);
    }
  }
}

template <class Fn>
void for_each_layer_mut(std::vector<LayerSpec>& layers, Fn&& fn) {
  for (auto& layer : layers) {
    fn(layer);
    if (auto* res = std::get_if<ResidualLayer>(&layer.op)) {
      for_each_layer_mut(res->body, fn);
      for_each_layer_mut(res->shortcut, fn);
    }
  }
}

namespace detail {

inline void assign_names(std::vector<LayerSpec>& layers, const std::string& prefix) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& layer = layers[i];
    if (layer.name.empty()) layer.name = prefix + std::to_string(i);
    if (auto* res = std::get_if<ResidualLayer>(&layer.op)) {
      assign_names(res->body, layer.name + ".body.");
      assign_names(res->shortcut, layer.name + ".shortcut.");
    }
  }
}

// Per-sample shape after one layer.
inline Shape infer_layer(const LayerSpec& layer, Shape in) {
  auto fail = [&](const std::string& why) {
    throw ConfigError("layer '" + layer.name + "' (" + kind_name(layer.op) + "): " + why + ", input " + to_string(in));
  };
  auto spatial = [&](std::size_t extent, std::size_t k, std::size_t stride, std::size_t pad) {
    if (k == 0 || stride == 0) fail("kernel and stride must be positive");
    if (extent + 2 * pad < k) fail("window does not fit");
    return (extent + 2 * pad - k) / stride + 1;
  };
  auto conv_like = [&](std::size_t cin, std::size_t cout, std::size_t k, std::size_t s, std::size_t p) {
    if (in.size() != 3) fail("expects a C x H x W input");
    if (in[0] != cin) fail("expects " + std::to_string(cin) + " channels");
    if (cout == 0) fail("needs at least one output channel");
    return Shape{cout, spatial(in[1], k, s, p), spatial(in[2], k, s, p)};
  };
  return std::visit(
      [&](const auto& op) -> Shape {
        using Op = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<Op, std::monostate>) {
          fail("layer kind is unset");
          return {};
        } else if constexpr (std::is_same_v<Op, Conv2dLayer>) {
          return conv_like(op.in_channels, op.out_channels, op.kernel, op.stride, op.padding);
        } else if constexpr (std::is_same_v<Op, PolyKerv2dLayer>) {
          if (op.degree < 1) fail("degree must be >= 1");
          return conv_like(op.in_channels, op.out_channels, op.kernel, op.stride, op.padding);
        } else if constexpr (std::is_same_v<Op, MaxPoolLayer> || std::is_same_v<Op, AvgPoolLayer>) {
          if (in.size() != 3) fail("expects a C x H x W input");
          if (op.kernel > in[1] || op.kernel > in[2]) fail("window larger than input");
          return Shape{in[0], spatial(in[1], op.kernel, op.stride, 0), spatial(in[2], op.kernel, op.stride, 0)};
        } else if constexpr (std::is_same_v<Op, LinearLayer>) {
          if (in.size() != 1 || in[0] != op.in_features) fail("expects " + std::to_string(op.in_features) + " features");
          if (op.out_features == 0) fail("needs at least one output feature");
          return Shape{op.out_features};
        } else if constexpr (std::is_same_v<Op, FlattenLayer>) {
          return Shape{numel(in)};
        } else if constexpr (std::is_same_v<Op, ResidualLayer>) {
          Shape body = in;
          for (const auto& l : op.body) body = infer_layer(l, body);
          Shape skip = in;
          for (const auto& l : op.shortcut) skip = infer_layer(l, skip);
          if (body != skip) fail("body output " + to_string(body) + " != shortcut output " + to_string(skip));
          return body;
        } else {
          return in;
        }
      },
      layer.op);
}

}  // namespace detail

/// Fills in missing layer names with their path, e.g. "l3.body.1".
inline void assign_default_names(NetworkSpec& spec) { detail::assign_names(spec.layers, "l"); }

/// Per-sample output shape; throws ConfigError naming the first layer that
/// does not compose with its input.
inline Shape infer_output_shape(const NetworkSpec& spec) {
  Shape s = spec.input_shape;
  for (const auto& layer : spec.layers) s = detail::infer_layer(layer, s);
  return s;
}

/// Checks naming and that the layers compose into a num_classes output.
inline void validate(const NetworkSpec& spec) {
  if (spec.input_shape.size() != 3) throw ConfigError("network '" + spec.name + "': input_shape must be C,H,W");
  for (auto d : spec.input_shape)
    if (d == 0) throw ConfigError("network '" + spec.name + "': input_shape dimensions must be positive");
  std::set<std::string> names;
  for_each_layer(spec.layers, [&](const LayerSpec& l) {
    if (l.name.empty()) throw ConfigError("network '" + spec.name + "': unnamed layer");
    if (!names.insert(l.name).second) throw ConfigError("network '" + spec.name + "': duplicate layer name " + l.name);
  });
  auto out = infer_output_shape(spec);
  if (out != Shape{spec.num_classes}) {
    throw ConfigError("network '" + spec.name + "': output shape " + to_string(out) + " does not match " +
                      std::to_string(spec.num_classes) + " classes");
  }
}

enum class ParamRole { weight, bias, balance, scale, react_a, react_b, react_c };

struct ParamInfo {
  std::string name;
  std::string layer;
  Shape shape;
  ParamRole role;
  std::size_t fan_in = 0;
  double init = 0;   // starting value when bound == 0
  double bound = 0;  // > 0: uniform in [-bound, bound]
};

/// Every learnable tensor of the network, in execution order.
inline std::vector<ParamInfo> parameter_layout(const NetworkSpec& spec) {
  // Convolutions: Kaiming-uniform weights, zero bias. Linear: +-1/sqrt(fan_in) for both.
  auto kaiming = [](std::size_t fan) { return std::sqrt(6.0 / double(fan)); };
  auto plain = [](std::size_t fan) { return 1.0 / std::sqrt(double(fan)); };
  std::vector<ParamInfo> out;
  for_each_layer(spec.layers, [&](const LayerSpec& l) {
    const auto& n = l.name;
    if (auto* c = std::get_if<Conv2dLayer>(&l.op)) {
      const auto fan = c->in_channels * c->kernel * c->kernel;
      out.push_back({n + ".weight", n, {c->out_channels, c->in_channels, c->kernel, c->kernel}, ParamRole::weight, fan, 0,
                     kaiming(fan)});
      if (c->bias) out.push_back({n + ".bias", n, {c->out_channels}, ParamRole::bias, fan});
    } else if (auto* p = std::get_if<PolyKerv2dLayer>(&l.op)) {
      const auto fan = p->in_channels * p->kernel * p->kernel;
      out.push_back({n + ".weight", n, {p->out_channels, p->in_channels, p->kernel, p->kernel}, ParamRole::weight, fan, 0,
                     kaiming(fan)});
      out.push_back({n + ".bias", n, {p->out_channels}, ParamRole::bias, fan});
      out.push_back({n + ".cp", n, {1}, ParamRole::balance, 0, p->balance});
      if (p->regularized) out.push_back({n + ".ap", n, {1}, ParamRole::scale, 0, p->scale});
    } else if (auto* r = std::get_if<ReactPknLayer>(&l.op)) {
      out.push_back({n + ".a", n, {1}, ParamRole::react_a, 0, r->a});
      out.push_back({n + ".b", n, {1}, ParamRole::react_b, 0, r->b});
      out.push_back({n + ".c", n, {1}, ParamRole::react_c, 0, r->c});
    } else if (auto* f = std::get_if<LinearLayer>(&l.op)) {
      const auto fan = f->in_features;
      out.push_back({n + ".weight", n, {f->in_features, f->out_features}, ParamRole::weight, fan, 0, plain(fan)});
      if (f->bias) out.push_back({n + ".bias", n, {f->out_features}, ParamRole::bias, fan, 0, plain(fan)});
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structured-text form

namespace detail {

using nlohmann::json;

inline json layers_to_json(const std::vector<LayerSpec>& layers);

inline json layer_to_json(const LayerSpec& l) {
  json j;
  j["kind"] = kind_name(l.op);
  j["name"] = l.name;
  std::visit(
      [&](const auto& op) {
        using Op = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<Op, Conv2dLayer>) {
          j["in_channels"] = op.in_channels;
          j["out_channels"] = op.out_channels;
          j["kernel"] = op.kernel;
          j["stride"] = op.stride;
          j["padding"] = op.padding;
          j["bias"] = op.bias;
        } else if constexpr (std::is_same_v<Op, PolyKerv2dLayer>) {
          j["in_channels"] = op.in_channels;
          j["out_channels"] = op.out_channels;
          j["kernel"] = op.kernel;
          j["stride"] = op.stride;
          j["padding"] = op.padding;
          j["degree"] = op.degree;
          j["cp"] = op.balance;
          if (op.regularized) j["ap"] = op.scale;
          j["clamp_positive"] = op.clamp_positive;
        } else if constexpr (std::is_same_v<Op, ReactPknLayer>) {
          j["a"] = op.a;
          j["b"] = op.b;
          j["c"] = op.c;
        } else if constexpr (std::is_same_v<Op, MaxPoolLayer> || std::is_same_v<Op, AvgPoolLayer>) {
          j["kernel"] = op.kernel;
          j["stride"] = op.stride;
        } else if constexpr (std::is_same_v<Op, LinearLayer>) {
          j["in_features"] = op.in_features;
          j["out_features"] = op.out_features;
          j["bias"] = op.bias;
        } else if constexpr (std::is_same_v<Op, ResidualLayer>) {
          j["body"] = layers_to_json(op.body);
          j["shortcut"] = layers_to_json(op.shortcut);
        }
      },
      l.op);
  return j;
}

inline json layers_to_json(const std::vector<LayerSpec>& layers) {
  json arr = json::array();
  for (const auto& l : layers) arr.push_back(layer_to_json(l));
  return arr;
}

template <class V>
V field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw FormatError(where + ": field '" + key + "': " + e.what());
  }
}

template <class V>
V field_or(const json& j, const char* key, V fallback, const std::string& where) {
  return j.contains(key) ? field<V>(j, key, where) : fallback;
}

inline std::vector<LayerSpec> layers_from_json(const json& arr, const std::string& where);

inline LayerSpec layer_from_json(const json& j, const std::string& where) {
  LayerSpec l;
  const auto kind = field<std::string>(j, "kind", where);
  l.name = field_or<std::string>(j, "name", "", where);
  const std::string at = where + "/" + (l.name.empty() ? kind : l.name);
  using S = std::size_t;
  if (kind == "conv2d") {
    l.op = Conv2dLayer{field<S>(j, "in_channels", at), field<S>(j, "out_channels", at), field<S>(j, "kernel", at),
                       field_or<S>(j, "stride", 1, at), field_or<S>(j, "padding", 0, at),
                       field_or<bool>(j, "bias", true, at)};
  } else if (kind == "polykerv2d" || kind == "rpolykerv2d") {
    PolyKerv2dLayer p;
    p.in_channels = field<S>(j, "in_channels", at);
    p.out_channels = field<S>(j, "out_channels", at);
    p.kernel = field<S>(j, "kernel", at);
    p.stride = field_or<S>(j, "stride", 1, at);
    p.padding = field_or<S>(j, "padding", 0, at);
    p.degree = field<int>(j, "degree", at);
    p.balance = field<double>(j, "cp", at);
    p.regularized = kind == "rpolykerv2d";
    p.scale = p.regularized ? field<double>(j, "ap", at) : 1.0;
    p.clamp_positive = field_or<bool>(j, "clamp_positive", false, at);
    l.op = p;
  } else if (kind == "react_pkn") {
    l.op = ReactPknLayer{field<double>(j, "a", at), field<double>(j, "b", at), field<double>(j, "c", at)};
  } else if (kind == "relu") {
    l.op = ReluLayer{};
  } else if (kind == "maxpool") {
    l.op = MaxPoolLayer{field<S>(j, "kernel", at), field_or<S>(j, "stride", field<S>(j, "kernel", at), at)};
  } else if (kind == "avgpool") {
    l.op = AvgPoolLayer{field<S>(j, "kernel", at), field_or<S>(j, "stride", field<S>(j, "kernel", at), at)};
  } else if (kind == "linear") {
    l.op = LinearLayer{field<S>(j, "in_features", at), field<S>(j, "out_features", at),
                       field_or<bool>(j, "bias", true, at)};
  } else if (kind == "flatten") {
    l.op = FlattenLayer{};
  } else if (kind == "residual") {
    ResidualLayer r;
    if (!j.contains("body")) throw FormatError(at + ": missing field 'body'");
    r.body = layers_from_json(j.at("body"), at + "/body");
    if (j.contains("shortcut")) r.shortcut = layers_from_json(j.at("shortcut"), at + "/shortcut");
    l.op = std::move(r);
  } else {
    throw FormatError(at + ": unknown layer kind '" + kind + "'");
  }
  return l;
}

inline std::vector<LayerSpec> layers_from_json(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw FormatError(where + ": expected an array of layers");
  std::vector<LayerSpec> out;
  for (const auto& j : arr) out.push_back(layer_from_json(j, where));
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["spec_version"] = NetworkSpec::kVersion;
  j["name"] = spec.name;
  j["input_shape"] = spec.input_shape;
  j["num_classes"] = spec.num_classes;
  j["layers"] = detail::layers_to_json(spec.layers);
  return j;
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  const std::string where = "network spec";
  if (!j.is_object()) throw FormatError(where + ": expected an object");
  const int version = detail::field<int>(j, "spec_version", where);
  if (version < 1 || version > NetworkSpec::kVersion) {
    throw FormatError(where + ": unsupported spec_version " + std::to_string(version));
  }
  NetworkSpec spec;
  spec.name = detail::field_or<std::string>(j, "name", "", where);
  spec.input_shape = detail::field<Shape>(j, "input_shape", where);
  spec.num_classes = detail::field<std::size_t>(j, "num_classes", where);
  if (!j.contains("layers")) throw FormatError(where + ": missing field 'layers'");
  spec.layers = detail::layers_from_json(j.at("layers"), where + "/layers");
  return spec;
}

inline std::string serialize(const NetworkSpec& spec) { return to_json(spec).dump(2) + "\n"; }

inline NetworkSpec parse_network_spec(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("network spec: ") + e.what());
  }
  return network_spec_from_json(j);
}

}  // namespace pkn
