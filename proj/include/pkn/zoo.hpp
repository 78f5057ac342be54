// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "pkn/spec.hpp"

namespace pkn {

struct ModelPreset {
  std::string name = "cnn3";
  double width_multiplier = 1.0;
  std::size_t num_classes = 10;
  Shape input_shape{3, 32, 32};
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"cnn3",     "lenet",    "vgg11s",   "resnet10",
                                              "resnet14", "resnet18", "resnet32", "resnet50"};
  return names;
}

namespace detail {

class SpecBuilder {
 public:
  SpecBuilder(Shape input, double width) : shape_(std::move(input)), width_(width) {}

  std::size_t scaled(std::size_t base) const {
    return std::max<std::size_t>(1, std::size_t(std::lround(double(base) * width_)));
  }
  const Shape& shape() const { return shape_; }

  void conv(std::vector<LayerSpec>& out, const std::string& name, std::size_t cout, std::size_t k, std::size_t stride,
            std::size_t pad) {
    out.push_back({name, Conv2dLayer{shape_[0], cout, k, stride, pad, true}});
    shape_ = infer_layer(out.back(), shape_);
  }
  void relu(std::vector<LayerSpec>& out, const std::string& name) { out.push_back({name, ReluLayer{}}); }
  void maxpool(std::vector<LayerSpec>& out, const std::string& name) {
    if (shape_[1] < 2 || shape_[2] < 2) return;
    out.push_back({name, MaxPoolLayer{2, 2}});
    shape_ = infer_layer(out.back(), shape_);
  }
  void avgpool(std::vector<LayerSpec>& out, const std::string& name, std::size_t k) {
    out.push_back({name, AvgPoolLayer{k, k}});
    shape_ = infer_layer(out.back(), shape_);
  }
  void flatten(std::vector<LayerSpec>& out, const std::string& name) {
    out.push_back({name, FlattenLayer{}});
    shape_ = Shape{numel(shape_)};
  }
  void linear(std::vector<LayerSpec>& out, const std::string& name, std::size_t features) {
    out.push_back({name, LinearLayer{shape_[0], features, true}});
    shape_ = Shape{features};
  }

  void set_shape(Shape s) { shape_ = std::move(s); }

 private:
  Shape shape_;
  double width_;
};

inline NetworkSpec build_cnn3(const ModelPreset& p) {
  NetworkSpec spec{"cnn3", p.input_shape, p.num_classes, {}};
  SpecBuilder b(p.input_shape, p.width_multiplier);
  const std::array<std::size_t, 3> widths{16, 32, 64};
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const auto tag = "conv" + std::to_string(i + 1);
    b.conv(spec.layers, tag, b.scaled(widths[i]), 3, 1, 1);
    b.relu(spec.layers, tag + ".relu");
    b.maxpool(spec.layers, tag + ".pool");
  }
  b.flatten(spec.layers, "flatten");
  b.linear(spec.layers, "fc", p.num_classes);
  return spec;
}

inline NetworkSpec build_lenet(const ModelPreset& p) {
  NetworkSpec spec{"lenet", p.input_shape, p.num_classes, {}};
  SpecBuilder b(p.input_shape, p.width_multiplier);
  b.conv(spec.layers, "conv1", b.scaled(6), 5, 1, 0);
  b.relu(spec.layers, "conv1.relu");
  b.maxpool(spec.layers, "conv1.pool");
  b.conv(spec.layers, "conv2", b.scaled(16), 5, 1, 0);
  b.relu(spec.layers, "conv2.relu");
  b.maxpool(spec.layers, "conv2.pool");
  b.flatten(spec.layers, "flatten");
  b.linear(spec.layers, "fc1", b.scaled(120));
  b.relu(spec.layers, "fc1.relu");
  b.linear(spec.layers, "fc2", b.scaled(84));
  b.relu(spec.layers, "fc2.relu");
  b.linear(spec.layers, "fc3", p.num_classes);
  return spec;
}

inline NetworkSpec build_vgg11s(const ModelPreset& p) {
  NetworkSpec spec{"vgg11s", p.input_shape, p.num_classes, {}};
  SpecBuilder b(p.input_shape, p.width_multiplier);
  // 0 marks a pooling stage.
  const std::array<std::size_t, 13> cfg{16, 0, 32, 0, 64, 64, 0, 128, 128, 0, 128, 128, 0};
  std::size_t conv_i = 0, pool_i = 0;
  for (auto c : cfg) {
    if (c == 0) {
      b.maxpool(spec.layers, "pool" + std::to_string(++pool_i));
    } else {
      const auto tag = "conv" + std::to_string(++conv_i);
      b.conv(spec.layers, tag, b.scaled(c), 3, 1, 1);
      b.relu(spec.layers, tag + ".relu");
    }
  }
  b.flatten(spec.layers, "flatten");
  b.linear(spec.layers, "fc", p.num_classes);
  return spec;
}

inline NetworkSpec build_resnet(const ModelPreset& p, std::array<std::size_t, 4> blocks, bool bottleneck) {
  NetworkSpec spec{p.name, p.input_shape, p.num_classes, {}};
  SpecBuilder b(p.input_shape, p.width_multiplier);
  b.conv(spec.layers, "stem", b.scaled(16), 3, 1, 1);
  b.relu(spec.layers, "stem.relu");
  const std::array<std::size_t, 4> widths{16, 32, 64, 128};
  const std::size_t expansion = bottleneck ? 4 : 1;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t k = 0; k < blocks[s]; ++k) {
      const std::string tag = "stage" + std::to_string(s + 1) + ".block" + std::to_string(k);
      const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
      const std::size_t mid = b.scaled(widths[s]);
      const std::size_t out = mid * expansion;
      const Shape in = b.shape();
      ResidualLayer res;
      if (bottleneck) {
        b.conv(res.body, tag + ".conv1", mid, 1, 1, 0);
        b.relu(res.body, tag + ".relu1");
        b.conv(res.body, tag + ".conv2", mid, 3, stride, 1);
        b.relu(res.body, tag + ".relu2");
        b.conv(res.body, tag + ".conv3", out, 1, 1, 0);
      } else {
        b.conv(res.body, tag + ".conv1", out, 3, stride, 1);
        b.relu(res.body, tag + ".relu1");
        b.conv(res.body, tag + ".conv2", out, 3, 1, 1);
      }
      const Shape body_out = b.shape();
      if (stride != 1 || in[0] != out) {
        b.set_shape(in);
        b.conv(res.shortcut, tag + ".shortcut", out, 1, stride, 0);
      }
      b.set_shape(body_out);
      spec.layers.push_back({tag, std::move(res)});
      b.relu(spec.layers, tag + ".relu");
    }
  }
  // Keep a coarse 2x2 spatial map in front of the classifier.
  if (b.shape()[1] > 2 && b.shape()[1] == b.shape()[2]) b.avgpool(spec.layers, "head.pool", b.shape()[1] / 2);
  b.flatten(spec.layers, "head.flatten");
  b.linear(spec.layers, "head.fc", p.num_classes);
  return spec;
}

}  // namespace detail

/// Vanilla (ReLU / max-pool) network for a named preset.
inline NetworkSpec build(const ModelPreset& preset) {
  if (preset.width_multiplier <= 0) throw ConfigError("width_multiplier must be positive");
  if (preset.num_classes == 0) throw ConfigError("num_classes must be positive");
  if (preset.input_shape.size() != 3) throw ConfigError("input_shape must be C,H,W");
  NetworkSpec spec;
  const auto& n = preset.name;
  if (n == "cnn3") spec = detail::build_cnn3(preset);
  else if (n == "lenet") spec = detail::build_lenet(preset);
  else if (n == "vgg11s") spec = detail::build_vgg11s(preset);
  else if (n == "resnet10") spec = detail::build_resnet(preset, {1, 1, 1, 1}, false);
  else if (n == "resnet14") spec = detail::build_resnet(preset, {1, 1, 2, 2}, false);
  else if (n == "resnet18") spec = detail::build_resnet(preset, {2, 2, 2, 2}, false);
  else if (n == "resnet32") spec = detail::build_resnet(preset, {3, 4, 5, 3}, false);
  else if (n == "resnet50") spec = detail::build_resnet(preset, {3, 4, 6, 3}, true);
  else {
    std::string all;
    for (const auto& p : preset_names()) all += (all.empty() ? "" : ", ") + p;
    throw ConfigError("unknown preset '" + n + "' (choose one of: " + all + ")");
  }
  validate(spec);
  return spec;
}

/// Convolution and linear layers on the main path (projection shortcuts
/// excluded), the usual way network depth is counted.
inline std::size_t weighted_layer_count(const NetworkSpec& spec) {
  std::size_t n = 0;
  auto count = [&](const std::vector<LayerSpec>& layers, auto& self) -> void {
    for (const auto& l : layers) {
      if (std::holds_alternative<Conv2dLayer>(l.op) || std::holds_alternative<PolyKerv2dLayer>(l.op) ||
          std::holds_alternative<LinearLayer>(l.op))
        ++n;
      if (auto* r = std::get_if<ResidualLayer>(&l.op)) self(r->body, self);
    }
  };
  count(spec.layers, count);
  return n;
}

}  // namespace pkn
