// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pkn/network.hpp"
#include "pkn/surgery.hpp"
#include "pkn/zoo.hpp"

using pkn::LayerSpec;
using pkn::NetworkSpec;

namespace {

pkn::ModelPreset preset(const std::string& name, double wm = 0.25, pkn::Shape input = {3, 32, 32}) {
  pkn::ModelPreset p;
  p.name = name;
  p.width_multiplier = wm;
  p.input_shape = std::move(input);
  return p;
}

std::size_t count_kind(const NetworkSpec& spec, const std::string& kind) {
  std::size_t n = 0;
  pkn::for_each_layer(spec.layers, [&](const LayerSpec& l) { n += pkn::kind_name(l.op) == kind; });
  return n;
}

// Residual nesting with kinds in place of layer payloads.
std::string topology(const std::vector<LayerSpec>& layers) {
  std::string out;
  for (const auto& l : layers) {
    if (auto* r = std::get_if<pkn::ResidualLayer>(&l.op)) {
      out += "res(" + topology(r->body) + "|" + topology(r->shortcut) + ")";
    } else {
      out += "*";
    }
    out += ",";
  }
  return out;
}

NetworkSpec small_block_net() {
  using namespace pkn;
  NetworkSpec s{"block", {2, 8, 8}, 3, {}};
  s.layers.push_back({"stem", Conv2dLayer{2, 4, 3, 1, 1, true}});
  s.layers.push_back({"stem.relu", ReluLayer{}});
  ResidualLayer keep{{{"b0.conv1", Conv2dLayer{4, 4, 3, 1, 1, true}},
                      {"b0.relu1", ReluLayer{}},
                      {"b0.conv2", Conv2dLayer{4, 4, 3, 1, 1, true}}},
                     {}};
  s.layers.push_back({"b0", keep});
  s.layers.push_back({"b0.relu", ReluLayer{}});
  ResidualLayer down{{{"b1.conv1", Conv2dLayer{4, 8, 3, 2, 1, true}},
                      {"b1.relu1", ReluLayer{}},
                      {"b1.conv2", Conv2dLayer{8, 8, 3, 1, 1, true}}},
                     {{"b1.shortcut", Conv2dLayer{4, 8, 1, 2, 0, true}}}};
  s.layers.push_back({"b1", down});
  s.layers.push_back({"b1.relu", ReluLayer{}});
  s.layers.push_back({"pool", MaxPoolLayer{2, 2}});
  s.layers.push_back({"flatten", FlattenLayer{}});
  s.layers.push_back({"fc", LinearLayer{32, 3, true}});
  return s;
}

}  // namespace

TEST(NetworkSpec, JsonRoundTripIsExact) {
  for (const auto& name : pkn::preset_names()) {
    auto spec = pkn::build(preset(name));
    for (auto s : {spec, pkn::surgery(spec, pkn::SurgeryMode::rpkn(3, 0.25, 0.009)),
                   pkn::surgery(spec, pkn::SurgeryMode::react(0.009, 0.5, 0.47))}) {
      const auto text = pkn::serialize(s);
      EXPECT_NE(text.find("\"spec_version\""), std::string::npos);
      auto back = pkn::parse_network_spec(text);
      EXPECT_EQ(back, s) << name;
      EXPECT_EQ(pkn::serialize(back), text) << name;
    }
  }
}

TEST(NetworkSpec, MalformedDocumentsAreFormatErrors) {
  EXPECT_THROW(pkn::parse_network_spec("{"), pkn::FormatError);
  EXPECT_THROW(pkn::parse_network_spec(R"({"spec_version": 99, "input_shape": [1,2,2], "num_classes": 2,
                                          "layers": []})"),
               pkn::FormatError);
  EXPECT_THROW(pkn::parse_network_spec(R"({"spec_version": 1, "input_shape": [1,2,2], "num_classes": 2})"),
               pkn::FormatError);
  EXPECT_THROW(pkn::parse_network_spec(R"({"spec_version": 1, "input_shape": [1,2,2], "num_classes": 2,
                                          "layers": [{"kind": "gelu"}]})"),
               pkn::FormatError);
}

TEST(NetworkSpec, ValidateNamesTheOffendingLayer) {
  auto spec = small_block_net();
  std::get<pkn::LinearLayer>(spec.layers.back().op).in_features = 31;
  try {
    pkn::validate(spec);
    FAIL() << "expected ConfigError";
  } catch (const pkn::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'fc'"), std::string::npos) << e.what();
  }
}

TEST(Surgery, PlainStackBecomesKernelStack) {
  using namespace pkn;
  NetworkSpec s{"plain", {1, 8, 8}, 2, {}};
  s.layers = {{"conv", Conv2dLayer{1, 2, 3, 1, 1, true}},
              {"relu", ReluLayer{}},
              {"pool", MaxPoolLayer{2, 2}},
              {"flatten", FlattenLayer{}},
              {"fc", LinearLayer{32, 2, true}}};
  auto out = surgery(s, SurgeryMode::pkn(2, 0.5));
  ASSERT_EQ(out.layers.size(), 4u);
  EXPECT_EQ(kind_name(out.layers[0].op), "polykerv2d");
  EXPECT_EQ(kind_name(out.layers[1].op), "avgpool");
  EXPECT_EQ(kind_name(out.layers[2].op), "flatten");
  EXPECT_EQ(kind_name(out.layers[3].op), "linear");
  EXPECT_EQ(out.layers[3], s.layers[4]);
  EXPECT_EQ((std::get<AvgPoolLayer>(out.layers[1].op)), (AvgPoolLayer{2, 2}));
}

TEST(Surgery, SpecWithoutConvertibleLayersIsUnchanged) {
  using namespace pkn;
  NetworkSpec s{"mlp", {1, 4, 4}, 3, {{"flatten", FlattenLayer{}}, {"fc", LinearLayer{16, 3, true}}}};
  EXPECT_EQ(surgery(s, SurgeryMode::pkn(2, 0.5)), s);
  EXPECT_EQ(surgery(s, SurgeryMode::react(0.009, 0.5, 0.47)), s);
}

TEST(Surgery, ResidualBlocksMatchHandBuiltSpec) {
  using namespace pkn;
  auto converted = surgery(small_block_net(), SurgeryMode::pkn(2, 0.5));

  auto pk = [](std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p) {
    PolyKerv2dLayer l;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = k;
    l.stride = s;
    l.padding = p;
    l.degree = 2;
    l.balance = 0.5;
    return l;
  };
  NetworkSpec expected{"block", {2, 8, 8}, 3, {}};
  expected.layers.push_back({"stem", pk(2, 4, 3, 1, 1)});
  expected.layers.push_back({"b0", ResidualLayer{{{"b0.conv1", pk(4, 4, 3, 1, 1)}, {"b0.conv2", pk(4, 4, 3, 1, 1)}}, {}}});
  expected.layers.push_back({"b1", ResidualLayer{{{"b1.conv1", pk(4, 8, 3, 2, 1)}, {"b1.conv2", pk(8, 8, 3, 1, 1)}},
                                                 {{"b1.shortcut", pk(4, 8, 1, 2, 0)}}}});
  expected.layers.push_back({"pool", AvgPoolLayer{2, 2}});
  expected.layers.push_back({"flatten", FlattenLayer{}});
  expected.layers.push_back({"fc", LinearLayer{32, 3, true}});
  EXPECT_EQ(converted, expected);
}

TEST(Surgery, ReactModeKeepsConvolutionsAndSwapsActivations) {
  auto vanilla = pkn::build(preset("resnet18"));
  auto react = pkn::surgery(vanilla, pkn::SurgeryMode::react(0.009, 0.5, 0.47));
  EXPECT_EQ(count_kind(react, "relu"), 0u);
  EXPECT_EQ(count_kind(react, "maxpool"), 0u);
  EXPECT_EQ(count_kind(react, "react_pkn"), count_kind(vanilla, "relu"));
  EXPECT_EQ(count_kind(react, "conv2d"), count_kind(vanilla, "conv2d"));
  EXPECT_EQ(topology(react.layers), topology(vanilla.layers));
}

TEST(Surgery, KernelModesPreserveResidualTopologyForEveryPreset) {
  for (const auto& name : pkn::preset_names()) {
    auto vanilla = pkn::build(preset(name));
    for (auto mode : {pkn::SurgeryMode::pkn(2, 0.5), pkn::SurgeryMode::rpkn(2, 0.5, 0.009)}) {
      auto out = pkn::surgery(vanilla, mode);
      EXPECT_NO_THROW(pkn::validate(out)) << name;
      EXPECT_EQ(count_kind(out, "relu") + count_kind(out, "maxpool") + count_kind(out, "conv2d"), 0u) << name;
      EXPECT_EQ(pkn::weighted_layer_count(out), pkn::weighted_layer_count(vanilla)) << name;
      // relu layers disappear, so compare residual nesting only
      std::string a = topology(out.layers), b = topology(vanilla.layers);
      std::erase(a, '*');
      std::erase(a, ',');
      std::erase(b, '*');
      std::erase(b, ',');
      EXPECT_EQ(a, b) << name;
    }
  }
}

TEST(Surgery, IsIdempotentInKernelMode) {
  for (const auto& name : pkn::preset_names()) {
    auto once = pkn::surgery(pkn::build(preset(name)), pkn::SurgeryMode::pkn(3, 0.5));
    EXPECT_EQ(pkn::surgery(once, pkn::SurgeryMode::pkn(3, 0.5)), once) << name;
  }
}

TEST(Surgery, RejectsUnsetLayerKind) {
  NetworkSpec s{"bad", {1, 4, 4}, 1, {{"mystery", {}}}};
  EXPECT_THROW(pkn::surgery(s, pkn::SurgeryMode::pkn(2, 0.5)), pkn::ConversionError);
  EXPECT_THROW(pkn::surgery(small_block_net(), pkn::SurgeryMode::pkn(0, 0.5)), pkn::ConfigError);
}

TEST(Zoo, WeightedLayerCountsMatchDepthNames) {
  const std::vector<std::pair<std::string, std::size_t>> expected{
      {"resnet10", 10}, {"resnet14", 14}, {"resnet18", 18}, {"resnet32", 32}, {"resnet50", 50}};
  for (const auto& [name, depth] : expected) EXPECT_EQ(pkn::weighted_layer_count(pkn::build(preset(name))), depth) << name;
}

TEST(Zoo, Cnn3HasThreeConvolutions) {
  auto spec = pkn::build(preset("cnn3"));
  EXPECT_EQ(count_kind(spec, "conv2d"), 3u);
  EXPECT_EQ(count_kind(spec, "linear"), 1u);
}

TEST(Zoo, ResnetBlockCounts) {
  auto blocks_per_stage = [](const NetworkSpec& spec) {
    std::vector<std::size_t> counts(4, 0);
    for (const auto& l : spec.layers)
      if (std::holds_alternative<pkn::ResidualLayer>(l.op)) ++counts[l.name[5] - '1'];
    return counts;
  };
  EXPECT_EQ(blocks_per_stage(pkn::build(preset("resnet10"))), (std::vector<std::size_t>{1, 1, 1, 1}));
  EXPECT_EQ(blocks_per_stage(pkn::build(preset("resnet14"))), (std::vector<std::size_t>{1, 1, 2, 2}));
  EXPECT_EQ(blocks_per_stage(pkn::build(preset("resnet18"))), (std::vector<std::size_t>{2, 2, 2, 2}));
  EXPECT_EQ(blocks_per_stage(pkn::build(preset("resnet32"))), (std::vector<std::size_t>{3, 4, 5, 3}));
  EXPECT_EQ(blocks_per_stage(pkn::build(preset("resnet50"))), (std::vector<std::size_t>{3, 4, 6, 3}));
}

TEST(Zoo, UnknownPresetListsChoices) {
  try {
    pkn::build(preset("resnet7"));
    FAIL() << "expected ConfigError";
  } catch (const pkn::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("resnet50"), std::string::npos);
  }
}

TEST(Zoo, EveryPresetProducesFiniteLogits) {
  std::mt19937_64 rng(41);
  std::normal_distribution<float> normal;
  for (const auto& name : pkn::preset_names()) {
    for (auto input : {pkn::Shape{3, 32, 32}, pkn::Shape{1, 28, 28}, pkn::Shape{1, 16, 16}}) {
      auto net = pkn::Network<float>::build(pkn::build(preset(name, 0.25, input)), 1);
      pkn::Shape batch{2};
      batch.insert(batch.end(), input.begin(), input.end());
      std::vector<float> v(pkn::numel(batch));
      for (auto& x : v) x = normal(rng);
      pkn::NoGradGuard guard;
      auto logits = net.forward(pkn::Tensor<float>(batch, v));
      EXPECT_EQ(logits.shape(), (pkn::Shape{2, 10})) << name;
      EXPECT_TRUE(pkn::all_finite(logits.data())) << name << " " << pkn::to_string(input);
    }
  }
}

TEST(InitParameters, SameSeedSameValuesDifferentSeedDiffers) {
  auto spec = pkn::build(preset("resnet10"));
  auto a = pkn::init_parameters<float>(spec, 7), b = pkn::init_parameters<float>(spec, 7);
  auto c = pkn::init_parameters<float>(spec, 8);
  double max_diff = 0;
  for (const auto& [name, t] : a) {
    EXPECT_EQ(t.values(), b.get(name).values()) << name;
    for (std::size_t i = 0; i < t.numel(); ++i) max_diff = std::max(max_diff, double(std::abs(t[i] - c.get(name)[i])));
  }
  EXPECT_GT(max_diff, 0.0);
}

TEST(InitParameters, ReactAndKernelCoefficientsTakeConfiguredStart) {
  auto react = pkn::surgery(pkn::build(preset("cnn3")), pkn::SurgeryMode::react(0.009, 0.5, 0.47));
  auto reg = pkn::init_parameters<double>(react, 1);
  EXPECT_EQ(reg.get("conv1.relu.a").item(), 0.009);
  EXPECT_EQ(reg.get("conv1.relu.b").item(), 0.5);
  EXPECT_EQ(reg.get("conv1.relu.c").item(), 0.47);

  auto kernel = pkn::surgery(pkn::build(preset("cnn3")), pkn::SurgeryMode::rpkn(2, 0.25, 0.009));
  auto kreg = pkn::init_parameters<double>(kernel, 1);
  EXPECT_EQ(kreg.get("conv2.cp").item(), 0.25);
  EXPECT_EQ(kreg.get("conv2.ap").item(), 0.009);
  for (auto v : kreg.get("conv2.bias").values()) EXPECT_EQ(v, 0.0);
}

TEST(Network, ForwardTraceRecordsEveryLayer) {
  auto net = pkn::Network<double>::build(small_block_net(), 3);
  pkn::ForwardTrace trace;
  net.forward(pkn::Tensor<double>::full({1, 2, 8, 8}, 0.1), &trace);
  // stem, relu, (conv1 relu1 conv2) b0, relu, (conv1 relu1 conv2 shortcut) b1, relu, pool, flatten, fc
  ASSERT_EQ(trace.size(), 16u);
  for (std::size_t i = 0; i < trace.size(); ++i) EXPECT_EQ(trace[i].index, i + 1);
  EXPECT_EQ(trace.back().name, "fc");
  EXPECT_EQ(trace[5].name, "b0");
}

TEST(Network, RejectsWrongInputShape) {
  auto net = pkn::Network<double>::build(small_block_net(), 3);
  EXPECT_THROW(net.forward(pkn::Tensor<double>::zeros({1, 3, 8, 8})), pkn::DimensionError);
}

TEST(Transplant, ReactModeKeepsConvWeightsBitwise) {
  auto vanilla_spec = pkn::build(preset("resnet10"));
  auto vanilla = pkn::Network<float>::build(vanilla_spec, 11);
  auto react = pkn::Network<float>::build(pkn::surgery(vanilla_spec, pkn::SurgeryMode::react(0.009, 0.5, 0.47)), 99);
  auto report = pkn::transplant(vanilla.params(), react);
  for (const auto& [name, t] : vanilla.params()) EXPECT_EQ(react.params().get(name).values(), t.values()) << name;
  EXPECT_EQ(report.copied.size(), vanilla.params().size());
  EXPECT_FALSE(report.kept.empty());
}

TEST(Transplant, KernelModeKeepsWeightsAndDefaultsCoefficients) {
  auto vanilla_spec = pkn::build(preset("cnn3"));
  auto vanilla = pkn::Network<float>::build(vanilla_spec, 11);
  auto pkn_net = pkn::Network<float>::build(pkn::surgery(vanilla_spec, pkn::SurgeryMode::pkn(2, 0.5)), 99);
  pkn::transplant(vanilla.params(), pkn_net);
  EXPECT_EQ(pkn_net.params().get("conv1.weight").values(), vanilla.params().get("conv1.weight").values());
  EXPECT_EQ(pkn_net.params().get("conv1.cp").item(), 0.5f);
}

TEST(Transplant, ClassCountMismatchIsError) {
  auto ten = pkn::Network<float>::build(pkn::build(preset("cnn3")), 1);
  auto p = preset("cnn3");
  p.num_classes = 4;
  auto four = pkn::Network<float>::build(pkn::build(p), 1);
  try {
    pkn::transplant(ten.params(), four);
    FAIL() << "expected ConfigError";
  } catch (const pkn::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("fc.weight"), std::string::npos) << e.what();
  }
}
