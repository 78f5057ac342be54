// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "pkn/diagnostics.hpp"

using pkn::NetworkSpec;

namespace {

// k single-channel 1x1 layers, weight 1, c_p = 0, b = 0, degree 2.
template <class T>
pkn::Network<T> squaring_chain(std::size_t k) {
  NetworkSpec spec{"chain", {1, 1, 1}, 1, {}};
  for (std::size_t i = 0; i < k; ++i) {
    pkn::PolyKerv2dLayer p;
    p.in_channels = p.out_channels = 1;
    p.kernel = 1;
    p.balance = 0.0;
    spec.layers.push_back({"pk" + std::to_string(i + 1), p});
  }
  spec.layers.push_back({"flatten", pkn::FlattenLayer{}});
  auto net = pkn::Network<T>::build(spec, 0);
  for (std::size_t i = 0; i < k; ++i) net.params().get("pk" + std::to_string(i + 1) + ".weight").mutable_data()[0] = T(1);
  return net;
}

NetworkSpec conv_only() {
  NetworkSpec spec{"convs", {2, 6, 6}, 4, {}};
  spec.layers.push_back({"c1", pkn::Conv2dLayer{2, 3, 3, 1, 1, true}});
  spec.layers.push_back({"c2", pkn::Conv2dLayer{3, 4, 3, 1, 0, true}});
  spec.layers.push_back({"flatten", pkn::FlattenLayer{}});
  spec.layers.push_back({"fc", pkn::LinearLayer{64, 4, true}});
  return spec;
}

}  // namespace

TEST(TrackActivations, SquaringChainFollowsPowerTower) {
  auto rms = pkn::track_activations(squaring_chain<double>(8), pkn::Tensor<double>({1, 1, 1, 1}, {2.0}));
  for (std::size_t k = 1; k <= 8; ++k) EXPECT_EQ(rms[k - 1], std::ldexp(1.0, 1 << k)) << k;
}

TEST(TrackActivations, ZeroInputThroughBiasFreeKernelNetworkStaysZero) {
  auto spec = pkn::surgery(pkn::build(pkn::ModelPreset{"resnet10", 0.25}), pkn::SurgeryMode::pkn(2, 0.0));
  auto net = pkn::Network<float>::build(spec, 3);
  for (auto& [name, t] : net.params())
    if (name.ends_with(".bias")) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
  auto rms = pkn::track_activations(net, pkn::Tensor<float>::zeros({1, 3, 32, 32}));
  for (double r : rms) EXPECT_EQ(r, 0.0);
}

TEST(TrackActivations, VanillaResnetIsFinite) {
  auto net = pkn::Network<float>::build(pkn::build(pkn::ModelPreset{"resnet10"}), 5);
  for (double r : pkn::track_activations(net, pkn::standard_normal_batch<float>({3, 32, 32}, 2, 5)))
    EXPECT_TRUE(std::isfinite(r));
}

TEST(MseProbe, DegreeOneVariantOfConvNetworkIsExact) {
  auto spec = conv_only();
  auto vanilla = pkn::Network<double>::build(spec, 1);
  auto variant = pkn::Network<double>::build(pkn::surgery(spec, pkn::SurgeryMode::pkn(1, 0.0)), 2);
  // polykerv biases are fresh zeros; carry the conv biases across too
  pkn::transplant(vanilla.params(), variant);
  auto report = pkn::mse_probe(vanilla, variant, pkn::standard_normal_batch<double>({2, 6, 6}, 3, 9));
  ASSERT_TRUE(report.finite());
  EXPECT_LT(*report.mse, 1e-24);
}

TEST(MseProbe, NetworkAgainstItselfIsZero) {
  auto net = pkn::Network<float>::build(pkn::build(pkn::ModelPreset{"lenet", 0.5}), 4);
  auto report = pkn::mse_probe(net, net, pkn::standard_normal_batch<float>({3, 32, 32}, 2, 4));
  ASSERT_TRUE(report.finite());
  EXPECT_EQ(*report.mse, 0.0);
  EXPECT_FALSE(report.first_nonfinite_layer);
}

TEST(MseProbe, OutputShapeMismatchIsConfigError) {
  auto a = pkn::Network<double>::build(conv_only(), 1);
  auto other = conv_only();
  other.num_classes = 5;
  std::get<pkn::LinearLayer>(other.layers.back().op).out_features = 5;
  auto b = pkn::Network<double>::build(other, 1);
  EXPECT_THROW(pkn::mse_probe(a, b, pkn::standard_normal_batch<double>({2, 6, 6}, 1, 1)), pkn::ConfigError);
}

TEST(MseProbe, FloatSquaringChainFirstOverflowsAtSeventhLayer) {
  auto chain = squaring_chain<float>(8);
  auto report = pkn::mse_probe(chain, chain, pkn::Tensor<float>({1, 1, 1, 1}, {2.0f}));
  EXPECT_FALSE(report.finite());
  ASSERT_TRUE(report.first_nonfinite_layer);
  // 2^(2^7) = 2^128 is already past the float range.
  EXPECT_EQ(*report.first_nonfinite_layer, 7u);
  EXPECT_EQ(report.first_nonfinite_name, "pk7");
}

TEST(MseProbe, FirstNonfiniteLayerIsMinimal) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto report = pkn::probe_preset<float>(pkn::ModelPreset{"resnet18", 0.5}, pkn::SurgeryMode::pkn(2, 0.0), seed);
    if (!report.first_nonfinite_layer) continue;
    const auto idx = *report.first_nonfinite_layer;
    for (const auto& rec : report.activations) {
      if (rec.index < idx) EXPECT_TRUE(rec.finite) << rec.name;
    }
    EXPECT_FALSE(report.activations[idx - 1].finite);
  }
}

TEST(MseProbe, ShallowStaysFiniteDeepResidualOverflows) {
  int shallow_bad = 0, deep_bad = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    shallow_bad += !pkn::probe_preset<float>({"cnn3"}, pkn::SurgeryMode::pkn(2, 0.0), seed).finite();
    deep_bad += !pkn::probe_preset<float>({"resnet18"}, pkn::SurgeryMode::pkn(2, 0.0), seed).finite();
  }
  EXPECT_EQ(shallow_bad, 0);
  EXPECT_EQ(deep_bad, 5);
}

TEST(ProbeReport, SerializesNonFiniteAsNull) {
  auto chain = squaring_chain<float>(8);
  auto report = pkn::mse_probe(chain, chain, pkn::Tensor<float>({1, 1, 1, 1}, {2.0f}));
  auto j = nlohmann::json::parse(pkn::to_jsonl(report));
  EXPECT_FALSE(j["finite"].get<bool>());
  EXPECT_TRUE(j["mse"].is_null());
  EXPECT_EQ(j["first_nonfinite_layer"].get<int>(), 7);
  EXPECT_TRUE(j["activations"][7]["rms"].is_null());
}

TEST(NanSentinel, FiniteStepIsOk) {
  auto net = pkn::Network<double>::build(conv_only(), 1);
  for (auto& [n, t] : net.params()) t.mutable_grad();
  EXPECT_FALSE(pkn::nan_sentinel(3, 0.7, net.params()));
}

TEST(NanSentinel, InfiniteLossIsReportedAsLoss) {
  auto net = pkn::Network<double>::build(conv_only(), 1);
  auto d = pkn::nan_sentinel(4, INFINITY, net.params());
  ASSERT_TRUE(d);
  EXPECT_EQ(d->step, 4u);
  EXPECT_EQ(d->location, "loss");
}

TEST(NanSentinel, PlantedGradientNanNamesParameter) {
  auto net = pkn::Network<double>::build(conv_only(), 1);
  for (auto& [n, t] : net.params()) t.mutable_grad();
  net.params().get("c2.weight").mutable_grad()[5] = NAN;
  auto d = pkn::nan_sentinel(9, 0.1, net.params());
  ASSERT_TRUE(d);
  EXPECT_EQ(d->location, "c2.weight");
}

TEST(GradNorm, IsEuclideanNormOverAllGradients) {
  auto net = pkn::Network<double>::build(conv_only(), 1);
  net.params().get("c1.bias").mutable_grad()[0] = 3;
  net.params().get("fc.bias").mutable_grad()[1] = 4;
  EXPECT_DOUBLE_EQ(pkn::grad_norm(net.params()), 5.0);
}
