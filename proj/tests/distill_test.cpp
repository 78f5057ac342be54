// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "pkn/distill.hpp"

namespace {

// flatten -> linear(2 -> 2): logits = x W + b.
pkn::NetworkSpec toy_spec() {
  pkn::NetworkSpec spec{"toy", {2, 1, 1}, 2, {}};
  spec.layers.push_back({"flatten", pkn::FlattenLayer{}});
  spec.layers.push_back({"fc", pkn::LinearLayer{2, 2, true}});
  return spec;
}

pkn::Network<double> toy_net(std::array<double, 4> w, std::array<double, 2> b) {
  auto net = pkn::Network<double>::build(toy_spec(), 0);
  std::copy(w.begin(), w.end(), net.params().get("fc.weight").mutable_data().begin());
  std::copy(b.begin(), b.end(), net.params().get("fc.bias").mutable_data().begin());
  return net;
}

using Mat = std::array<double, 4>;
using Vec = std::array<double, 2>;

std::array<double, 2> softmax2(double a, double b) {
  const double m = std::max(a, b), ea = std::exp(a - m), eb = std::exp(b - m);
  return {ea / (ea + eb), eb / (ea + eb)};
}

// Logits of a 2x2 linear layer for each sample; w is stored [in, out].
std::vector<Vec> logits(const Mat& w, const Vec& b, const std::vector<Vec>& x) {
  std::vector<Vec> out;
  for (const auto& s : x) out.push_back({s[0] * w[0] + s[1] * w[2] + b[0], s[0] * w[1] + s[1] * w[3] + b[1]});
  return out;
}

// Plain SGD on W, b given dL/dlogits per sample.
void sgd(Mat& w, Vec& b, const std::vector<Vec>& x, const std::vector<Vec>& dz, double lr) {
  Mat gw{};
  Vec gb{};
  for (std::size_t n = 0; n < x.size(); ++n)
    for (int o = 0; o < 2; ++o) {
      gb[o] += dz[n][o];
      for (int i = 0; i < 2; ++i) gw[i * 2 + o] += dz[n][o] * x[n][i];
    }
  for (int k = 0; k < 4; ++k) w[k] -= lr * gw[k];
  for (int k = 0; k < 2; ++k) b[k] -= lr * gb[k];
}

pkn::Tensor<double> batch_tensor(const std::vector<Vec>& x) {
  std::vector<double> v;
  for (const auto& s : x) v.insert(v.end(), s.begin(), s.end());
  return pkn::Tensor<double>({x.size(), 2, 1, 1}, v);
}

}  // namespace

TEST(KdStep, MatchesHandSimulationOfBothUpdates) {
  const std::vector<Vec> x{{0.5, -1.0}, {1.5, 0.25}, {-0.7, 0.9}};
  const std::vector<int> y{0, 1, 1};
  Mat tw{0.3, -0.2, 0.1, 0.4}, sw{-0.1, 0.25, 0.2, -0.3};
  Vec tb{0.05, -0.05}, sb{0.0, 0.1};
  pkn::KDConfig cfg;
  cfg.teacher_lr = 0.7;
  cfg.student_lr = 0.4;
  cfg.temperature = 2.0;
  cfg.lambda = 0.3;

  auto teacher = toy_net(tw, tb), student = toy_net(sw, sb);
  pkn::OptimizerOptions to, so;
  to.lr = cfg.teacher_lr;
  so.lr = cfg.student_lr;
  auto topt = pkn::make_optimizer<double>("sgd", pkn::trainable_params(teacher.params()), to);
  auto sopt = pkn::make_optimizer<double>("sgd", pkn::trainable_params(student.params()), so);
  auto r = pkn::kd_step(teacher, student, batch_tensor(x), std::span<const int>(y), cfg, *topt, *sopt);

  const double N = double(x.size()), T = cfg.temperature, lam = cfg.lambda;
  // (1) teacher CE step
  double teacher_loss = 0;
  std::vector<Vec> dz;
  for (std::size_t n = 0; n < x.size(); ++n) {
    const auto z = logits(tw, tb, x)[n];
    const auto p = softmax2(z[0], z[1]);
    teacher_loss -= std::log(p[y[n]]) / N;
    dz.push_back({(p[0] - (y[n] == 0)) / N, (p[1] - (y[n] == 1)) / N});
  }
  sgd(tw, tb, x, dz, cfg.teacher_lr);
  // (2) soft labels from the updated teacher
  std::vector<std::array<double, 2>> soft;
  for (const auto& z : logits(tw, tb, x)) soft.push_back(softmax2(z[0] / T, z[1] / T));
  // (3) student: lam*T^2*KL(soft || softmax(s/T)) + (1-lam)*CE(s, y)
  double student_loss = 0;
  dz.clear();
  for (std::size_t n = 0; n < x.size(); ++n) {
    const auto s = logits(sw, sb, x)[n];
    const auto q = softmax2(s[0] / T, s[1] / T);
    const auto p = softmax2(s[0], s[1]);
    double kl = 0;
    for (int c = 0; c < 2; ++c) kl += soft[n][c] * (std::log(soft[n][c]) - std::log(q[c]));
    student_loss += (lam * T * T * kl - (1 - lam) * std::log(p[y[n]])) / N;
    Vec d{};
    for (int c = 0; c < 2; ++c) d[c] = (lam * T * (q[c] - soft[n][c]) + (1 - lam) * (p[c] - (y[n] == c))) / N;
    dz.push_back(d);
  }
  sgd(sw, sb, x, dz, cfg.student_lr);

  EXPECT_NEAR(r.teacher.loss, teacher_loss, 1e-12);
  EXPECT_NEAR(r.student.loss, student_loss, 1e-12);
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(teacher.params().get("fc.weight")[k], tw[k], 1e-8);
    EXPECT_NEAR(student.params().get("fc.weight")[k], sw[k], 1e-8);
  }
  for (int k = 0; k < 2; ++k) {
    EXPECT_NEAR(teacher.params().get("fc.bias")[k], tb[k], 1e-8);
    EXPECT_NEAR(student.params().get("fc.bias")[k], sb[k], 1e-8);
  }
}

TEST(KdStep, TeacherGradientsAreZeroAfterStudentStep) {
  auto teacher = pkn::Network<float>::build(pkn::build(pkn::ModelPreset{"cnn3", 0.25, 3, {1, 8, 8}}), 1);
  auto student = pkn::Network<float>::build(
      pkn::surgery(pkn::build(pkn::ModelPreset{"cnn3", 0.25, 3, {1, 8, 8}}), pkn::SurgeryMode::react(0.009, 0.5, 0.47)),
      1);
  auto topt = pkn::make_optimizer<float>("adam", pkn::trainable_params(teacher.params()), {});
  auto sopt = pkn::make_optimizer<float>("adam", pkn::trainable_params(student.params()), {});
  const std::vector<int> y{0, 2, 1, 1};
  auto r = pkn::kd_step(teacher, student, pkn::standard_normal_batch<float>({1, 8, 8}, 4, 3), std::span<const int>(y),
                        pkn::KDConfig{}, *topt, *sopt);
  ASSERT_TRUE(r.student_ran);
  for (const auto& [name, t] : teacher.params())
    for (auto g : t.grad()) EXPECT_EQ(g, 0.0f) << name;
  double student_grad = 0;
  for (const auto& [name, t] : student.params())
    for (auto g : t.grad()) student_grad += std::abs(g);
  EXPECT_GT(student_grad, 0);
}

TEST(KdStep, SoftLabelsAreDistributions) {
  auto teacher = pkn::Network<double>::build(pkn::build(pkn::ModelPreset{"lenet", 0.5, 10, {3, 16, 16}}), 4);
  for (double T : {0.5, 1.0, 4.0}) {
    auto soft = pkn::soft_labels(teacher, pkn::standard_normal_batch<double>({3, 16, 16}, 5, 2), T);
    EXPECT_FALSE(soft.requires_grad());
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 10; ++c) s += soft[r * 10 + c];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(KdStep, PureKlNeverReadsHardLabels) {
  auto student = toy_net({0.1, 0.2, -0.3, 0.4}, {0, 0});
  auto opt = pkn::make_optimizer<double>("sgd", pkn::trainable_params(student.params()), {});
  const auto soft = pkn::Tensor<double>({1, 2}, {0.25, 0.75});
  pkn::KDConfig cfg;  // lambda = 1
  // Cross-entropy with zero labels for one row would throw if it were evaluated.
  EXPECT_NO_THROW(pkn::student_step(student, *opt, batch_tensor({{1.0, 2.0}}), soft, {}, cfg, 0));
  cfg.lambda = 0.5;
  EXPECT_THROW(pkn::student_step(student, *opt, batch_tensor({{1.0, 2.0}}), soft, {}, cfg, 0), pkn::DimensionError);
}

TEST(KdStep, LambdaZeroIsPlainCrossEntropyTraining) {
  const std::vector<Vec> x{{0.5, -1.0}, {1.5, 0.25}};
  const std::vector<int> y{1, 0};
  auto a = toy_net({0.1, 0.2, -0.3, 0.4}, {0.1, 0}), b = toy_net({0.1, 0.2, -0.3, 0.4}, {0.1, 0});
  pkn::OptimizerOptions o;
  o.lr = 0.3;
  auto oa = pkn::make_optimizer<double>("sgd", pkn::trainable_params(a.params()), o);
  auto ob = pkn::make_optimizer<double>("sgd", pkn::trainable_params(b.params()), o);
  pkn::KDConfig cfg;
  cfg.lambda = 0;
  const auto soft = pkn::Tensor<double>({2, 2}, {0.5, 0.5, 0.9, 0.1});
  auto ra = pkn::student_step(a, *oa, batch_tensor(x), soft, std::span<const int>(y), cfg, 0);
  auto rb = pkn::train_step(b, *ob, batch_tensor(x), std::span<const int>(y), 0);
  EXPECT_EQ(ra.loss, rb.loss);
  EXPECT_EQ(a.params().get("fc.weight").values(), b.params().get("fc.weight").values());
}

TEST(KdStep, StudentMatchingUpdatedTeacherHasZeroKl) {
  auto teacher = toy_net({0.3, -0.2, 0.1, 0.4}, {0.05, -0.05});
  auto student = toy_net({0.3, -0.2, 0.1, 0.4}, {0.05, -0.05});
  pkn::OptimizerOptions o;
  o.lr = 0.0;
  auto topt = pkn::make_optimizer<double>("sgd", pkn::trainable_params(teacher.params()), o);
  auto sopt = pkn::make_optimizer<double>("sgd", pkn::trainable_params(student.params()), o);
  const std::vector<int> y{0, 1};
  auto r = pkn::kd_step(teacher, student, batch_tensor({{0.5, -1.0}, {1.5, 0.25}}), std::span<const int>(y),
                        pkn::KDConfig{}, *topt, *sopt);
  EXPECT_NEAR(r.student.loss, 0.0, 1e-15);

  // Teacher moves, student frozen: the loss is KL(post-update || pre-update) >= 0.
  o.lr = 1.0;
  auto topt2 = pkn::make_optimizer<double>("sgd", pkn::trainable_params(teacher.params()), o);
  r = pkn::kd_step(teacher, student, batch_tensor({{0.5, -1.0}, {1.5, 0.25}}), std::span<const int>(y),
                   pkn::KDConfig{}, *topt2, *sopt);
  EXPECT_GT(r.student.loss, 0.0);
}

TEST(KdStep, ClassCountMismatchIsConfigError) {
  auto teacher = toy_net({1, 0, 0, 1}, {0, 0});
  auto spec = toy_spec();
  spec.num_classes = 3;
  std::get<pkn::LinearLayer>(spec.layers.back().op).out_features = 3;
  auto student = pkn::Network<double>::build(spec, 0);
  auto topt = pkn::make_optimizer<double>("sgd", pkn::trainable_params(teacher.params()), {});
  auto sopt = pkn::make_optimizer<double>("sgd", pkn::trainable_params(student.params()), {});
  const std::vector<int> y{0};
  EXPECT_THROW(pkn::kd_step(teacher, student, batch_tensor({{1, 1}}), std::span<const int>(y), pkn::KDConfig{}, *topt,
                            *sopt),
               pkn::ConfigError);
}

TEST(KdConfig, RejectsBadTemperatureAndLambda) {
  pkn::KDConfig c;
  c.temperature = 0;
  EXPECT_THROW(c.validate(), pkn::ConfigError);
  c.temperature = 1;
  c.lambda = 1.5;
  EXPECT_THROW(c.validate(), pkn::ConfigError);
}

namespace {

pkn::TrainConfig tiny_distill_config(std::size_t epochs) {
  pkn::TrainConfig c;
  c.model = {"cnn3", 0.25, std::nullopt};
  c.data.spirals.n_per_class = 30;
  c.data.val_per_class = 10;
  c.batch_size = 16;
  c.epochs = epochs;
  c.kd = pkn::KDConfig{};
  c.kd->teacher_lr = 3e-3;
  c.kd->student_lr = 1e-3;
  c.kd->student_mode = pkn::SurgeryMode::react(0.009, 0.5, 0.47);
  return c;
}

}  // namespace

TEST(TrainDistilled, ZeroEpochsGivesEmptyStream) {
  auto r = pkn::train_distilled(tiny_distill_config(0), false);
  EXPECT_TRUE(r.records.empty());
  EXPECT_FALSE(r.diverged);
}

TEST(TrainDistilled, EmitsTeacherAndStudentRecordsPerEpochAndReplays) {
  auto a = pkn::train_distilled(tiny_distill_config(3), false);
  auto b = pkn::train_distilled(tiny_distill_config(3), false);
  ASSERT_EQ(a.records.size(), 6u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].role, i % 2 ? "student" : "teacher");
    EXPECT_EQ(a.records[i].epoch, i / 2);
    EXPECT_EQ(pkn::to_json(a.records[i]).dump(), pkn::to_json(b.records[i]).dump());
  }
}

TEST(TrainDistilled, RequiresStudentMode) {
  auto c = tiny_distill_config(1);
  c.kd->student_mode.reset();
  EXPECT_THROW(pkn::train_distilled(c, false), pkn::ConfigError);
}
