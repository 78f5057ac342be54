// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pkn/train.hpp"

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("pkn_train_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

pkn::TrainConfig small_config(const std::string& name) {
  pkn::TrainConfig c;
  c.run_id = name;
  c.model = {"cnn3", 0.25, std::nullopt};
  c.data.spirals.n_per_class = 40;
  c.data.val_per_class = 20;
  c.batch_size = 16;
  c.epochs = 3;
  c.optim.lr = 3e-3;
  c.output_dir = temp_dir(name).string();
  return c;
}

}  // namespace

TEST(TrainConfig, DefaultsParseAndRoundTrip) {
  auto c = pkn::train_config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.model.preset, "cnn3");
  EXPECT_EQ(c.optimizer, "adam");
  EXPECT_FALSE(c.augment_enabled());
  auto again = pkn::train_config_from_json(pkn::to_json(c));
  EXPECT_EQ(pkn::to_json(again).dump(), pkn::to_json(c).dump());

  nlohmann::json j{{"model", {{"preset", "resnet18"}, {"width", 0.5}, {"mode", {{"kind", "rpkn"}, {"degree", 3}}}}},
                   {"optimizer", "momo_adam"},
                   {"scheduler", {{"kind", "plateau"}, {"patience", 4}}},
                   {"layerwise", {{"kind", "linear_decay"}, {"ratio", 0.1}}},
                   {"kd", {{"student_mode", {{"kind", "react"}}}, {"lambda", 0.5}}}};
  auto d = pkn::train_config_from_json(j);
  ASSERT_TRUE(d.model.mode);
  EXPECT_EQ(d.model.mode->kind, pkn::SurgeryMode::Kind::rpkn);
  EXPECT_EQ(d.model.mode->degree, 3);
  EXPECT_EQ(d.scheduler.patience, 4);
  ASSERT_TRUE(d.kd && d.kd->student_mode);
  EXPECT_EQ(pkn::to_json(pkn::train_config_from_json(pkn::to_json(d))).dump(), pkn::to_json(d).dump());
}

TEST(TrainConfig, EveryInvalidFieldIsNamed) {
  nlohmann::json j{{"model", {{"preset", "resnet7"}, {"width", -1}}},
                   {"optimizer", "rmsprop"},
                   {"optim", {{"lr", -0.1}, {"beta1", 1.0}}},
                   {"batch_size", 0},
                   {"epochs", "ten"},
                   {"precision", 16},
                   {"kd", {{"temperature", 0}, {"lambda", 2}}},
                   {"learning_rate", 0.1}};
  try {
    pkn::train_config_from_json(j);
    FAIL();
  } catch (const pkn::ConfigError& e) {
    const std::string msg = e.what();
    for (const char* field : {"model.preset", "model.width", "optimizer:", "optim.lr", "optim.beta1", "batch_size",
                              "epochs", "precision", "kd.temperature", "kd.lambda", "learning_rate: unknown field"})
      EXPECT_NE(msg.find(field), std::string::npos) << field << "\n" << msg;
    EXPECT_NE(msg.find("cnn3"), std::string::npos) << "preset list missing";
  }
}

TEST(TrainConfig, MissingDatasetFilesAreReportedAtValidation) {
  nlohmann::json j{{"data", {{"source", "cifar10"}, {"dir", "/nonexistent/cifar"}}}};
  try {
    pkn::train_config_from_json(j);
    FAIL();
  } catch (const pkn::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("data_batch_1.bin"), std::string::npos) << e.what();
  }
}

TEST(TrainConfig, OverridesFollowDottedPaths) {
  nlohmann::json j = nlohmann::json::object();
  pkn::apply_override(j, "optim.lr=3e-4");
  pkn::apply_override(j, "model.preset=resnet10");
  pkn::apply_override(j, "augment=true");
  auto c = pkn::train_config_from_json(j);
  EXPECT_DOUBLE_EQ(c.optim.lr, 3e-4);
  EXPECT_EQ(c.model.preset, "resnet10");
  EXPECT_TRUE(c.augment_enabled());
  EXPECT_THROW(pkn::apply_override(j, "novalue"), pkn::ConfigError);
}

TEST(Train, ZeroEpochsWritesHeaderOnlyMetrics) {
  auto c = small_config("zero");
  c.epochs = 0;
  auto r = pkn::run_train(c);
  EXPECT_TRUE(r.records.empty());
  auto lines = read_jsonl(fs::path(c.output_dir) / "metrics.jsonl");
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_EQ(lines[0]["type"], "header");
  EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "config.json"));
}

TEST(Train, SeedReplayIsBitwiseIdentical) {
  auto a = small_config("replay_a"), b = small_config("replay_b");
  b.run_id = a.run_id;
  pkn::run_train(a);
  pkn::run_train(b);
  const auto ma = slurp(fs::path(a.output_dir) / "metrics.jsonl");
  EXPECT_EQ(ma, slurp(fs::path(b.output_dir) / "metrics.jsonl"));
  EXPECT_EQ(read_jsonl(fs::path(a.output_dir) / "metrics.jsonl").size(), 4u);

  auto c = small_config("replay_c");
  c.run_id = a.run_id;
  c.seed = 1;
  pkn::run_train(c);
  EXPECT_NE(ma, slurp(fs::path(c.output_dir) / "metrics.jsonl"));
}

TEST(Train, PrefetchProducesTheSameMetrics) {
  auto a = small_config("sync"), b = small_config("async");
  b.run_id = a.run_id;
  a.augment = b.augment = true;
  b.prefetch = true;
  pkn::run_train(a);
  pkn::run_train(b);
  EXPECT_EQ(slurp(fs::path(a.output_dir) / "metrics.jsonl"), slurp(fs::path(b.output_dir) / "metrics.jsonl"));
}

TEST(Train, BestCheckpointMatchesBestEpoch) {
  auto c = small_config("best");
  c.epochs = 4;
  auto r = pkn::run_train(c);
  auto ckpt = pkn::load_checkpoint(fs::path(c.output_dir) / "best.ckpt");
  EXPECT_EQ(ckpt.meta["epoch"].get<std::size_t>(), r.best_epoch);
  EXPECT_DOUBLE_EQ(ckpt.meta["val_acc"].get<double>(), r.best_val_acc);
  ASSERT_TRUE(ckpt.optimizer);
  EXPECT_EQ(ckpt.optimizer->kind, "adam");
}

TEST(Train, Cnn3LearnsSpirals) {
  auto c = small_config("learn");
  c.model.width = 0.5;
  c.data.spirals.n_per_class = 200;
  c.batch_size = 32;
  c.epochs = 200;
  c.scheduler.kind = "none";
  auto data = pkn::load_splits(c.data);
  auto net = pkn::Network<float>::build(pkn::model_spec(c.model, data.train), c.seed);
  const auto norm = pkn::compute_normalization(data.train);
  pkn::BatchLoader<float> loader(data.train, pkn::train_loader_options(c, norm));
  pkn::Trainer<float> trainer(std::move(net), c, c.optimizer, c.optim);
  double acc = 0;
  std::size_t epoch = 0;
  for (; epoch < c.epochs && acc < 0.95; ++epoch) {
    loader.for_each_batch(epoch, [&](pkn::Batch<float> b) { trainer.step(b); });
    acc = trainer.end_epoch(epoch, std::nullopt, 0).train_acc;
  }
  EXPECT_GE(acc, 0.95) << "after " << epoch << " epochs";
}

TEST(Train, DeepPolynomialChainHaltsReactCompletes) {
  // Twelve conv blocks; pkn surgery leaves no regularization at all.
  pkn::NetworkSpec deep{"chain12", {1, 16, 16}, 3, {}};
  for (int i = 0; i < 12; ++i) {
    const auto tag = "conv" + std::to_string(i + 1);
    deep.layers.push_back({tag, pkn::Conv2dLayer{i == 0 ? 1u : 8u, 8, 3, 1, 1, true}});
    deep.layers.push_back({tag + ".relu", pkn::ReluLayer{}});
  }
  deep.layers.push_back({"flatten", pkn::FlattenLayer{}});
  deep.layers.push_back({"fc", pkn::LinearLayer{8 * 16 * 16, 3, true}});

  auto c = small_config("deep");
  c.epochs = 2;
  c.optim.lr = 3e-4;
  const auto data = pkn::load_splits(c.data);
  auto pkn_run = pkn::train_network(pkn::Network<float>::build(pkn::surgery(deep, pkn::SurgeryMode::pkn(2, 0.5)), 0),
                                    c, data);
  EXPECT_TRUE(pkn_run.diverged);
  ASSERT_FALSE(pkn_run.records.empty());
  EXPECT_TRUE(pkn_run.records.back().nan);
  ASSERT_TRUE(pkn_run.divergence);

  auto react_run = pkn::train_network(
      pkn::Network<float>::build(pkn::surgery(deep, pkn::SurgeryMode::react(0.009, 0.5, 0.47)), 0), c, data);
  EXPECT_FALSE(react_run.diverged);
  EXPECT_EQ(react_run.records.size(), 2u);
}

TEST(Train, DivergedRunEndsWithDiagnosticRecord) {
  auto c = small_config("diverge");
  c.model = {"resnet18", 0.25, pkn::SurgeryMode::pkn(3, 0.5)};
  auto r = pkn::run_train(c);
  ASSERT_TRUE(r.diverged);
  auto lines = read_jsonl(fs::path(c.output_dir) / "metrics.jsonl");
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_TRUE(lines[1]["nan"].get<bool>());
  EXPECT_TRUE(lines[1]["train_loss"].is_null());
  EXPECT_TRUE(lines[1].contains("diverged"));
  EXPECT_NE(slurp(fs::path(c.output_dir) / "summary.txt").find("NaN"), std::string::npos);
}

TEST(Train, MomoStepSizesStayWithinCap) {
  auto c = small_config("momo");
  c.optimizer = "momo_adam";
  c.optim.lr = 1e-2;
  c.epochs = 4;
  auto r = pkn::run_train(c, false);
  ASSERT_FALSE(r.diverged);
  ASSERT_FALSE(r.taus.empty());
  for (double t : r.taus) {
    EXPECT_GE(t, 0.0);
    EXPECT_LE(t, 1e-2);
  }
  for (const auto& rec : r.records) ASSERT_TRUE(rec.tau);
}

TEST(Train, PlateauSchedulerLowersLrOverARun) {
  auto c = small_config("plateau");
  c.scheduler.kind = "plateau";
  c.scheduler.patience = 0;
  c.scheduler.factor = 0.5;
  c.scheduler.monitor = "train_loss";
  c.optim.lr = 0.5;  // large enough to stall
  c.epochs = 6;
  auto r = pkn::run_train(c, false);
  for (std::size_t i = 1; i < r.records.size(); ++i) EXPECT_LE(r.records[i].lr, r.records[i - 1].lr);
}

TEST(Finetune, ResumesFromTransplantedCheckpoint) {
  auto base = small_config("ft_base");
  pkn::run_train(base);
  auto ft = small_config("ft_react");
  ft.model.mode = pkn::SurgeryMode::react(0.009, 0.5, 0.47);
  ft.epochs = 1;
  auto r = pkn::run_finetune(ft, fs::path(base.output_dir) / "best.ckpt");
  EXPECT_EQ(r.records.size(), 1u);

  auto bad = small_config("ft_bad");
  bad.data.spirals.classes = 4;
  EXPECT_THROW(pkn::run_finetune(bad, fs::path(base.output_dir) / "best.ckpt"), pkn::ConfigError);
}
