// SPDX-License-Identifier: Apache-2.0
// Experiment runner: probe | train | finetune | distill | gradcheck | sweep.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pkn/distill.hpp"
#include "pkn/gradcheck.hpp"

extern char** environ;

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kDiverged = 3, kVerification = 4 };

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);)
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------
// Shared run options

struct RunArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::string out;
  std::string run_id;
};

void add_run_options(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("-c,--config", a.config, "JSON run config (fields missing from it keep their defaults)");
  cmd->add_option("--set", a.overrides, "Override a config field, e.g. --set optim.lr=3e-4 (repeatable)");
  cmd->add_option("--seed", a.seed, "Override the run seed");
  cmd->add_option("--epochs", a.epochs, "Override the epoch budget");
  cmd->add_option("-o,--out", a.out, "Output directory (metrics, config, checkpoints)");
  cmd->add_option("--run-id", a.run_id, "Run identifier written into every metrics record");
}

pkn::TrainConfig resolve_config(const RunArgs& a) {
  nlohmann::json j = nlohmann::json::object();
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw pkn::ConfigError("cannot open config " + a.config);
    try {
      j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
      throw pkn::ConfigError(a.config + ": " + e.what());
    }
  }
  for (const auto& o : a.overrides) pkn::apply_override(j, o);
  if (a.seed) j["seed"] = *a.seed;
  if (a.epochs) j["epochs"] = *a.epochs;
  if (!a.out.empty()) j["output_dir"] = a.out;
  if (!a.run_id.empty()) j["run_id"] = a.run_id;
  return pkn::train_config_from_json(j);
}

void print_records(const std::vector<pkn::MetricsRecord>& records) {
  for (const auto& r : records) std::cout << pkn::to_json(r).dump() << "\n";
}

int report_run(const pkn::RunResult& r, const pkn::TrainConfig& cfg) {
  print_records(r.records);
  for (const auto& line : pkn::summary_lines(cfg.run_id + " (" + cfg.model.preset + ")", r.records))
    std::cout << line << "\n";
  if (r.diverged) {
    std::cerr << "diverged at step " << r.divergence->step << " in " << r.divergence->location << "\n";
    return kDiverged;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  std::string presets = "cnn3,lenet,resnet10,resnet18,resnet32,resnet50";
  std::string degrees = "2,3";
  std::string kind = "pkn";
  std::size_t seeds = 20;
  double balance = 0.0;
  double scale = 0.009;
  double width = 1.0;
  int precision = 32;
  std::size_t batch = 1;
  std::string out;
};

template <class T>
int run_probe(const ProbeArgs& a) {
  const auto presets = split(a.presets, ',');
  std::vector<int> degrees;
  for (const auto& d : split(a.degrees, ',')) degrees.push_back(std::stoi(d));
  const auto& known = pkn::preset_names();
  for (const auto& p : presets) {
    if (std::find(known.begin(), known.end(), p) == known.end()) {
      std::string all;
      for (const auto& n : known) all += (all.empty() ? "" : ", ") + n;
      throw pkn::ConfigError("unknown preset '" + p + "' (choose from: " + all + ")");
    }
  }
  std::ofstream jsonl;
  if (!a.out.empty()) {
    std::filesystem::create_directories(a.out);
    jsonl.open(std::filesystem::path(a.out) / "probe.jsonl", std::ios::trunc);
  }
  std::ostringstream table;
  table << std::left << std::setw(10) << "network";
  for (int d : degrees) table << std::setw(26) << ("d_p=" + std::to_string(d));
  table << "\n";
  for (const auto& p : presets) {
    table << std::setw(10) << p;
    for (int d : degrees) {
      pkn::SurgeryMode mode = a.kind == "rpkn" ? pkn::SurgeryMode::rpkn(d, a.balance, a.scale)
                                               : pkn::SurgeryMode::pkn(d, a.balance);
      std::vector<double> finite;
      std::size_t bad = 0;
      for (std::size_t s = 0; s < a.seeds; ++s) {
        auto r = pkn::probe_preset<T>(pkn::ModelPreset{p, a.width}, mode, s, a.batch);
        if (jsonl.is_open()) jsonl << pkn::to_jsonl(r);
        if (r.mse) finite.push_back(*r.mse);
        else ++bad;
      }
      std::ostringstream cell;
      if (finite.empty()) {
        cell << "NaN";
      } else {
        std::sort(finite.begin(), finite.end());
        cell << std::scientific << std::setprecision(3) << finite[finite.size() / 2];
      }
      cell << " [" << bad << "/" << a.seeds << " NaN]";
      table << std::setw(26) << cell.str();
    }
    table << "\n";
  }
  std::cout << table.str();
  if (!a.out.empty()) std::ofstream(std::filesystem::path(a.out) / "probe_table.txt") << table.str();
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::string preset = "cnn3";
  std::string mode = "vanilla";
  int degree = 2;
  double balance = 0.5;
  double scale = 0.009;
  std::uint64_t seed = 0;
  std::size_t entries = 4;
};

int run_gradcheck(const GradcheckArgs& a) {
  std::optional<pkn::SurgeryMode> mode;
  if (a.mode == "pkn") mode = pkn::SurgeryMode::pkn(a.degree, a.balance);
  else if (a.mode == "rpkn") mode = pkn::SurgeryMode::rpkn(a.degree, a.balance, a.scale);
  else if (a.mode == "react") mode = pkn::SurgeryMode::react(0.009, 0.5, 0.47);
  else if (a.mode != "vanilla") throw pkn::ConfigError("--mode: '" + a.mode + "' is not one of vanilla, pkn, rpkn, react");
  pkn::GradcheckOptions o;
  o.seed = a.seed;
  o.entries_per_param = a.entries;
  auto r = pkn::gradcheck_preset(a.preset, mode, o);
  std::cout << pkn::to_json(r).dump(2) << "\n";
  if (!r.passed()) {
    std::cerr << "gradcheck FAILED: worst relative error " << r.worst_rel_error << " in " << r.worst_param << "\n";
    return kVerification;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
  RunArgs run;
  std::vector<std::string> grid;
  std::size_t jobs = 1;
  std::string command = "train";
};

int run_sweep(const SweepArgs& a) {
  // Cartesian product of the grid axes.
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& g : a.grid) {
    const auto eq = g.find('=');
    if (eq == std::string::npos) throw pkn::ConfigError("--grid '" + g + "' is not key=v1,v2,...");
    axes.emplace_back(g.substr(0, eq), split(g.substr(eq + 1), ','));
    if (axes.back().second.empty()) throw pkn::ConfigError("--grid '" + g + "' has no values");
  }
  std::vector<std::vector<std::string>> combos{{}};
  for (const auto& [key, values] : axes) {
    std::vector<std::vector<std::string>> next;
    for (const auto& c : combos)
      for (const auto& v : values) {
        auto e = c;
        e.push_back(key + "=" + v);
        next.push_back(std::move(e));
      }
    combos = std::move(next);
  }
  // Validate the base config before launching anything.
  const auto base = resolve_config(a.run);
  const std::string root = a.run.out.empty() ? base.output_dir : a.run.out;
  const std::string self = std::filesystem::read_symlink("/proc/self/exe").string();

  std::vector<std::vector<std::string>> argvs;
  for (const auto& combo : combos) {
    std::string tag = base.run_id;
    for (const auto& kv : combo) tag += "_" + kv;
    std::replace_if(tag.begin(), tag.end(), [](char c) { return c == '/' || c == ' '; }, '-');
    std::vector<std::string> args{self, a.command};
    if (!a.run.config.empty()) args.insert(args.end(), {"--config", a.run.config});
    for (const auto& o : a.run.overrides) args.insert(args.end(), {"--set", o});
    for (const auto& kv : combo) args.insert(args.end(), {"--set", kv});
    if (a.run.seed) args.insert(args.end(), {"--seed", std::to_string(*a.run.seed)});
    if (a.run.epochs) args.insert(args.end(), {"--epochs", std::to_string(*a.run.epochs)});
    args.insert(args.end(), {"--run-id", tag, "--out", (std::filesystem::path(root) / tag).string()});
    argvs.push_back(std::move(args));
  }

  int worst = kOk;
  std::map<pid_t, std::string> running;
  auto reap_one = [&] {
    int status = 0;
    const pid_t pid = ::wait(&status);
    if (pid <= 0) return;
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 1;
    std::cerr << "[sweep] " << running[pid] << " exited " << code << "\n";
    worst = std::max(worst, code);
    running.erase(pid);
  };
  for (const auto& args : argvs) {
    while (running.size() >= std::max<std::size_t>(1, a.jobs)) reap_one();
    std::vector<char*> cargs;
    for (const auto& s : args) cargs.push_back(const_cast<char*>(s.c_str()));
    cargs.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, self.c_str(), nullptr, nullptr, cargs.data(), environ) != 0) {
      throw pkn::InputError("failed to launch " + args.back());
    }
    running[pid] = args[args.size() - 3];
  }
  while (!running.empty()) reap_one();
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Polynomial-kernel network experiments"};
  app.require_subcommand(1);
  app.footer(std::string("Environment: ") + pkn::kDataDirEnv +
             " sets the default dataset directory.\nExit codes: 0 ok, 2 config error, 3 divergence, 4 verification "
             "failure.");

  ProbeArgs probe;
  auto* probe_cmd = app.add_subcommand("probe", "Forward-pass MSE of polynomial variants against vanilla twins");
  probe_cmd->add_option("--presets", probe.presets, "Comma-separated presets")->capture_default_str();
  probe_cmd->add_option("--degrees", probe.degrees, "Comma-separated kernel degrees")->capture_default_str();
  probe_cmd->add_option("--kind", probe.kind, "pkn or rpkn")->check(CLI::IsMember({"pkn", "rpkn"}))->capture_default_str();
  probe_cmd->add_option("--seeds", probe.seeds, "Seeds per cell")->capture_default_str();
  probe_cmd->add_option("--balance", probe.balance, "Balance term c_p")->capture_default_str();
  probe_cmd->add_option("--scale", probe.scale, "Scale a_p (rpkn)")->capture_default_str();
  probe_cmd->add_option("--width", probe.width, "Width multiplier")->capture_default_str();
  probe_cmd->add_option("--precision", probe.precision, "32 or 64")->check(CLI::IsMember({32, 64}))->capture_default_str();
  probe_cmd->add_option("--batch", probe.batch, "Probe batch size")->capture_default_str();
  probe_cmd->add_option("-o,--out", probe.out, "Directory for probe.jsonl and probe_table.txt");

  RunArgs train, finetune, distill;
  std::string checkpoint;
  auto* train_cmd = app.add_subcommand("train", "Train a model from scratch");
  add_run_options(train_cmd, train);
  auto* finetune_cmd = app.add_subcommand("finetune", "Transplant a checkpoint into the configured model and train");
  add_run_options(finetune_cmd, finetune);
  finetune_cmd->add_option("--checkpoint", checkpoint, "Checkpoint produced by train")->required();
  auto* distill_cmd = app.add_subcommand("distill", "Concurrent teacher-student distillation");
  add_run_options(distill_cmd, distill);

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of a tiny preset instance (64-bit)");
  gc_cmd->add_option("--preset", gc.preset)->capture_default_str();
  gc_cmd->add_option("--mode", gc.mode, "vanilla, pkn, rpkn or react")->capture_default_str();
  gc_cmd->add_option("--degree", gc.degree)->capture_default_str();
  gc_cmd->add_option("--balance", gc.balance)->capture_default_str();
  gc_cmd->add_option("--scale", gc.scale)->capture_default_str();
  gc_cmd->add_option("--seed", gc.seed)->capture_default_str();
  gc_cmd->add_option("--entries", gc.entries, "Entries sampled per parameter tensor")->capture_default_str();

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Launch a grid of independent runs as separate processes");
  add_run_options(sweep_cmd, sweep.run);
  sweep_cmd->add_option("--grid", sweep.grid, "Axis as key=v1,v2,... (repeatable)")->required();
  sweep_cmd->add_option("-j,--jobs", sweep.jobs, "Parallel processes")->capture_default_str();
  sweep_cmd->add_option("--command", sweep.command, "train or distill")
      ->check(CLI::IsMember({"train", "distill"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*probe_cmd) return probe.precision == 64 ? run_probe<double>(probe) : run_probe<float>(probe);
    if (*train_cmd) {
      const auto cfg = resolve_config(train);
      return report_run(pkn::run_train(cfg), cfg);
    }
    if (*finetune_cmd) {
      const auto cfg = resolve_config(finetune);
      return report_run(pkn::run_finetune(cfg, checkpoint), cfg);
    }
    if (*distill_cmd) {
      const auto cfg = resolve_config(distill);
      auto r = pkn::train_distilled(cfg);
      print_records(r.records);
      for (const auto& line : pkn::summary_lines(cfg.run_id + " (distilled)", r.records)) std::cout << line << "\n";
      if (r.diverged) {
        std::cerr << r.diverged_role << " diverged at step " << r.divergence->step << " in " << r.divergence->location
                  << "\n";
        return kDiverged;
      }
      return kOk;
    }
    if (*gc_cmd) return run_gradcheck(gc);
    if (*sweep_cmd) return run_sweep(sweep);
  } catch (const pkn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const pkn::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kConfig;
  } catch (const pkn::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kOk;
}
