// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pkn/data.hpp"
#include "pkn/optim.hpp"
#include "pkn/surgery.hpp"
#include "pkn/zoo.hpp"

namespace pkn {

struct ModelConfig {
  std::string preset = "cnn3";
  double width = 1.0;
  std::optional<SurgeryMode> mode;  // unset: vanilla
};

struct SchedulerConfig {
  std::string kind = "none";  // none | plateau | step
  double factor = 0.1;
  int patience = 10;
  double min_lr = 1e-7;
  std::string monitor = "val_acc";  // val_acc (max) | train_loss (min)
  int step_size = 30;
  double gamma = 0.1;
};

struct DataConfig {
  std::string source = "spirals";  // spirals | cifar10 | mnist
  std::string dir;                 // cifar10 / mnist; empty -> $PKN_DATA_DIR/<default subdir>
  std::size_t train_subset = 0;    // 0 keeps everything
  std::size_t val_subset = 0;
  std::uint64_t seed = 0;  // spirals generation
  SpiralOptions spirals;
  std::size_t val_per_class = 100;
};

/// Concurrent distillation settings.
struct KDConfig {
  double teacher_lr = 3e-4;
  double student_lr = 3e-5;
  double temperature = 1.0;
  double lambda = 1.0;  // weight on the KL term; 1 - lambda goes to hard-label CE
  std::optional<SurgeryMode> student_mode;

  void validate() const {
    if (!(temperature > 0)) throw ConfigError("kd.temperature must be > 0");
    if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("kd.lambda must lie in [0, 1]");
    if (!(teacher_lr >= 0) || !(student_lr >= 0)) throw ConfigError("kd learning rates must be non-negative");
  }
};

struct TrainConfig {
  std::string run_id = "run";
  ModelConfig model;
  std::string optimizer = "adam";
  OptimizerOptions optim;
  SchedulerConfig scheduler;
  std::optional<LayerwiseSchedule> layerwise;
  std::size_t batch_size = 128;
  std::size_t eval_batch_size = 256;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  int precision = 32;
  DataConfig data;
  std::optional<bool> augment;  // unset: on for cifar10 only
  bool prefetch = false;
  std::optional<KDConfig> kd;
  std::string output_dir = "runs/run";
  bool save_checkpoints = true;

  bool augment_enabled() const { return augment.value_or(data.source == "cifar10"); }
};

inline const char* kDataDirEnv = "PKN_DATA_DIR";

/// Directory holding the raw files of a dataset source.
inline std::filesystem::path resolve_data_dir(const DataConfig& d) {
  if (!d.dir.empty()) return d.dir;
  const char* env = std::getenv(kDataDirEnv);
  const std::filesystem::path root = env ? env : "data";
  return root / (d.source == "cifar10" ? "cifar-10-batches-bin" : "mnist");
}

// ---------------------------------------------------------------------------
// JSON <-> config

namespace detail {

// Reads typed fields out of one JSON object, collecting a message per bad
// field instead of stopping at the first.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back((path_.empty() ? "config" : path_) + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json* find(const std::string& key) {
    seen_.insert(key);
    if (!j_.is_object()) return nullptr;
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  void str(const std::string& key, std::string& out) {
    if (auto* v = find(key)) v->is_string() ? void(out = v->get<std::string>()) : bad(key, "expected a string");
  }
  void num(const std::string& key, double& out) {
    if (auto* v = find(key)) v->is_number() ? void(out = v->get<double>()) : bad(key, "expected a number");
  }
  void flag(const std::string& key, bool& out) {
    if (auto* v = find(key)) v->is_boolean() ? void(out = v->get<bool>()) : bad(key, "expected true or false");
  }
  void flag(const std::string& key, std::optional<bool>& out) {
    if (auto* v = find(key)) v->is_boolean() ? void(out = v->get<bool>()) : bad(key, "expected true or false");
  }
  template <class I>
  void integer(const std::string& key, I& out) {
    auto* v = find(key);
    if (!v) return;
    if (!v->is_number_integer()) return bad(key, "expected an integer");
    if constexpr (std::is_unsigned_v<I>) {
      if (v->is_number_unsigned()) {
        out = I(v->get<std::uint64_t>());
      } else if (v->get<std::int64_t>() < 0) {
        bad(key, "must be non-negative");
      } else {
        out = I(v->get<std::int64_t>());
      }
    } else {
      out = I(v->get<std::int64_t>());
    }
  }

  void bad(const std::string& key, const std::string& why) { errors_.push_back(field(key) + ": " + why); }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) errors_.push_back(field(k) + ": unknown field");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline std::optional<SurgeryMode> mode_from_json(const nlohmann::json& j, const std::string& path,
                                                 std::vector<std::string>& errors) {
  if (j.is_string() && j.get<std::string>() == "vanilla") return std::nullopt;
  FieldReader r(j, path, errors);
  SurgeryMode m;
  std::string kind = "pkn";
  r.str("kind", kind);
  if (kind == "pkn") {
    m.kind = SurgeryMode::Kind::pkn;
  } else if (kind == "rpkn") {
    m.kind = SurgeryMode::Kind::rpkn;
  } else if (kind == "react") {
    m.kind = SurgeryMode::Kind::react;
  } else {
    r.bad("kind", "'" + kind + "' is not one of pkn, rpkn, react");
  }
  r.integer("degree", m.degree);
  r.num("balance", m.balance);
  r.num("scale", m.scale);
  r.num("a", m.react_a);
  r.num("b", m.react_b);
  r.num("c", m.react_c);
  r.flag("clamp_positive", m.clamp_positive);
  r.finish();
  if (m.degree < 1 || m.degree > 8) r.bad("degree", "must lie in [1, 8]");
  if (!(m.balance >= 0)) r.bad("balance", "must be >= 0");
  if (!(m.scale > 0)) r.bad("scale", "must be > 0");
  return m;
}

inline nlohmann::json mode_to_json(const std::optional<SurgeryMode>& m) {
  if (!m) return "vanilla";
  nlohmann::json j{{"kind", to_string(m->kind)}};
  if (m->kind == SurgeryMode::Kind::react) {
    j["a"] = m->react_a;
    j["b"] = m->react_b;
    j["c"] = m->react_c;
  } else {
    j["degree"] = m->degree;
    j["balance"] = m->balance;
    if (m->kind == SurgeryMode::Kind::rpkn) j["scale"] = m->scale;
    j["clamp_positive"] = m->clamp_positive;
  }
  return j;
}

inline std::vector<std::string> missing_data_files(const DataConfig& d) {
  std::vector<std::string> names;
  if (d.source == "cifar10") {
    for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
    names.push_back("test_batch.bin");
  } else if (d.source == "mnist") {
    names = {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};
  }
  std::vector<std::string> missing;
  const auto dir = resolve_data_dir(d);
  for (const auto& n : names)
    if (!std::filesystem::exists(dir / n)) missing.push_back((dir / n).string());
  return missing;
}

}  // namespace detail

/// Parses and validates a run config. Every invalid field is reported in one
/// ConfigError, one line per field, before any work starts.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  using detail::FieldReader;
  std::vector<std::string> errors;
  TrainConfig c;
  FieldReader r(j, "", errors);
  r.str("run_id", c.run_id);
  r.str("optimizer", c.optimizer);
  r.integer("batch_size", c.batch_size);
  r.integer("eval_batch_size", c.eval_batch_size);
  r.integer("epochs", c.epochs);
  r.integer("seed", c.seed);
  r.integer("precision", c.precision);
  r.flag("augment", c.augment);
  r.flag("prefetch", c.prefetch);
  r.str("output_dir", c.output_dir);
  r.flag("save_checkpoints", c.save_checkpoints);

  if (auto* m = r.find("model")) {
    FieldReader mr(*m, "model", errors);
    mr.str("preset", c.model.preset);
    mr.num("width", c.model.width);
    if (auto* mode = mr.find("mode")) c.model.mode = detail::mode_from_json(*mode, "model.mode", errors);
    mr.finish();
  }
  if (auto* o = r.find("optim")) {
    FieldReader orr(*o, "optim", errors);
    orr.num("lr", c.optim.lr);
    orr.num("momentum", c.optim.momentum);
    orr.num("beta1", c.optim.beta1);
    orr.num("beta2", c.optim.beta2);
    orr.num("eps", c.optim.eps);
    orr.num("weight_decay", c.optim.weight_decay);
    orr.num("f_star", c.optim.f_star);
    orr.finish();
  }
  if (auto* s = r.find("scheduler")) {
    FieldReader sr(*s, "scheduler", errors);
    sr.str("kind", c.scheduler.kind);
    sr.num("factor", c.scheduler.factor);
    sr.integer("patience", c.scheduler.patience);
    sr.num("min_lr", c.scheduler.min_lr);
    sr.str("monitor", c.scheduler.monitor);
    sr.integer("step_size", c.scheduler.step_size);
    sr.num("gamma", c.scheduler.gamma);
    sr.finish();
  }
  if (auto* l = r.find("layerwise")) {
    FieldReader lr(*l, "layerwise", errors);
    LayerwiseSchedule ls;
    std::string kind = "constant";
    lr.str("kind", kind);
    if (kind == "constant") ls.kind = LayerwiseSchedule::Kind::constant;
    else if (kind == "linear_decay") ls.kind = LayerwiseSchedule::Kind::linear_decay;
    else if (kind == "per_group") ls.kind = LayerwiseSchedule::Kind::per_group;
    else lr.bad("kind", "'" + kind + "' is not one of constant, linear_decay, per_group");
    lr.num("ratio", ls.ratio);
    if (auto* g = lr.find("groups")) {
      if (!g->is_object()) {
        lr.bad("groups", "expected an object of layer -> lr");
      } else {
        for (const auto& [k, v] : g->items()) {
          if (v.is_number()) ls.groups[k] = v.get<double>();
          else lr.bad("groups." + k, "expected a number");
        }
      }
    }
    lr.finish();
    if (!(ls.ratio > 0)) lr.bad("ratio", "must be > 0");
    c.layerwise = ls;
  }
  if (auto* d = r.find("data")) {
    FieldReader dr(*d, "data", errors);
    dr.str("source", c.data.source);
    dr.str("dir", c.data.dir);
    dr.integer("train_subset", c.data.train_subset);
    dr.integer("val_subset", c.data.val_subset);
    dr.integer("seed", c.data.seed);
    dr.integer("n_per_class", c.data.spirals.n_per_class);
    dr.integer("val_per_class", c.data.val_per_class);
    dr.integer("classes", c.data.spirals.classes);
    dr.num("noise_sd", c.data.spirals.noise_sd);
    dr.integer("image_size", c.data.spirals.image_size);
    dr.num("turns", c.data.spirals.turns);
    dr.finish();
  }
  if (auto* k = r.find("kd")) {
    FieldReader kr(*k, "kd", errors);
    KDConfig kd;
    kr.num("teacher_lr", kd.teacher_lr);
    kr.num("student_lr", kd.student_lr);
    kr.num("temperature", kd.temperature);
    kr.num("lambda", kd.lambda);
    if (auto* sm = kr.find("student_mode")) kd.student_mode = detail::mode_from_json(*sm, "kd.student_mode", errors);
    kr.finish();
    if (!(kd.temperature > 0)) kr.bad("temperature", "must be > 0");
    if (!(kd.lambda >= 0 && kd.lambda <= 1)) kr.bad("lambda", "must lie in [0, 1]");
    if (!(kd.teacher_lr >= 0)) kr.bad("teacher_lr", "must be >= 0");
    if (!(kd.student_lr >= 0)) kr.bad("student_lr", "must be >= 0");
    c.kd = kd;
  }
  r.finish();

  // Ranges.
  auto bad = [&](const std::string& field, const std::string& why) { errors.push_back(field + ": " + why); };
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), c.model.preset) == names.end()) {
    std::string all;
    for (const auto& n : names) all += (all.empty() ? "" : ", ") + n;
    bad("model.preset", "unknown preset '" + c.model.preset + "' (choose one of: " + all + ")");
  }
  if (!(c.model.width > 0 && c.model.width <= 8)) bad("model.width", "must lie in (0, 8]");
  if (c.optimizer != "sgd" && c.optimizer != "adam" && c.optimizer != "momo_adam")
    bad("optimizer", "'" + c.optimizer + "' is not one of sgd, adam, momo_adam");
  if (!(c.optim.lr >= 0 && c.optim.lr <= 10)) bad("optim.lr", "must lie in [0, 10]");
  if (!(c.optim.momentum >= 0 && c.optim.momentum < 1)) bad("optim.momentum", "must lie in [0, 1)");
  if (!(c.optim.beta1 >= 0 && c.optim.beta1 < 1)) bad("optim.beta1", "must lie in [0, 1)");
  if (!(c.optim.beta2 >= 0 && c.optim.beta2 < 1)) bad("optim.beta2", "must lie in [0, 1)");
  if (!(c.optim.eps > 0)) bad("optim.eps", "must be > 0");
  if (!(c.optim.weight_decay >= 0)) bad("optim.weight_decay", "must be >= 0");
  const auto& s = c.scheduler;
  if (s.kind != "none" && s.kind != "plateau" && s.kind != "step")
    bad("scheduler.kind", "'" + s.kind + "' is not one of none, plateau, step");
  if (!(s.factor > 0 && s.factor < 1)) bad("scheduler.factor", "must lie in (0, 1)");
  if (s.patience < 0) bad("scheduler.patience", "must be >= 0");
  if (!(s.min_lr >= 0)) bad("scheduler.min_lr", "must be >= 0");
  if (s.monitor != "val_acc" && s.monitor != "train_loss") bad("scheduler.monitor", "must be val_acc or train_loss");
  if (s.step_size < 1) bad("scheduler.step_size", "must be >= 1");
  if (!(s.gamma > 0 && s.gamma <= 1)) bad("scheduler.gamma", "must lie in (0, 1]");
  if (c.batch_size < 1) bad("batch_size", "must be >= 1");
  if (c.eval_batch_size < 1) bad("eval_batch_size", "must be >= 1");
  if (c.epochs > 100000) bad("epochs", "must be <= 100000");
  if (c.precision != 32 && c.precision != 64) bad("precision", "must be 32 or 64");
  if (c.output_dir.empty()) bad("output_dir", "must not be empty");
  if (c.run_id.empty()) bad("run_id", "must not be empty");
  const auto& d = c.data;
  if (d.source == "spirals") {
    if (d.spirals.classes < 2) bad("data.classes", "must be >= 2");
    if (d.spirals.n_per_class < 1) bad("data.n_per_class", "must be >= 1");
    if (d.val_per_class < 1) bad("data.val_per_class", "must be >= 1");
    if (!(d.spirals.noise_sd >= 0)) bad("data.noise_sd", "must be >= 0");
    if (d.spirals.image_size < 4) bad("data.image_size", "must be >= 4");
  } else if (d.source == "cifar10" || d.source == "mnist") {
    const auto missing = detail::missing_data_files(d);
    if (!missing.empty()) {
      std::string list;
      for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
      bad("data.dir", "missing files: " + list + " (set data.dir or " + kDataDirEnv + ")");
    }
  } else {
    bad("data.source", "'" + d.source + "' is not one of spirals, cifar10, mnist");
  }

  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  using nlohmann::json;
  json j;
  j["run_id"] = c.run_id;
  j["model"] = {{"preset", c.model.preset}, {"width", c.model.width}, {"mode", detail::mode_to_json(c.model.mode)}};
  j["optimizer"] = c.optimizer;
  j["optim"] = {{"lr", c.optim.lr},       {"momentum", c.optim.momentum},         {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2}, {"eps", c.optim.eps},                   {"weight_decay", c.optim.weight_decay},
                {"f_star", c.optim.f_star}};
  j["scheduler"] = {{"kind", c.scheduler.kind},       {"factor", c.scheduler.factor},
                    {"patience", c.scheduler.patience}, {"min_lr", c.scheduler.min_lr},
                    {"monitor", c.scheduler.monitor},   {"step_size", c.scheduler.step_size},
                    {"gamma", c.scheduler.gamma}};
  if (c.layerwise) {
    const char* kinds[] = {"constant", "linear_decay", "per_group"};
    j["layerwise"] = {{"kind", kinds[int(c.layerwise->kind)]}, {"ratio", c.layerwise->ratio}};
    if (!c.layerwise->groups.empty()) j["layerwise"]["groups"] = c.layerwise->groups;
  }
  j["batch_size"] = c.batch_size;
  j["eval_batch_size"] = c.eval_batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  json d{{"source", c.data.source}, {"train_subset", c.data.train_subset}, {"val_subset", c.data.val_subset}};
  if (c.data.source == "spirals") {
    d["seed"] = c.data.seed;
    d["n_per_class"] = c.data.spirals.n_per_class;
    d["val_per_class"] = c.data.val_per_class;
    d["classes"] = c.data.spirals.classes;
    d["noise_sd"] = c.data.spirals.noise_sd;
    d["image_size"] = c.data.spirals.image_size;
    d["turns"] = c.data.spirals.turns;
  } else {
    d["dir"] = resolve_data_dir(c.data).string();
  }
  j["data"] = d;
  j["augment"] = c.augment_enabled();
  j["prefetch"] = c.prefetch;
  if (c.kd) {
    j["kd"] = {{"teacher_lr", c.kd->teacher_lr},
               {"student_lr", c.kd->student_lr},
               {"temperature", c.kd->temperature},
               {"lambda", c.kd->lambda},
               {"student_mode", detail::mode_to_json(c.kd->student_mode)}};
  }
  j["output_dir"] = c.output_dir;
  j["save_checkpoints"] = c.save_checkpoints;
  return j;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

/// Applies a dotted-path override such as "optim.lr=3e-4" to a raw config.
/// The value is parsed as JSON when possible, otherwise taken as a string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    auto& next = (*node)[parts[i]];
    if (next.is_null()) next = nlohmann::json::object();
    if (!next.is_object()) throw ConfigError("override '" + key + "': " + parts[i] + " is not an object");
    node = &next;
  }
  (*node)[parts.back()] = std::move(value);
}

}  // namespace pkn
