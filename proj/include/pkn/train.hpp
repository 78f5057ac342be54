// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pkn/checkpoint.hpp"
#include "pkn/config.hpp"
#include "pkn/data.hpp"
#include "pkn/diagnostics.hpp"
#include "pkn/loss.hpp"

namespace pkn {

// ---------------------------------------------------------------------------
// Data

struct Splits {
  Dataset train, val;
};

inline Splits load_splits(const DataConfig& d) {
  Splits s;
  if (d.source == "spirals") {
    auto o = d.spirals;
    s.train = synthetic_spirals(o, d.seed);
    o.n_per_class = d.val_per_class;
    s.val = synthetic_spirals(o, d.seed + 1);
  } else if (d.source == "cifar10") {
    const auto dir = resolve_data_dir(d);
    s.train = read_cifar10_dir(dir, true);
    s.val = read_cifar10_dir(dir, false);
  } else if (d.source == "mnist") {
    const auto dir = resolve_data_dir(d);
    s.train = read_mnist_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    s.val = read_mnist_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  } else {
    throw ConfigError("data.source: unknown source '" + d.source + "'");
  }
  if (d.train_subset) s.train = s.train.head(d.train_subset);
  if (d.val_subset) s.val = s.val.head(d.val_subset);
  s.train.split = "train";
  s.val.split = "val";
  return s;
}

inline ModelPreset preset_for(const ModelConfig& m, const Dataset& ds) {
  return ModelPreset{m.preset, m.width, ds.num_classes, ds.sample_shape};
}

inline NetworkSpec model_spec(const ModelConfig& m, const Dataset& ds) {
  auto spec = build(preset_for(m, ds));
  return m.mode ? surgery(spec, *m.mode) : spec;
}

inline LoaderOptions train_loader_options(const TrainConfig& cfg, const Normalization& norm) {
  LoaderOptions o;
  o.batch_size = cfg.batch_size;
  o.seed = cfg.seed;
  o.shuffle = true;
  if (cfg.augment_enabled()) o.augment = AugmentPolicy{};
  o.normalization = norm;
  o.prefetch = cfg.prefetch;
  return o;
}

// ---------------------------------------------------------------------------
// Steps and evaluation

/// Rows whose argmax equals the label. Rows with a non-finite logit never count.
template <class T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = logits.data().subspan(r * cols, cols);
    if (!all_finite(row)) continue;
    const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
    correct += int(best) == labels[r];
  }
  return correct;
}

struct StepResult {
  double loss = 0;
  std::size_t correct = 0;
  double grad_norm = 0;
  std::optional<Divergence> diverged;
};

/// Forward, cross-entropy, backward and one optimizer update. A non-finite
/// loss or gradient stops before the update.
template <class T>
StepResult train_step(Network<T>& net, Optimizer<T>& opt, const Tensor<T>& images, std::span<const int> labels,
                      std::uint64_t step) {
  StepResult r;
  net.zero_grad();
  auto logits = net.forward(images);
  auto loss = cross_entropy(logits, labels);
  r.loss = double(loss.item());
  r.correct = count_correct(logits, labels);
  if (!std::isfinite(r.loss)) {
    r.diverged = Divergence{step, "loss"};
    return r;
  }
  loss.backward();
  r.grad_norm = grad_norm(net.params());
  if ((r.diverged = nan_sentinel(step, r.loss, net.params()))) return r;
  opt.step(r.loss);
  net.project_constraints();
  return r;
}

template <class T>
StepResult train_step(Network<T>& net, Optimizer<T>& opt, const Batch<T>& b, std::uint64_t step) {
  return train_step(net, opt, b.images, std::span<const int>(b.labels), step);
}

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

template <class T>
EvalResult evaluate(const Network<T>& net, const Dataset& ds, std::size_t batch_size,
                    const std::optional<Normalization>& norm) {
  NoGradGuard guard;
  LoaderOptions o;
  o.batch_size = batch_size;
  o.shuffle = false;
  o.normalization = norm;
  BatchLoader<T> loader(ds, o);
  long double loss = 0;
  std::size_t correct = 0;
  loader.for_each_batch(0, [&](Batch<T> b) {
    auto logits = net.forward(b.images);
    loss += (long double)cross_entropy(logits, std::span<const int>(b.labels)).item() * b.labels.size();
    correct += count_correct(logits, std::span<const int>(b.labels));
  });
  return {double(loss / ds.size()), double(correct) / double(ds.size())};
}

// ---------------------------------------------------------------------------
// Metrics

struct TauStats {
  double min = 0, mean = 0, max = 0;
  std::size_t count = 0;
};

struct MetricsRecord {
  std::string run_id;
  std::string role;  // empty for single-network runs, else "teacher" / "student"
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  std::optional<double> val_acc;
  double lr = 0;
  double grad_norm_mean = 0;
  std::optional<TauStats> tau;
  bool nan = false;
  std::optional<Divergence> diverged;
  double wall_seconds = 0;  // persisted to the timing log only
};

inline nlohmann::json to_json(const MetricsRecord& r) {
  using nlohmann::json;
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j{{"type", "epoch"},          {"run_id", r.run_id},
         {"epoch", r.epoch},         {"train_loss", num(r.train_loss)},
         {"train_acc", r.train_acc}, {"val_acc", r.val_acc ? num(*r.val_acc) : json(nullptr)},
         {"lr", r.lr},               {"grad_norm_mean", num(r.grad_norm_mean)},
         {"nan", r.nan}};
  if (!r.role.empty()) j["role"] = r.role;
  if (r.tau) j["tau"] = {{"min", r.tau->min}, {"mean", r.tau->mean}, {"max", r.tau->max}, {"count", r.tau->count}};
  if (r.diverged) j["diverged"] = {{"step", r.diverged->step}, {"location", r.diverged->location}};
  return j;
}

/// Output directory of one run: effective config, line-delimited metrics,
/// wall-clock timings, summary table and checkpoints.
class RunOutput {
 public:
  RunOutput() = default;
  RunOutput(const std::filesystem::path& dir, const TrainConfig& cfg) : dir_(dir) {
    std::filesystem::create_directories(dir_);
    std::ofstream(dir_ / "config.json") << to_json(cfg).dump(2) << "\n";
    metrics_.open(dir_ / "metrics.jsonl", std::ios::trunc);
    timing_.open(dir_ / "timing.jsonl", std::ios::trunc);
    if (!metrics_ || !timing_) throw InputError("cannot write metrics under " + dir_.string());
    nlohmann::json header{{"type", "header"},         {"format", "pkn-metrics"},
                          {"version", 1},             {"run_id", cfg.run_id},
                          {"preset", cfg.model.preset}, {"mode", detail::mode_to_json(cfg.model.mode)},
                          {"seed", cfg.seed},         {"precision", cfg.precision}};
    metrics_ << header.dump() << "\n" << std::flush;
  }

  bool enabled() const { return !dir_.empty(); }
  const std::filesystem::path& dir() const { return dir_; }

  void write(const MetricsRecord& r) {
    if (!enabled()) return;
    metrics_ << to_json(r).dump() << "\n" << std::flush;
    nlohmann::json t{{"run_id", r.run_id}, {"epoch", r.epoch}, {"wall_seconds", r.wall_seconds}};
    if (!r.role.empty()) t["role"] = r.role;
    timing_ << t.dump() << "\n" << std::flush;
  }

  void summary(const std::vector<std::string>& lines) {
    if (!enabled()) return;
    std::ofstream out(dir_ / "summary.txt", std::ios::trunc);
    for (const auto& l : lines) out << l << "\n";
  }

 private:
  std::filesystem::path dir_;
  std::ofstream metrics_, timing_;
};

// ---------------------------------------------------------------------------
// Single-network trainer

/// Owns a network with its optimizer and scheduler and turns batches into
/// per-epoch records.
template <class T>
class Trainer {
 public:
  Trainer(Network<T> net, const TrainConfig& cfg, std::string optimizer, OptimizerOptions opts, std::string role = "")
      : net_(std::move(net)), cfg_(cfg), role_(std::move(role)) {
    opt_ = make_optimizer<T>(optimizer, trainable_params(net_.params()), opts);
    if (cfg.layerwise) opt_->set_parameter_lrs(layerwise_lr(net_.spec(), opts.lr, *cfg.layerwise));
    const auto& s = cfg.scheduler;
    if (s.kind == "plateau") {
      plateau_.emplace(s.factor, s.patience,
                       s.monitor == "val_acc" ? PlateauScheduler::Mode::max : PlateauScheduler::Mode::min, s.min_lr);
    } else if (s.kind == "step") {
      step_sched_.emplace(s.step_size, s.gamma);
    }
  }

  Network<T>& net() { return net_; }
  const Network<T>& net() const { return net_; }
  Optimizer<T>& opt() { return *opt_; }
  const Optimizer<T>& opt() const { return *opt_; }
  std::uint64_t steps() const { return step_; }

  StepResult step(const Batch<T>& b) {
    auto r = train_step(net_, *opt_, b, step_++);
    account(r, b.labels.size());
    return r;
  }

  /// For callers that run their own update (distillation).
  void account(const StepResult& r, std::size_t n) {
    loss_sum_ += (long double)r.loss * n;
    seen_ += n;
    correct_ += r.correct;
    grad_sum_ += r.grad_norm;
    ++batches_;
    if (auto* momo = dynamic_cast<const MomoAdam<T>*>(opt_.get()); momo && !r.diverged) taus_.push_back(momo->last_tau());
    if (r.diverged && !diverged_) diverged_ = r.diverged;
  }
  std::uint64_t next_step() { return step_++; }

  /// Closes the epoch: builds the record, then lets the scheduler react.
  MetricsRecord end_epoch(std::size_t epoch, std::optional<double> val_acc, double seconds) {
    MetricsRecord m;
    m.run_id = cfg_.run_id;
    m.role = role_;
    m.epoch = epoch;
    m.train_loss = seen_ ? double(loss_sum_ / seen_) : 0.0;
    m.train_acc = seen_ ? double(correct_) / double(seen_) : 0.0;
    m.val_acc = val_acc;
    m.lr = opt_->lr();
    m.grad_norm_mean = batches_ ? grad_sum_ / double(batches_) : 0.0;
    if (!taus_.empty()) {
      TauStats t;
      t.min = *std::min_element(taus_.begin(), taus_.end());
      t.max = *std::max_element(taus_.begin(), taus_.end());
      long double s = 0;
      for (double v : taus_) s += v;
      t.mean = double(s / taus_.size());
      t.count = taus_.size();
      m.tau = t;
    }
    m.diverged = diverged_;
    m.nan = diverged_.has_value();
    m.wall_seconds = seconds;
    all_taus_.insert(all_taus_.end(), taus_.begin(), taus_.end());
    loss_sum_ = 0;
    seen_ = correct_ = batches_ = 0;
    grad_sum_ = 0;
    taus_.clear();
    if (!m.nan) {
      if (plateau_) {
        const double metric = cfg_.scheduler.monitor == "val_acc" ? val_acc.value_or(m.train_acc) : m.train_loss;
        opt_->set_lr(plateau_->step(metric, opt_->lr()));
      } else if (step_sched_) {
        opt_->set_lr(step_sched_->step(int(epoch + 1), opt_->lr()));
      }
    }
    return m;
  }

  bool diverged() const { return diverged_.has_value(); }
  /// Every step size MoMo reported so far.
  const std::vector<double>& tau_history() const { return all_taus_; }

  nlohmann::json scheduler_state() const {
    if (!plateau_) return nullptr;
    return {{"best", plateau_->best()}, {"bad_epochs", plateau_->bad_epochs()}};
  }

 private:
  Network<T> net_;
  const TrainConfig& cfg_;
  std::string role_;
  std::unique_ptr<Optimizer<T>> opt_;
  std::optional<PlateauScheduler> plateau_;
  std::optional<StepScheduler> step_sched_;
  std::uint64_t step_ = 0;
  long double loss_sum_ = 0;
  std::size_t seen_ = 0, correct_ = 0, batches_ = 0;
  double grad_sum_ = 0;
  std::vector<double> taus_, all_taus_;
  std::optional<Divergence> diverged_;
};

struct RunResult {
  std::vector<MetricsRecord> records;
  bool diverged = false;
  std::optional<Divergence> divergence;
  double best_val_acc = -1;
  std::size_t best_epoch = 0;
  double final_val_acc = 0;
  std::vector<double> taus;
};

inline std::string format_summary_row(const MetricsRecord& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(10) << (r.role.empty() ? "-" : r.role) << " " << std::setw(7) << r.epoch << " ";
  if (r.nan) {
    os << std::setw(12) << "NaN" << " " << std::setw(10) << "NaN";
  } else {
    os << std::setw(12) << r.train_loss << " " << std::setw(10) << (r.val_acc ? *r.val_acc * 100 : 0.0);
  }
  return os.str();
}

inline std::vector<std::string> summary_lines(const std::string& title, const std::vector<MetricsRecord>& records) {
  std::vector<std::string> lines{title, "role       epoch   train_loss   test_acc(%)"};
  // Best-validation row per role, the layout the accuracy tables use.
  std::map<std::string, const MetricsRecord*> best;
  for (const auto& r : records) {
    auto& b = best[r.role];
    if (r.nan) {
      b = &r;
      continue;
    }
    if (!b || (!b->nan && r.val_acc.value_or(-1) > b->val_acc.value_or(-1))) b = &r;
  }
  for (const auto& [role, r] : best) lines.push_back(format_summary_row(*r));
  return lines;
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Trains `net` on the splits with the config's optimizer and schedule.
/// Stops at the first non-finite loss or gradient with a diverged record.
template <class T>
RunResult train_network(Network<T> net, const TrainConfig& cfg, const Splits& data, RunOutput* out = nullptr) {
  RunResult result;
  const auto norm = compute_normalization(data.train);
  BatchLoader<T> loader(data.train, train_loader_options(cfg, norm));
  Trainer<T> trainer(std::move(net), cfg, cfg.optimizer, cfg.optim);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    bool stop = false;
    loader.for_each_batch(epoch, [&](Batch<T> b) {
      if (stop) return;
      stop = trainer.step(b).diverged.has_value();
    });
    std::optional<double> val;
    if (!trainer.diverged()) val = evaluate(trainer.net(), data.val, cfg.eval_batch_size, norm).accuracy;
    auto rec = trainer.end_epoch(epoch, val, detail::seconds_since(t0));
    if (out) out->write(rec);
    result.records.push_back(rec);
    if (rec.nan) {
      result.diverged = true;
      result.divergence = rec.diverged;
      break;
    }
    result.final_val_acc = *val;
    if (*val > result.best_val_acc) {
      result.best_val_acc = *val;
      result.best_epoch = epoch;
      if (out && cfg.save_checkpoints) {
        nlohmann::json meta{{"epoch", epoch}, {"val_acc", *val}, {"run_id", cfg.run_id},
                            {"scheduler", trainer.scheduler_state()}};
        save_checkpoint(out->dir() / "best.ckpt", make_checkpoint(trainer.net(), &trainer.opt(), meta));
      }
    }
  }
  result.taus = trainer.tau_history();
  if (out) out->summary(summary_lines(cfg.run_id + " (" + cfg.model.preset + ")", result.records));
  return result;
}

template <class T>
RunResult run_train_typed(const TrainConfig& cfg, bool write_outputs) {
  const auto data = load_splits(cfg.data);
  auto net = Network<T>::build(model_spec(cfg.model, data.train), cfg.seed);
  RunOutput out;
  if (write_outputs) out = RunOutput(cfg.output_dir, cfg);
  return train_network(std::move(net), cfg, data, write_outputs ? &out : nullptr);
}

/// Trains the configured model from scratch.
inline RunResult run_train(const TrainConfig& cfg, bool write_outputs = true) {
  return cfg.precision == 64 ? run_train_typed<double>(cfg, write_outputs) : run_train_typed<float>(cfg, write_outputs);
}

template <class T>
RunResult run_finetune_typed(const TrainConfig& cfg, const Checkpoint& ckpt, bool write_outputs) {
  const auto data = load_splits(cfg.data);
  auto spec = cfg.model.mode ? surgery(ckpt.spec, *cfg.model.mode) : ckpt.spec;
  if (spec.input_shape != data.train.sample_shape || spec.num_classes != data.train.num_classes) {
    throw ConfigError("checkpoint network '" + ckpt.spec.name + "' takes " + to_string(spec.input_shape) + " with " +
                      std::to_string(spec.num_classes) + " classes; dataset has " +
                      to_string(data.train.sample_shape) + " with " + std::to_string(data.train.num_classes));
  }
  auto net = Network<T>::build(spec, cfg.seed);
  transplant(ckpt.registry<T>(), net);
  RunOutput out;
  if (write_outputs) out = RunOutput(cfg.output_dir, cfg);
  return train_network(std::move(net), cfg, data, write_outputs ? &out : nullptr);
}

/// Transplants a checkpoint into the (optionally surgically altered) network
/// and continues training. Fresh polynomial parameters keep their defaults.
inline RunResult run_finetune(const TrainConfig& cfg, const std::filesystem::path& checkpoint,
                              bool write_outputs = true) {
  const auto ckpt = load_checkpoint(checkpoint);
  return cfg.precision == 64 ? run_finetune_typed<double>(cfg, ckpt, write_outputs)
                             : run_finetune_typed<float>(cfg, ckpt, write_outputs);
}

}  // namespace pkn
