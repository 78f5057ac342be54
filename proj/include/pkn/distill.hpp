// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "pkn/train.hpp"

namespace pkn {

/// Teacher probabilities at temperature T, computed without recording a graph.
template <class T>
Tensor<T> soft_labels(const Network<T>& teacher, const Tensor<T>& images, double temperature) {
  NoGradGuard guard;
  auto logits = teacher.forward(images);
  if (temperature != 1.0) logits = mul(logits, T(1.0 / temperature));
  return softmax(logits).detach();
}

/// Student update against fixed soft labels:
/// lambda * T^2 * KL(soft || student/T) + (1 - lambda) * CE(student, labels).
/// `labels` feed the loss and are only read when lambda < 1;
/// `accuracy_labels` only feed the correct-prediction count.
template <class T>
StepResult student_step(Network<T>& student, Optimizer<T>& opt, const Tensor<T>& images, const Tensor<T>& soft,
                        std::span<const int> labels, const KDConfig& cfg, std::uint64_t step,
                        std::span<const int> accuracy_labels = {}) {
  StepResult r;
  student.zero_grad();
  auto logits = student.forward(images);
  Tensor<T> loss;
  if (cfg.lambda > 0) {
    auto scaled = cfg.temperature == 1.0 ? logits : mul(logits, T(1.0 / cfg.temperature));
    loss = mul(kl_divergence(scaled, soft), T(cfg.lambda * cfg.temperature * cfg.temperature));
  }
  if (cfg.lambda < 1) {
    auto ce = mul(cross_entropy(logits, labels), T(1.0 - cfg.lambda));
    loss = loss.defined() ? add(loss, ce) : ce;
  }
  r.loss = double(loss.item());
  if (!accuracy_labels.empty()) r.correct = count_correct(logits, accuracy_labels);
  if (!std::isfinite(r.loss)) {
    r.diverged = Divergence{step, "loss"};
    return r;
  }
  loss.backward();
  r.grad_norm = grad_norm(student.params());
  if ((r.diverged = nan_sentinel(step, r.loss, student.params()))) return r;
  opt.step(r.loss);
  student.project_constraints();
  return r;
}

struct KDStepResult {
  StepResult teacher, student;
  bool student_ran = false;
};

/// One concurrent distillation step, strictly in this order:
///  1. teacher forward, cross-entropy, backward, update;
///  2. teacher re-forward with the updated weights -> soft labels (no graph);
///  3. student forward, KD loss, backward, update.
/// Teacher gradients are cleared after its update, so they read zero
/// after the student's backward pass.
template <class T>
KDStepResult kd_step(Network<T>& teacher, Network<T>& student, const Tensor<T>& images, std::span<const int> labels,
                     const KDConfig& cfg, Optimizer<T>& teacher_opt, Optimizer<T>& student_opt,
                     std::uint64_t step = 0) {
  cfg.validate();
  if (teacher.spec().num_classes != student.spec().num_classes) {
    throw ConfigError("distillation: teacher has " + std::to_string(teacher.spec().num_classes) +
                      " classes, student has " + std::to_string(student.spec().num_classes));
  }
  KDStepResult out;
  out.teacher = train_step(teacher, teacher_opt, images, labels, step);
  teacher.zero_grad();
  if (out.teacher.diverged) return out;
  const auto soft = soft_labels(teacher, images, cfg.temperature);
  out.student = student_step(student, student_opt, images, soft, cfg.lambda < 1 ? labels : std::span<const int>{},
                             cfg, step, labels);
  out.student_ran = true;
  return out;
}

struct DistillResult {
  std::vector<MetricsRecord> records;  // teacher then student, per epoch
  RunResult teacher, student;
  bool diverged = false;
  std::optional<Divergence> divergence;
  std::string diverged_role;
};

template <class T>
DistillResult train_distilled_typed(const TrainConfig& cfg, const Splits& data, RunOutput* out) {
  if (!cfg.kd) throw ConfigError("distill: config has no kd section");
  const auto& kd = *cfg.kd;
  kd.validate();
  if (!kd.student_mode) throw ConfigError("kd.student_mode: required for distillation");
  const auto preset = preset_for(cfg.model, data.train);
  const auto teacher_spec = model_spec(cfg.model, data.train);
  const auto student_spec = surgery(build(preset), *kd.student_mode);

  auto topts = cfg.optim, sopts = cfg.optim;
  topts.lr = kd.teacher_lr;
  sopts.lr = kd.student_lr;
  Trainer<T> teacher(Network<T>::build(teacher_spec, cfg.seed), cfg, cfg.optimizer, topts, "teacher");
  Trainer<T> student(Network<T>::build(student_spec, cfg.seed), cfg, cfg.optimizer, sopts, "student");

  const auto norm = compute_normalization(data.train);
  // Teacher and student see the same batch tensor, so one augmentation draw.
  BatchLoader<T> loader(data.train, train_loader_options(cfg, norm));
  DistillResult result;
  result.teacher.best_val_acc = result.student.best_val_acc = -1;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    bool stop = false;
    loader.for_each_batch(epoch, [&](Batch<T> b) {
      if (stop) return;
      const auto step = teacher.next_step();
      student.next_step();
      auto r = kd_step(teacher.net(), student.net(), b.images, std::span<const int>(b.labels), kd, teacher.opt(),
                       student.opt(), step);
      teacher.account(r.teacher, b.labels.size());
      if (r.student_ran) student.account(r.student, b.labels.size());
      stop = r.teacher.diverged || r.student.diverged;
    });
    const double secs = detail::seconds_since(t0);
    std::optional<double> tval, sval;
    if (!teacher.diverged()) tval = evaluate(teacher.net(), data.val, cfg.eval_batch_size, norm).accuracy;
    if (!student.diverged()) sval = evaluate(student.net(), data.val, cfg.eval_batch_size, norm).accuracy;
    auto trec = teacher.end_epoch(epoch, tval, secs);
    auto srec = student.end_epoch(epoch, sval, secs);
    for (auto* rec : {&trec, &srec}) {
      if (out) out->write(*rec);
      result.records.push_back(*rec);
    }
    result.teacher.records.push_back(trec);
    result.student.records.push_back(srec);
    if (trec.nan || srec.nan) {
      result.diverged = true;
      result.diverged_role = trec.nan ? "teacher" : "student";
      result.divergence = trec.nan ? trec.diverged : srec.diverged;
      break;
    }
    result.teacher.final_val_acc = *tval;
    result.student.final_val_acc = *sval;
    if (*tval > result.teacher.best_val_acc) {
      result.teacher.best_val_acc = *tval;
      result.teacher.best_epoch = epoch;
    }
    if (*sval > result.student.best_val_acc) {
      result.student.best_val_acc = *sval;
      result.student.best_epoch = epoch;
      if (out && cfg.save_checkpoints) {
        nlohmann::json meta{{"epoch", epoch}, {"student_val_acc", *sval}, {"teacher_val_acc", *tval},
                            {"run_id", cfg.run_id}};
        save_checkpoint(out->dir() / "teacher.ckpt", make_checkpoint(teacher.net(), &teacher.opt(), meta));
        save_checkpoint(out->dir() / "student.ckpt", make_checkpoint(student.net(), &student.opt(), meta));
      }
    }
  }
  result.teacher.taus = teacher.tau_history();
  result.student.taus = student.tau_history();
  if (out) out->summary(summary_lines(cfg.run_id + " (" + cfg.model.preset + ", distilled)", result.records));
  return result;
}

/// Trains the vanilla teacher and its surgically derived student together.
inline DistillResult train_distilled(const TrainConfig& cfg, bool write_outputs = true) {
  const auto data = load_splits(cfg.data);
  RunOutput out;
  if (write_outputs) out = RunOutput(cfg.output_dir, cfg);
  auto* sink = write_outputs ? &out : nullptr;
  return cfg.precision == 64 ? train_distilled_typed<double>(cfg, data, sink)
                             : train_distilled_typed<float>(cfg, data, sink);
}

}  // namespace pkn
