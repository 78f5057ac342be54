// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pkn/network.hpp"
#include "pkn/spec.hpp"
#include "pkn/tensor.hpp"

namespace pkn {

/// Serializable snapshot of an optimizer: scalar fields plus one buffer per
/// (parameter, slot) pair, e.g. "conv1.weight/m".
struct OptimizerState {
  std::string kind;
  std::uint64_t step = 0;
  std::map<std::string, double> scalars;
  std::vector<std::pair<std::string, std::vector<double>>> buffers;
};

struct OptimizerOptions {
  double lr = 1e-3;
  double momentum = 0.0;  // sgd
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  double f_star = 0.0;  // momo lower bound
};

template <class T>
class Optimizer {
 public:
  using Params = std::vector<std::pair<std::string, Tensor<T>>>;

  Optimizer(Params params, OptimizerOptions opts) : params_(std::move(params)), opts_(opts) {
    if (!(opts_.lr >= 0)) throw ConfigError("learning rate must be non-negative");
    scales_.assign(params_.size(), 1.0);
  }
  virtual ~Optimizer() = default;

  /// Applies one update from the gradients currently stored on the
  /// parameters. `batch_loss` is only read by loss-aware methods.
  void step(double batch_loss = std::numeric_limits<double>::quiet_NaN()) {
    if (needs_loss() && !std::isfinite(batch_loss)) throw UsageError(kind() + ": step() needs the finite batch loss");
    ++step_;
    update(batch_loss);
  }

  virtual std::string kind() const = 0;
  virtual bool needs_loss() const { return false; }

  double lr() const { return opts_.lr; }
  void set_lr(double lr) { opts_.lr = lr; }
  const OptimizerOptions& options() const { return opts_; }
  std::uint64_t step_count() const { return step_; }
  const Params& params() const { return params_; }

  /// Per-parameter learning rates; each becomes a multiplier on lr().
  void set_parameter_lrs(const std::map<std::string, double>& lrs) {
    if (!(opts_.lr > 0)) throw ConfigError("per-parameter learning rates need a positive base lr");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto it = lrs.find(params_[i].first);
      scales_[i] = it == lrs.end() ? 1.0 : it->second / opts_.lr;
    }
  }
  double lr_of(std::size_t i) const { return opts_.lr * scales_[i]; }

  OptimizerState state() const {
    OptimizerState s;
    s.kind = kind();
    s.step = step_;
    s.scalars["lr"] = opts_.lr;
    save_extra(s);
    for (const auto& [slot, bufs] : slots_) {
      for (std::size_t i = 0; i < params_.size(); ++i) {
        s.buffers.emplace_back(params_[i].first + "/" + slot, std::vector<double>(bufs[i].begin(), bufs[i].end()));
      }
    }
    return s;
  }

  void load_state(const OptimizerState& s) {
    if (s.kind != kind()) throw ConfigError("optimizer state is for '" + s.kind + "', not '" + kind() + "'");
    std::map<std::string, const std::vector<double>*> by_name;
    for (const auto& [name, buf] : s.buffers) by_name[name] = &buf;
    for (auto& [slot, bufs] : slots_) {
      for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto key = params_[i].first + "/" + slot;
        auto it = by_name.find(key);
        if (it == by_name.end()) throw ConfigError("optimizer state lacks buffer " + key);
        if (it->second->size() != bufs[i].size()) throw ConfigError("optimizer buffer " + key + " has wrong size");
        std::transform(it->second->begin(), it->second->end(), bufs[i].begin(), [](double v) { return T(v); });
      }
    }
    step_ = s.step;
    if (auto it = s.scalars.find("lr"); it != s.scalars.end()) opts_.lr = it->second;
    load_extra(s);
  }

 protected:
  virtual void update(double batch_loss) = 0;
  virtual void save_extra(OptimizerState&) const {}
  virtual void load_extra(const OptimizerState&) {}

  std::vector<std::vector<T>>& slot(const std::string& name) {
    auto it = slots_.find(name);
    if (it != slots_.end()) return it->second;
    auto& bufs = slots_[name];
    for (const auto& [n, p] : params_) bufs.emplace_back(p.numel(), T(0));
    return bufs;
  }

  // Gradient with coupled weight decay; missing gradients read as zero.
  T grad_at(std::size_t i, std::size_t j) const {
    const auto& p = params_[i].second;
    const T g = p.has_grad() ? p.grad()[j] : T(0);
    return g + T(opts_.weight_decay) * p[j];
  }

  Params params_;
  OptimizerOptions opts_;
  std::vector<double> scales_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::vector<std::vector<T>>> slots_;
};

/// v <- momentum*v + g; p <- p - lr*v.
template <class T>
class Sgd : public Optimizer<T> {
 public:
  Sgd(typename Optimizer<T>::Params params, OptimizerOptions opts) : Optimizer<T>(std::move(params), opts) {
    this->slot("v");
  }
  std::string kind() const override { return "sgd"; }

 protected:
  void update(double) override {
    auto& v = this->slot("v");
    for (std::size_t i = 0; i < this->params_.size(); ++i) {
      auto data = this->params_[i].second.mutable_data();
      const T lr = T(this->lr_of(i)), mom = T(this->opts_.momentum);
      for (std::size_t j = 0; j < data.size(); ++j) {
        v[i][j] = mom * v[i][j] + this->grad_at(i, j);
        data[j] -= lr * v[i][j];
      }
    }
  }
};

/// Bias-corrected Adam.
template <class T>
class Adam : public Optimizer<T> {
 public:
  Adam(typename Optimizer<T>::Params params, OptimizerOptions opts) : Optimizer<T>(std::move(params), opts) {
    this->slot("m");
    this->slot("v");
  }
  std::string kind() const override { return "adam"; }

 protected:
  void update(double) override {
    auto& m = this->slot("m");
    auto& v = this->slot("v");
    const auto& o = this->opts_;
    const double c1 = 1 - std::pow(o.beta1, double(this->step_));
    const double c2 = 1 - std::pow(o.beta2, double(this->step_));
    for (std::size_t i = 0; i < this->params_.size(); ++i) {
      auto data = this->params_[i].second.mutable_data();
      const double lr = this->lr_of(i);
      for (std::size_t j = 0; j < data.size(); ++j) {
        const T g = this->grad_at(i, j);
        m[i][j] = T(o.beta1) * m[i][j] + T(1 - o.beta1) * g;
        v[i][j] = T(o.beta2) * v[i][j] + T(1 - o.beta2) * g * g;
        const double mhat = double(m[i][j]) / c1, vhat = double(v[i][j]) / c2;
        data[j] -= T(lr * mhat / (std::sqrt(vhat) + o.eps));
      }
    }
  }
};

/// Model-based momentum method with an Adam preconditioner.
///
///   d   <- b1*d + (1-b1)*g          fbar <- b1*fbar + (1-b1)*loss
///   gam <- b1*gam + (1-b1)*<g, p>   D     = eps + sqrt(v_hat)
///   tau  = min(lr, max(0, fbar + <d, p> - gam - f*) / sum(d^2 / D))
///   p   <- p - tau * d / D
///
/// lr is the step-size cap. A zero denominator with a positive gap takes the cap.
template <class T>
class MomoAdam : public Optimizer<T> {
 public:
  MomoAdam(typename Optimizer<T>::Params params, OptimizerOptions opts) : Optimizer<T>(std::move(params), opts) {
    this->slot("d");
    this->slot("v");
  }
  std::string kind() const override { return "momo_adam"; }
  bool needs_loss() const override { return true; }

  double last_tau() const { return tau_; }
  double loss_momentum() const { return fbar_; }
  double inner_momentum() const { return gamma_; }

 protected:
  void update(double batch_loss) override {
    auto& d = this->slot("d");
    auto& v = this->slot("v");
    const auto& o = this->opts_;
    const double b1 = o.beta1, b2 = o.beta2;
    const double c2 = 1 - std::pow(b2, double(this->step_));

    double grad_dot_p = 0;
    for (std::size_t i = 0; i < this->params_.size(); ++i) {
      const auto& p = this->params_[i].second;
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const double g = this->grad_at(i, j);
        grad_dot_p += g * double(p[j]);
        d[i][j] = T(b1 * d[i][j] + (1 - b1) * g);
        v[i][j] = T(b2 * v[i][j] + (1 - b2) * g * g);
      }
    }
    fbar_ = b1 * fbar_ + (1 - b1) * batch_loss;
    gamma_ = b1 * gamma_ + (1 - b1) * grad_dot_p;

    double d_dot_p = 0, denom = 0;
    precond_.resize(this->params_.size());
    for (std::size_t i = 0; i < this->params_.size(); ++i) {
      const auto& p = this->params_[i].second;
      precond_[i].resize(p.numel());
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const double D = o.eps + std::sqrt(double(v[i][j]) / c2);
        precond_[i][j] = D;
        d_dot_p += double(d[i][j]) * double(p[j]);
        denom += double(d[i][j]) * double(d[i][j]) / D;
      }
    }
    const double gap = std::max(0.0, fbar_ + d_dot_p - gamma_ - o.f_star);
    if (denom > 0) {
      tau_ = std::min(o.lr, gap / denom);
    } else {
      tau_ = gap > 0 ? o.lr : 0.0;
    }
    if (tau_ == 0) return;
    for (std::size_t i = 0; i < this->params_.size(); ++i) {
      auto data = this->params_[i].second.mutable_data();
      const double step = tau_ * this->scales_[i];
      for (std::size_t j = 0; j < data.size(); ++j) data[j] -= T(step * double(d[i][j]) / precond_[i][j]);
    }
  }

  void save_extra(OptimizerState& s) const override {
    s.scalars["fbar"] = fbar_;
    s.scalars["gamma"] = gamma_;
    s.scalars["tau"] = tau_;
  }
  void load_extra(const OptimizerState& s) override {
    fbar_ = s.scalars.at("fbar");
    gamma_ = s.scalars.at("gamma");
    tau_ = s.scalars.at("tau");
  }

 private:
  double fbar_ = 0, gamma_ = 0, tau_ = 0;
  std::vector<std::vector<double>> precond_;
};

template <class T>
std::unique_ptr<Optimizer<T>> make_optimizer(const std::string& kind, typename Optimizer<T>::Params params,
                                             const OptimizerOptions& opts) {
  if (kind == "sgd") return std::make_unique<Sgd<T>>(std::move(params), opts);
  if (kind == "adam") return std::make_unique<Adam<T>>(std::move(params), opts);
  if (kind == "momo_adam") return std::make_unique<MomoAdam<T>>(std::move(params), opts);
  throw ConfigError("unknown optimizer '" + kind + "' (choose sgd, adam or momo_adam)");
}

template <class T>
typename Optimizer<T>::Params trainable_params(ParamRegistry<T>& reg) {
  typename Optimizer<T>::Params out;
  for (auto& [name, t] : reg) out.emplace_back(name, t);
  return out;
}

// ---------------------------------------------------------------------------
// Schedulers

/// Cuts the learning rate when the monitored metric stops improving.
/// Improvement is strict; a reduction happens once more than `patience`
/// epochs have passed without one.
class PlateauScheduler {
 public:
  enum class Mode { max, min };

  explicit PlateauScheduler(double factor = 0.1, int patience = 10, Mode mode = Mode::max, double min_lr = 1e-7)
      : factor_(factor), patience_(patience), mode_(mode), min_lr_(min_lr) {
    if (!(factor > 0 && factor < 1)) throw ConfigError("plateau factor must lie in (0, 1)");
    if (patience < 0) throw ConfigError("plateau patience must be non-negative");
    best_ = mode == Mode::max ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
  }

  double step(double metric, double lr) {
    const bool better = mode_ == Mode::max ? metric > best_ : metric < best_;
    if (better) {
      best_ = metric;
      bad_epochs_ = 0;
      return lr;
    }
    if (++bad_epochs_ > patience_) {
      bad_epochs_ = 0;
      return std::min(lr, std::max(min_lr_, lr * factor_));
    }
    return lr;
  }

  double best() const { return best_; }
  int bad_epochs() const { return bad_epochs_; }
  void restore(double best, int bad_epochs) {
    best_ = best;
    bad_epochs_ = bad_epochs;
  }

 private:
  double factor_;
  int patience_;
  Mode mode_;
  double min_lr_;
  double best_;
  int bad_epochs_ = 0;
};

/// Multiplies the learning rate by gamma every step_size epochs.
class StepScheduler {
 public:
  StepScheduler(int step_size, double gamma) : step_size_(step_size), gamma_(gamma) {
    if (step_size < 1) throw ConfigError("step scheduler: step_size must be >= 1");
    if (!(gamma > 0 && gamma <= 1)) throw ConfigError("step scheduler: gamma must lie in (0, 1]");
  }
  double step(int epoch, double lr) const { return epoch % step_size_ == 0 ? lr * gamma_ : lr; }

 private:
  int step_size_;
  double gamma_;
};

// ---------------------------------------------------------------------------
// Layer-wise learning rates

struct LayerwiseSchedule {
  enum class Kind { constant, linear_decay, per_group };
  Kind kind = Kind::constant;
  double ratio = 1.0;                  // linear_decay: last group gets ratio * base
  std::map<std::string, double> groups;  // per_group: layer name -> lr
};

/// Layers that own parameters, in execution order.
inline std::vector<std::string> parameter_groups(const NetworkSpec& spec) {
  std::vector<std::string> groups;
  for (const auto& info : parameter_layout(spec)) {
    if (groups.empty() || groups.back() != info.layer) groups.push_back(info.layer);
  }
  return groups;
}

/// Learning rate for every parameter name of `spec`.
inline std::map<std::string, double> layerwise_lr(const NetworkSpec& spec, double base_lr,
                                                  const LayerwiseSchedule& schedule) {
  if (!(base_lr > 0)) throw ConfigError("layerwise_lr: base learning rate must be positive");
  const auto groups = parameter_groups(spec);
  std::map<std::string, double> group_lr;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    double lr = base_lr;
    if (schedule.kind == LayerwiseSchedule::Kind::linear_decay && groups.size() > 1) {
      lr = base_lr * (1.0 + (schedule.ratio - 1.0) * double(i) / double(groups.size() - 1));
    }
    group_lr[groups[i]] = lr;
  }
  if (schedule.kind == LayerwiseSchedule::Kind::per_group) {
    for (const auto& [name, lr] : schedule.groups) {
      if (!group_lr.count(name)) throw ConfigError("layerwise_lr: no parameter group named '" + name + "'");
      group_lr[name] = lr;
    }
  }
  std::map<std::string, double> out;
  for (const auto& info : parameter_layout(spec)) {
    const double lr = group_lr.at(info.layer);
    if (!(lr > 0)) throw ConfigError("layerwise_lr: group '" + info.layer + "' gets non-positive lr");
    out[info.name] = lr;
  }
  return out;
}

}  // namespace pkn
