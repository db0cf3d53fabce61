#pragma once

// Optimization machinery: Adam, plateau learning-rate scheduling, gradient
// accumulation and early stopping. Moment buffers are kept in double even for
// float parameters so long runs don't drift.
//
// Note on configuration fidelity: the reference training recipe lists a
// "momentum = 0.99" setting alongside Adam's decay rates. Adam has no separate
// momentum input — the value coincides with beta2 and is deliberately not a
// field here.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "vsx/common.hpp"
#include "vsx/tensor.hpp"

namespace vsx {

template <typename S>
class AdamT {
 public:
  AdamT(std::vector<Tensor<S>> params, double lr = 5e-4, double beta1 = 0.9,
        double beta2 = 0.99, double eps = 1e-8, double weight_decay = 0.0)
      : params_(std::move(params)),
        lr_(lr),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps),
        weight_decay_(weight_decay) {
    require(lr_ > 0.0, "adam: learning rate must be positive");
    require(beta1_ >= 0.0 && beta1_ < 1.0, "adam: beta1 must lie in [0, 1)");
    require(beta2_ >= 0.0 && beta2_ < 1.0, "adam: beta2 must lie in [0, 1)");
    require(eps_ > 0.0, "adam: eps must be positive");
    require(weight_decay_ >= 0.0, "adam: weight decay must be non-negative");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p.vals().size(), 0.0);
      v_.emplace_back(p.vals().size(), 0.0);
    }
  }

  void step() {
    for (size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) {
        throw StateError("adam_step: parameter " + std::to_string(i) +
                         " has no gradient; run backward first");
      }
    }
    t_ += 1;
    double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<S> p = params_[i];
      const std::vector<S>& g = p.grad();
      std::vector<S>& w = p.vals();
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (size_t j = 0; j < w.size(); ++j) {
        double grad = static_cast<double>(g[j]);
        if (weight_decay_ != 0.0) grad += weight_decay_ * static_cast<double>(w[j]);
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad * grad;
        double mhat = m[j] / c1;
        double vhat = v[j] / c2;
        w[j] = static_cast<S>(static_cast<double>(w[j]) -
                              lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) {
    require(lr > 0.0, "adam: learning rate must be positive");
    lr_ = lr;
  }
  i64 steps() const { return t_; }
  const std::vector<Tensor<S>>& parameters() const { return params_; }
  std::vector<Tensor<S>>& parameters() { return params_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  i64 t_ = 0;
};

using Adam = AdamT<float>;
using AdamD = AdamT<double>;

/// Reduce-on-plateau in "minimum" mode: after more than `patience` consecutive
/// epochs without an improvement beyond min_delta, multiply the rate by
/// `factor`. Cooldown is zero: the bad-epoch counter resets on reduction and
/// counting resumes immediately.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, double factor = 0.1, int patience = 2,
                   double min_delta = 1e-4)
      : lr_(initial_lr), factor_(factor), patience_(patience), min_delta_(min_delta) {
    require(initial_lr > 0.0, "plateau_scheduler: learning rate must be positive");
    require(factor > 0.0 && factor < 1.0, "plateau_scheduler: factor must lie in (0, 1)");
    require(patience >= 0, "plateau_scheduler: patience must be non-negative");
    require(min_delta >= 0.0, "plateau_scheduler: min_delta must be non-negative");
  }

  /// Feed one validation loss; returns the rate to use from now on.
  double step(double loss) {
    if (loss < best_ - min_delta_) {
      best_ = loss;
      bad_epochs_ = 0;
    } else {
      bad_epochs_ += 1;
      if (bad_epochs_ > patience_) {
        lr_ *= factor_;
        reductions_ += 1;
        bad_epochs_ = 0;
      }
    }
    return lr_;
  }

  double learning_rate() const { return lr_; }
  int reductions() const { return reductions_; }

 private:
  double lr_, factor_;
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
  int reductions_ = 0;
};

/// Stops training once the monitored loss has gone `patience` consecutive
/// epochs without improving by more than min_delta. Tracks where the best
/// value was seen so the matching checkpoint can be reported.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience = 10, double min_delta = 1e-4)
      : patience_(patience), min_delta_(min_delta) {
    require(patience >= 0, "early_stop: patience must be non-negative");
    require(min_delta >= 0.0, "early_stop: min_delta must be non-negative");
  }

  /// Feed one epoch's loss; returns true when training should stop.
  bool update(double loss) {
    epoch_ += 1;
    if (loss < best_ - min_delta_) {
      best_ = loss;
      best_epoch_ = epoch_;
      since_best_ = 0;
    } else {
      since_best_ += 1;
    }
    return since_best_ >= patience_;
  }

  double best_loss() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int current_epoch() const { return epoch_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = -1;
  int epoch_ = -1;
  int since_best_ = 0;
};

/// Accumulates gradients over several minibatches, then applies one Adam step
/// on their mean. A partial group (for example at the end of an epoch) is
/// flushed with the scale of its actual size.
template <typename S>
class GradAccumulatorT {
 public:
  GradAccumulatorT(AdamT<S>& optimizer, i64 every)
      : optimizer_(optimizer), every_(every) {
    require(every >= 1, "grad_accumulator: accumulation count must be at least 1");
  }

  /// Backpropagates one minibatch loss; steps the optimizer once the group is
  /// full. Returns true when a step happened.
  bool backward(Tensor<S> loss) {
    loss.backward();
    pending_ += 1;
    if (pending_ == every_) return flush();
    return false;
  }

  /// Scales accumulated gradients to their mean and steps. No-op when nothing
  /// is pending.
  bool flush() {
    if (pending_ == 0) return false;
    double inv = 1.0 / static_cast<double>(pending_);
    for (auto& p : optimizer_.parameters()) {
      if (!p.has_grad()) continue;  // step() reports missing grads
      for (auto& g : p.grad()) g = static_cast<S>(static_cast<double>(g) * inv);
    }
    optimizer_.step();
    optimizer_.zero_grad();
    pending_ = 0;
    return true;
  }

  i64 pending() const { return pending_; }

 private:
  AdamT<S>& optimizer_;
  i64 every_;
  i64 pending_ = 0;
};

using GradAccumulator = GradAccumulatorT<float>;
using GradAccumulatorD = GradAccumulatorT<double>;

}  // namespace vsx
