#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "corrosion/augment.hpp"
#include "corrosion/error.hpp"
#include "corrosion/image.hpp"
#include "corrosion/model.hpp"
#include "corrosion/parallel.hpp"
#include "corrosion/rng.hpp"

namespace corrosion::train {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 128;
  double lr_min = 1e-6;
  double lr_max = 5e-4;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  double momentum_high = 0.95;
  double momentum_low = 0.85;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  AugmentConfig augment{};
  bool augment_val = false;
  model::ClassWeights class_weights{};
  int workers = 1;

  void validate() const {
    if (epochs < 1) fail(ErrorCode::InvalidSpec, "epochs must be >= 1");
    if (batch_size < 1) fail(ErrorCode::InvalidSpec, "batch_size must be >= 1");
    if (!(lr_min > 0 && lr_max > 0)) fail(ErrorCode::BadRange, "learning rates must be positive");
    if (lr_min > lr_max) fail(ErrorCode::BadRange, "lr_min must not exceed lr_max");
    if (!(pct_start > 0 && pct_start < 1)) fail(ErrorCode::InvalidSpec, "pct_start must lie in (0,1)");
    if (!(div_factor > 0 && final_div_factor > 0)) fail(ErrorCode::InvalidSpec, "div factors must be positive");
    augment.validate();
  }
};

// ---------------------------------------------------------------------------
// Learning-rate schedules.

/// rate_g = lr_min * (lr_max/lr_min)^(g/(n-1)); a single group gets lr_max.
inline std::vector<double> discriminative_lrs(int n_groups, double lr_min, double lr_max) {
  if (n_groups < 1) fail(ErrorCode::InvalidSpec, "need at least one group");
  if (!(lr_min > 0) || lr_min > lr_max) fail(ErrorCode::BadRange, "require 0 < lr_min <= lr_max");
  if (n_groups == 1) return {lr_max};
  std::vector<double> out(n_groups);
  const double log_ratio = std::log(lr_max / lr_min);
  for (int g = 0; g < n_groups; ++g) out[g] = lr_min * std::exp(log_ratio * g / (n_groups - 1));
  out.front() = lr_min;
  out.back() = lr_max;
  return out;
}

struct SchedulePoint {
  double lr = 0.0;  // on the lr_max scale
  double momentum = 0.0;
};

namespace detail {

/// Cosine interpolation from `start` (t=0) to `end` (t=1).
inline double cosine_anneal(double start, double end, double t) {
  return end + (start - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace detail

/// Warm-up for the first pct_start of the steps (lr rises lr_max/div_factor ->
/// lr_max, momentum falls high -> low), then anneal to the final step (lr
/// falls to lr_max/final_div_factor, momentum returns to high).
inline SchedulePoint one_cycle_schedule(long step, long total_steps, const TrainConfig& cfg) {
  if (total_steps < 1 || step < 0 || step >= total_steps) fail(ErrorCode::StepOutOfRange, "step outside [0, total)");
  const double warm = cfg.pct_start * static_cast<double>(total_steps);
  const double lr_start = cfg.lr_max / cfg.div_factor;
  const double lr_end = cfg.lr_max / cfg.final_div_factor;
  const double s = static_cast<double>(step);
  if (s < warm) {
    const double t = s / warm;
    return {detail::cosine_anneal(lr_start, cfg.lr_max, t), detail::cosine_anneal(cfg.momentum_high, cfg.momentum_low, t)};
  }
  const double span = static_cast<double>(total_steps - 1) - warm;
  const double t = span > 0 ? (s - warm) / span : 1.0;
  return {detail::cosine_anneal(cfg.lr_max, lr_end, t), detail::cosine_anneal(cfg.momentum_low, cfg.momentum_high, t)};
}

// ---------------------------------------------------------------------------
// Data.

struct TileSample {
  Image pixels;
  int label = 0;
};

/// Assembles a batch of the given sample indices, augmenting each sample from
/// its own (seed, epoch, index) stream so the result is independent of the
/// worker count.
template <typename T>
model::Batch<T> assemble_batch(std::span<const TileSample> samples, std::span<const std::size_t> idx,
                               const model::InputStats& stats, const AugmentConfig* aug, std::uint64_t seed,
                               std::uint64_t epoch, int workers) {
  std::vector<Image> augmented(aug ? idx.size() : 0);
  if (aug) {
    parallel_for(idx.size(), workers, [&](std::size_t k) {
      Rng rng(derive_seed(seed, epoch, idx[k]));
      augmented[k] = augment(samples[idx[k]].pixels, *aug, rng);
    });
  }
  std::vector<const Image*> ptrs(idx.size());
  std::vector<int> labels(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    ptrs[k] = aug ? &augmented[k] : &samples[idx[k]].pixels;
    labels[k] = samples[idx[k]].label;
  }
  return model::make_batch<T>(ptrs, labels, stats);
}

// ---------------------------------------------------------------------------
// Optimizer.

/// SGD with momentum and a learning rate per layer group:
/// v <- mu*v + g + wd*p ; p <- p - lr_group * v.
template <typename T>
class Sgd {
 public:
  explicit Sgd(const model::ModelParams<T>& p) {
    for (const auto& t : p.tensors) velocity_.emplace_back(t.trainable ? t.count() : 0, T(0));
  }

  void step(model::ModelParams<T>& p, const model::Gradients<T>& g, std::span<const double> group_lrs, double momentum,
            double weight_decay) {
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      auto& t = p.tensors[i];
      if (!t.trainable) continue;
      const T lr = static_cast<T>(group_lrs[t.group]);
      const T mu = static_cast<T>(momentum);
      const T wd = static_cast<T>(weight_decay);
      auto& v = velocity_[i];
      const auto& gi = g.values[i];
      for (std::size_t k = 0; k < t.values.size(); ++k) {
        v[k] = mu * v[k] + gi[k] + wd * t.values[k];
        t.values[k] -= lr * v[k];
      }
    }
  }

 private:
  std::vector<std::vector<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Learning-rate finder.

struct LossCurve {
  std::vector<std::pair<double, double>> points;  // (lr, smoothed loss)
  std::vector<double> raw_losses;
  double suggestion = 0.0;
  bool stopped_early = false;
};

inline double finder_lr(double lo, double hi, int k, int steps) {
  return lo * std::pow(hi / lo, static_cast<double>(k) / (steps - 1));
}

/// Mock training sweep. `step(lr)` must evaluate the loss at the current
/// parameters, apply one update at `lr`, and return that loss. Losses are
/// smoothed (beta 0.98, bias-corrected); the sweep stops once the smoothed
/// loss exceeds 4x the best seen. The suggestion is the rate at the steepest
/// descent of the smoothed curve (in log-lr), divided by 10.
template <typename StepFn>
LossCurve lr_find(StepFn&& step, double lr_lo, double lr_hi, int steps) {
  if (!(lr_lo > 0) || !(lr_lo < lr_hi)) fail(ErrorCode::BadRange, "require 0 < lr_lo < lr_hi");
  if (steps < 10) fail(ErrorCode::InvalidSpec, "lr_find needs at least 10 steps");
  constexpr double beta = 0.98;
  LossCurve curve;
  double avg = 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < steps; ++k) {
    const double lr = finder_lr(lr_lo, lr_hi, k, steps);
    const double loss = step(lr);
    if (!std::isfinite(loss)) {
      if (k == 0) fail(ErrorCode::DivergedImmediately, "loss is not finite at the first step");
      curve.stopped_early = true;
      break;
    }
    curve.raw_losses.push_back(loss);
    avg = beta * avg + (1 - beta) * loss;
    const double smoothed = avg / (1 - std::pow(beta, k + 1));
    curve.points.emplace_back(lr, smoothed);
    best = std::min(best, smoothed);
    if (k > 0 && smoothed > 4 * best) {
      curve.stopped_early = true;
      break;
    }
  }

  const auto& pts = curve.points;
  if (pts.size() < 3) {
    curve.suggestion = pts.front().first;
    return curve;
  }
  // steepest negative slope of smoothed loss against log(lr), central differences
  double steepest = std::numeric_limits<double>::infinity();
  std::size_t at = 1;
  for (std::size_t i = 1; i + 1 < pts.size(); ++i) {
    const double slope = (pts[i + 1].second - pts[i - 1].second) / std::log(pts[i + 1].first / pts[i - 1].first);
    if (slope < steepest) {
      steepest = slope;
      at = i;
    }
  }
  curve.suggestion = pts[at].first / 10.0;
  return curve;
}

/// Runs the finder on a disposable copy of `params`, cycling through the
/// training samples in seeded shuffled order.
template <typename T>
LossCurve lr_find(const model::ModelParams<T>& params, std::span<const TileSample> samples, double lr_lo, double lr_hi,
                  int steps, const TrainConfig& cfg) {
  if (samples.empty()) fail(ErrorCode::EmptyStream, "no training samples");
  model::ModelParams<T> work = params;
  Sgd<T> opt(work);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, 0xF1D));
  rng.shuffle(order);
  std::size_t cursor = 0;
  const std::vector<double> unit(work.arch.num_groups(), 1.0);
  std::uint64_t k = 0;
  const AugmentConfig* aug = cfg.augment.enabled ? &cfg.augment : nullptr;
  auto step = [&](double lr) {
    std::vector<std::size_t> idx;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        cursor = 0;
        rng.shuffle(order);
      }
      idx.push_back(order[cursor++]);
    }
    const auto batch = assemble_batch<T>(samples, idx, work.input_stats, aug, cfg.seed, 0xF1D0000 + k++, cfg.workers);
    double loss = 0.0;
    try {
      auto res = model::train_grad(work, batch, cfg.class_weights);
      loss = res.loss;
      std::vector<double> lrs(unit.size(), lr);
      opt.step(work, res.grads, lrs, cfg.momentum_low, cfg.weight_decay);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFiniteLoss && e.code() != ErrorCode::NonFiniteGradient) throw;
      loss = std::numeric_limits<double>::infinity();
    }
    return loss;
  };
  return lr_find(step, lr_lo, lr_hi, steps);
}

// ---------------------------------------------------------------------------
// Training loop.

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  /// Loss-wise equality; wall-clock time is not part of the comparison.
  bool same_losses(const TrainHistory& other) const {
    if (epochs.size() != other.epochs.size()) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i) {
      if (epochs[i].train_loss != other.epochs[i].train_loss || epochs[i].val_loss != other.epochs[i].val_loss)
        return false;
    }
    return true;
  }
};

inline std::string history_csv(const TrainHistory& h) {
  std::string out = "epoch,train_loss,val_loss,seconds\n";
  char buf[128];
  for (const auto& e : h.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.3f\n", e.epoch, e.train_loss, e.val_loss, e.seconds);
    out += buf;
  }
  return out;
}

/// Raised when the loss goes non-finite; carries the epochs completed so far.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& msg, TrainHistory partial)
      : Error(ErrorCode::NonFiniteLoss, msg), partial_(std::move(partial)) {}
  const TrainHistory& partial() const noexcept { return partial_; }

 private:
  TrainHistory partial_;
};

/// Eval-mode mean loss over a sample set.
template <typename T>
double evaluate_loss(const model::ModelParams<T>& params, std::span<const TileSample> samples, int batch_size,
                     const AugmentConfig* aug, std::uint64_t seed, int workers) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = assemble_batch<T>(samples, idx, params.input_stats, aug, seed, 0xE7A1, workers);
    const auto logits = model::forward(params, batch, model::Mode::eval);
    total += model::loss<T>(logits, batch.labels) * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(samples.size());
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// One-cycle SGD over seeded shuffled epochs; the last short batch is kept.
/// Returns the final-epoch parameters.
template <typename T>
std::pair<model::ModelParams<T>, TrainHistory> train(model::ModelParams<T> params, std::span<const TileSample> train_set,
                                                     std::span<const TileSample> val_set, const TrainConfig& cfg,
                                                     const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) fail(ErrorCode::EmptyStream, "training split is empty");
  const std::size_t steps_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const long total = static_cast<long>(steps_per_epoch) * cfg.epochs;
  const auto group_rates = discriminative_lrs(params.arch.num_groups(), cfg.lr_min, cfg.lr_max);
  const AugmentConfig* aug = cfg.augment.enabled ? &cfg.augment : nullptr;
  const AugmentConfig* val_aug = cfg.augment_val ? aug : nullptr;

  Sgd<T> opt(params);
  TrainHistory history;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  std::vector<double> lrs(group_rates.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng(derive_seed(cfg.seed, 0xE90C, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const auto batch = assemble_batch<T>(train_set, idx, params.input_stats, aug, cfg.seed,
                                           static_cast<std::uint64_t>(epoch), cfg.workers);
      model::GradResult<T> res;
      try {
        res = model::train_grad(params, batch, cfg.class_weights);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NonFiniteLoss || e.code() == ErrorCode::NonFiniteGradient)
          throw TrainingAborted(e.what(), history);
        throw;
      }
      const auto sched = one_cycle_schedule(step, total, cfg);
      for (std::size_t g = 0; g < lrs.size(); ++g) lrs[g] = group_rates[g] * sched.lr / cfg.lr_max;
      opt.step(params, res.grads, lrs, sched.momentum, cfg.weight_decay);
      loss_sum += res.loss * static_cast<double>(idx.size());
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.val_loss = evaluate_loss(params, val_set, cfg.batch_size, val_aug, cfg.seed, cfg.workers);
    if (!std::isfinite(rec.val_loss)) throw TrainingAborted("validation loss is not finite", history);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return {std::move(params), std::move(history)};
}

}  // namespace corrosion::train
