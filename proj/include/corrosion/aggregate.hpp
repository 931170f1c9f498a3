#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corrosion/error.hpp"
#include "corrosion/metrics.hpp"

namespace corrosion::aggregate {

inline constexpr double kTileOperatingPoint = 0.5;

/// Per-tile corrosion probabilities and verdicts for one image, row-major.
struct TilePredictions {
  std::string image_id;
  int rows = 0;
  int cols = 0;
  std::vector<double> probs;
  std::vector<int> verdicts;

  std::size_t size() const noexcept { return verdicts.size(); }

  static TilePredictions from_probs(std::string id, int rows, int cols, std::vector<double> probs) {
    TilePredictions p;
    p.image_id = std::move(id);
    p.rows = rows;
    p.cols = cols;
    p.verdicts.reserve(probs.size());
    for (double v : probs) p.verdicts.push_back(v >= kTileOperatingPoint ? 1 : 0);
    p.probs = std::move(probs);
    return p;
  }
};

struct AggregationRule {
  int c = 0;
};

struct ImagePrediction {
  std::string image_id;
  int corroded_count = 0;
  int n_tiles = 0;
  int threshold = 0;
  int verdict = 0;
  double areal_percent = 0.0;
};

inline int corroded_count(const TilePredictions& p) {
  return static_cast<int>(std::count_if(p.verdicts.begin(), p.verdicts.end(), [](int v) { return v != 0; }));
}

/// 100 * corroded tiles / tiles.
inline double areal_percent(const TilePredictions& p) {
  if (p.verdicts.empty()) fail(ErrorCode::EmptyPrediction, "image has no tiles");
  return 100.0 * corroded_count(p) / static_cast<double>(p.verdicts.size());
}

/// Verdict from a corroded-tile count: corroded iff count > c.
inline constexpr int image_verdict(int count, int c) noexcept { return count > c ? 1 : 0; }

inline ImagePrediction classify_image(const TilePredictions& p, AggregationRule rule) {
  if (p.verdicts.empty()) fail(ErrorCode::EmptyPrediction, "image has no tiles");
  if (rule.c < 0) fail(ErrorCode::InvalidSpec, "threshold must be non-negative");
  ImagePrediction out;
  out.image_id = p.image_id;
  out.corroded_count = corroded_count(p);
  out.n_tiles = static_cast<int>(p.verdicts.size());
  out.threshold = rule.c;
  out.verdict = image_verdict(out.corroded_count, rule.c);
  out.areal_percent = areal_percent(p);
  return out;
}

enum class TuneMetric { f1, accuracy };

struct ThresholdTuning {
  int c_hat = 0;
  std::vector<std::pair<int, double>> curve;  // (c, metric)
};

/// Sweeps every integer c in [0, c_max] and returns the smallest c attaining
/// the best validation metric, plus the whole curve. Undefined F1 counts as 0.
inline ThresholdTuning tune_threshold(std::span<const TilePredictions> val_preds, std::span<const int> val_labels,
                                      TuneMetric metric, std::optional<int> c_max = std::nullopt) {
  if (val_preds.empty()) fail(ErrorCode::EmptyValidation, "validation set is empty");
  if (val_preds.size() != val_labels.size()) fail(ErrorCode::LengthMismatch, "predictions and labels misaligned");
  int hi = 0;
  for (const auto& p : val_preds) hi = std::max(hi, static_cast<int>(p.size()));
  if (c_max) hi = *c_max;
  if (hi < 0) fail(ErrorCode::InvalidSpec, "c_max must be non-negative");

  std::vector<int> counts;
  counts.reserve(val_preds.size());
  for (const auto& p : val_preds) counts.push_back(corroded_count(p));

  ThresholdTuning out;
  double best = -1.0;
  std::vector<int> verdicts(counts.size());
  for (int c = 0; c <= hi; ++c) {
    for (std::size_t i = 0; i < counts.size(); ++i) verdicts[i] = image_verdict(counts[i], c);
    const auto m = metrics::rates(metrics::confusion(verdicts, val_labels));
    const double v = metric == TuneMetric::f1 ? m.f1.value : m.accuracy.value;
    out.curve.emplace_back(c, v);
    if (v > best) {
      best = v;
      out.c_hat = c;
    }
  }
  return out;
}

}  // namespace corrosion::aggregate
