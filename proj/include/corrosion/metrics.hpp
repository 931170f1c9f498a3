#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "corrosion/error.hpp"

namespace corrosion::metrics {

struct ConfusionCounts {
  long tn = 0, fp = 0, fn = 0, tp = 0;

  long total() const noexcept { return tn + fp + fn + tp; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// A ratio whose denominator may be zero; such values read 0 with defined = false.
struct Rate {
  double value = 0.0;
  bool defined = false;
};

struct RateMetrics {
  Rate tpr, fpr, ppv, f1;
  Rate accuracy;
};

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr)
  std::vector<double> thresholds;                  // score cut that produced each point after the first
  double auc = 0.0;
};

/// Positive = corroded = 1.
inline ConfusionCounts confusion(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) fail(ErrorCode::LengthMismatch, "predictions and labels differ in length");
  if (preds.empty()) fail(ErrorCode::LengthMismatch, "nothing to score");
  ConfusionCounts cc;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] != 0, y = labels[i] != 0;
    if (p && y) ++cc.tp;
    else if (p) ++cc.fp;
    else if (y) ++cc.fn;
    else ++cc.tn;
  }
  return cc;
}

inline Rate ratio(double num, double den) { return den > 0 ? Rate{num / den, true} : Rate{0.0, false}; }

inline RateMetrics rates(const ConfusionCounts& cc) {
  RateMetrics m;
  m.tpr = ratio(static_cast<double>(cc.tp), static_cast<double>(cc.tp + cc.fn));
  m.fpr = ratio(static_cast<double>(cc.fp), static_cast<double>(cc.fp + cc.tn));
  m.ppv = ratio(static_cast<double>(cc.tp), static_cast<double>(cc.tp + cc.fp));
  if (m.ppv.defined && m.tpr.defined && m.ppv.value + m.tpr.value > 0)
    m.f1 = {2.0 * m.ppv.value * m.tpr.value / (m.ppv.value + m.tpr.value), true};
  m.accuracy = ratio(static_cast<double>(cc.tp + cc.tn), static_cast<double>(cc.total()));
  return m;
}

/// Threshold sweep over unique scores in descending order, tied scores
/// entering together; area by the trapezoid rule.
inline RocCurve roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(ErrorCode::LengthMismatch, "scores and labels differ in length");
  const long pos = std::count_if(labels.begin(), labels.end(), [](int y) { return y != 0; });
  const long neg = static_cast<long>(labels.size()) - pos;
  if (pos == 0 || neg == 0) fail(ErrorCode::SingleClass, "ROC needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.emplace_back(0.0, 0.0);
  long tp = 0, fp = 0;
  double auc = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    long dtp = 0, dfp = 0;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? dtp : dfp) += 1;
    // trapezoid over the tied group, in exact integer units
    auc += static_cast<double>(dfp) * (2.0 * tp + dtp) / 2.0;
    tp += dtp;
    fp += dfp;
    curve.points.emplace_back(static_cast<double>(fp) / neg, static_cast<double>(tp) / pos);
    curve.thresholds.push_back(s);
  }
  curve.auc = auc / (static_cast<double>(pos) * neg);
  return curve;
}

inline std::string format_rate(const Rate& r) {
  char buf[32];
  if (!r.defined) return "n/a";
  std::snprintf(buf, sizeof(buf), "%.4f", r.value);
  return buf;
}

/// Aligned text table in the TN/FP/FN/TP/TPR/FPR/PPV/F1 row layout, one column per run.
inline std::string format_table(const std::vector<std::pair<std::string, ConfusionCounts>>& columns) {
  std::ostringstream os;
  char buf[64];
  os << "     ";
  for (const auto& [name, _] : columns) {
    std::snprintf(buf, sizeof(buf), " %12s", name.c_str());
    os << buf;
  }
  os << '\n';
  auto count_row = [&](const char* label, auto get) {
    std::snprintf(buf, sizeof(buf), "%-5s", label);
    os << buf;
    for (const auto& [_, cc] : columns) {
      std::snprintf(buf, sizeof(buf), " %12ld", get(cc));
      os << buf;
    }
    os << '\n';
  };
  count_row("TN", [](const ConfusionCounts& c) { return c.tn; });
  count_row("FP", [](const ConfusionCounts& c) { return c.fp; });
  count_row("FN", [](const ConfusionCounts& c) { return c.fn; });
  count_row("TP", [](const ConfusionCounts& c) { return c.tp; });
  auto rate_row = [&](const char* label, auto get) {
    std::snprintf(buf, sizeof(buf), "%-5s", label);
    os << buf;
    for (const auto& [_, cc] : columns) {
      std::snprintf(buf, sizeof(buf), " %12s", format_rate(get(rates(cc))).c_str());
      os << buf;
    }
    os << '\n';
  };
  rate_row("TPR", [](const RateMetrics& m) { return m.tpr; });
  rate_row("FPR", [](const RateMetrics& m) { return m.fpr; });
  rate_row("PPV", [](const RateMetrics& m) { return m.ppv; });
  rate_row("F1", [](const RateMetrics& m) { return m.f1; });
  return os.str();
}

inline std::string roc_csv(const RocCurve& c) {
  std::ostringstream os;
  os << "fpr,tpr,threshold\n";
  char buf[96];
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    if (i == 0) {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g,inf\n", c.points[i].first, c.points[i].second);
    } else {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g\n", c.points[i].first, c.points[i].second, c.thresholds[i - 1]);
    }
    os << buf;
  }
  return os.str();
}

}  // namespace corrosion::metrics
