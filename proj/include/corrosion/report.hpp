#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "corrosion/aggregate.hpp"
#include "corrosion/error.hpp"
#include "corrosion/metrics.hpp"

namespace corrosion::report {

using nlohmann::json;

/// Image report: counts, threshold, verdict, areal percent, and the per-tile grid.
inline json image_report(const aggregate::TilePredictions& preds, const aggregate::ImagePrediction& p, int tile_size) {
  json grid = json::array();
  json probs = json::array();
  for (int r = 0; r < preds.rows; ++r) {
    json vrow = json::array(), prow = json::array();
    for (int c = 0; c < preds.cols; ++c) {
      const std::size_t k = static_cast<std::size_t>(r) * preds.cols + c;
      vrow.push_back(preds.verdicts[k]);
      prow.push_back(preds.probs.empty() ? 0.0 : preds.probs[k]);
    }
    grid.push_back(std::move(vrow));
    probs.push_back(std::move(prow));
  }
  return {{"image_id", p.image_id},
          {"n_tiles", p.n_tiles},
          {"corroded_count", p.corroded_count},
          {"c", p.threshold},
          {"verdict", p.verdict},
          {"areal_percent", p.areal_percent},
          {"rows", preds.rows},
          {"cols", preds.cols},
          {"tile_size", tile_size},
          {"tile_verdicts", std::move(grid)},
          {"tile_probs", std::move(probs)}};
}

/// Recovers the tile predictions stored in an image report.
inline aggregate::TilePredictions predictions_from_report(const json& j) {
  aggregate::TilePredictions p;
  try {
    p.image_id = j.at("image_id").get<std::string>();
    p.rows = j.at("rows").get<int>();
    p.cols = j.at("cols").get<int>();
    for (const auto& row : j.at("tile_verdicts"))
      for (const auto& v : row) p.verdicts.push_back(v.get<int>());
    if (j.contains("tile_probs"))
      for (const auto& row : j.at("tile_probs"))
        for (const auto& v : row) p.probs.push_back(v.get<double>());
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidSpec, std::string("malformed image report: ") + e.what());
  }
  if (p.verdicts.size() != static_cast<std::size_t>(p.rows) * p.cols)
    fail(ErrorCode::LengthMismatch, "report grid does not match rows x cols");
  return p;
}

inline json rate_json(const metrics::Rate& r) {
  return r.defined ? json(r.value) : json(nullptr);
}

inline json rates_json(const metrics::ConfusionCounts& cc) {
  const auto m = metrics::rates(cc);
  return {{"tn", cc.tn},
          {"fp", cc.fp},
          {"fn", cc.fn},
          {"tp", cc.tp},
          {"tpr", rate_json(m.tpr)},
          {"fpr", rate_json(m.fpr)},
          {"ppv", rate_json(m.ppv)},
          {"f1", rate_json(m.f1)},
          {"accuracy", rate_json(m.accuracy)}};
}

inline json roc_json(const metrics::RocCurve& c) {
  json pts = json::array();
  for (const auto& [f, t] : c.points) pts.push_back({f, t});
  return {{"auc", c.auc}, {"points", std::move(pts)}};
}

}  // namespace corrosion::report
