#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <functional>
#include <memory>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <semaphore>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "corrosion/aggregate.hpp"
#include "corrosion/error.hpp"
#include "corrosion/heatmap.hpp"
#include "corrosion/image_io.hpp"
#include "corrosion/metrics.hpp"
#include "corrosion/pipeline.hpp"
#include "corrosion/report.hpp"
#include "corrosion/tiling.hpp"

namespace corrosion::service {

using nlohmann::json;

enum class ReviewStatus { unreviewed, confirmed, disputed };

inline std::string to_string(ReviewStatus s) {
  switch (s) {
    case ReviewStatus::confirmed: return "confirmed";
    case ReviewStatus::disputed: return "disputed";
    default: return "unreviewed";
  }
}

inline std::optional<ReviewStatus> parse_review(const std::string& s) {
  if (s == "unreviewed") return ReviewStatus::unreviewed;
  if (s == "confirmed") return ReviewStatus::confirmed;
  if (s == "disputed") return ReviewStatus::disputed;
  return std::nullopt;
}

struct InspectionRecord {
  std::string image_id;
  std::string uploaded_at;
  std::string image_file;  // relative to the store directory
  int rows = 0;
  int cols = 0;
  int tile_size = 0;
  std::vector<double> probs;
  std::vector<int> verdicts;                  // model verdicts
  std::map<std::pair<int, int>, int> overrides;  // (row, col) -> label
  int c = 0;
  int corroded_count = 0;
  int verdict = 0;
  double areal_percent = 0.0;
  ReviewStatus review = ReviewStatus::unreviewed;
  std::optional<int> label;  // ground truth set by review

  std::vector<int> effective_verdicts() const {
    std::vector<int> v = verdicts;
    for (const auto& [cell, lab] : overrides) v[static_cast<std::size_t>(cell.first) * cols + cell.second] = lab;
    return v;
  }

  aggregate::TilePredictions effective_predictions() const {
    aggregate::TilePredictions p;
    p.image_id = image_id;
    p.rows = rows;
    p.cols = cols;
    p.probs = probs;
    p.verdicts = effective_verdicts();
    return p;
  }

  /// Re-derives count, verdict and areal percent at threshold `c_now`.
  void refresh(int c_now) {
    c = c_now;
    const auto p = aggregate::classify_image(effective_predictions(), {c});
    corroded_count = p.corroded_count;
    verdict = p.verdict;
    areal_percent = p.areal_percent;
  }
};

namespace detail {

inline json grid_json(const std::vector<int>& v, int rows, int cols) {
  json g = json::array();
  for (int r = 0; r < rows; ++r) {
    json row = json::array();
    for (int c = 0; c < cols; ++c) row.push_back(v[static_cast<std::size_t>(r) * cols + c]);
    g.push_back(std::move(row));
  }
  return g;
}

inline std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string content_id(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (auto b : bytes) h = (h ^ b) * 1099511628211ULL;
  char buf[24];
  std::snprintf(buf, sizeof(buf), "img_%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline bool valid_id(const std::string& id) {
  if (id.empty() || id.size() > 128 || id[0] == '.') return false;
  for (char ch : id)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.')) return false;
  return true;
}

}  // namespace detail

inline json record_summary(const InspectionRecord& r) {
  return {{"image_id", r.image_id},
          {"uploaded_at", r.uploaded_at},
          {"rows", r.rows},
          {"cols", r.cols},
          {"n_tiles", r.rows * r.cols},
          {"corroded_count", r.corroded_count},
          {"c", r.c},
          {"verdict", r.verdict},
          {"areal_percent", r.areal_percent},
          {"n_overrides", r.overrides.size()},
          {"review_status", to_string(r.review)},
          {"label", r.label ? json(*r.label) : json(nullptr)}};
}

inline json record_json(const InspectionRecord& r) {
  json j = record_summary(r);
  j["tile_size"] = r.tile_size;
  j["tile_probs"] = json::array();
  for (int row = 0; row < r.rows; ++row) {
    json pr = json::array();
    for (int col = 0; col < r.cols; ++col) pr.push_back(r.probs[static_cast<std::size_t>(row) * r.cols + col]);
    j["tile_probs"].push_back(std::move(pr));
  }
  j["model_verdicts"] = detail::grid_json(r.verdicts, r.rows, r.cols);
  j["tile_verdicts"] = detail::grid_json(r.effective_verdicts(), r.rows, r.cols);
  json ov = json::array();
  for (const auto& [cell, lab] : r.overrides) ov.push_back({{"row", cell.first}, {"col", cell.second}, {"label", lab}});
  j["overrides"] = std::move(ov);
  return j;
}

/// Inverse of record_json for the persisted store.
inline InspectionRecord record_from_json(const json& j) {
  InspectionRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.uploaded_at = j.at("uploaded_at").get<std::string>();
  r.image_file = j.at("image_file").get<std::string>();
  r.rows = j.at("rows").get<int>();
  r.cols = j.at("cols").get<int>();
  r.tile_size = j.at("tile_size").get<int>();
  for (const auto& row : j.at("tile_probs"))
    for (const auto& v : row) r.probs.push_back(v.get<double>());
  for (const auto& row : j.at("model_verdicts"))
    for (const auto& v : row) r.verdicts.push_back(v.get<int>());
  for (const auto& o : j.at("overrides"))
    r.overrides[{o.at("row").get<int>(), o.at("col").get<int>()}] = o.at("label").get<int>();
  r.review = parse_review(j.at("review_status").get<std::string>()).value_or(ReviewStatus::unreviewed);
  if (!j.at("label").is_null()) r.label = j.at("label").get<int>();
  r.c = j.at("c").get<int>();
  if (r.verdicts.size() != static_cast<std::size_t>(r.rows) * r.cols || r.probs.size() != r.verdicts.size())
    fail(ErrorCode::LengthMismatch, "stored record " + r.image_id + " is inconsistent");
  return r;
}

/// HTTP-independent reply: status, content type, body.
struct Reply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;

  static Reply ok(const json& j, int status = 200) { return {status, "application/json", j.dump()}; }
  static Reply error(int status, const std::string& code, const std::string& message, json extra = json::object()) {
    extra["code"] = code;
    extra["message"] = message;
    return {status, "application/json", extra.dump()};
  }
};

/// Inference backend: per-tile predictions for a full image at a fixed tile size.
struct ModelHandle {
  std::function<aggregate::TilePredictions(const Image&)> predict;
  int tile_size = 256;
  json info = json::object();

  static ModelHandle from(Predictor predictor) {
    auto shared = std::make_shared<const Predictor>(std::move(predictor));
    ModelHandle h;
    h.tile_size = shared->tile_size();
    const auto& p = shared->params();
    h.info = {{"tile_size", p.arch.input_size},
              {"arch",
               {{"stem_channels", p.arch.stem_channels},
                {"stage_channels", p.arch.stage_channels},
                {"blocks_per_stage", p.arch.blocks_per_stage},
                {"num_classes", p.arch.num_classes}}},
              {"trainable_params", p.trainable_count()},
              {"layer_groups", p.group_names}};
    h.predict = [shared](const Image& img) { return shared->predict_image(img); };
    return h;
  }
};

struct ServiceOptions {
  std::filesystem::path store_dir = "store";
  int default_c = 0;
  int inference_workers = 2;
  std::string model_path;  // informational
  HeatmapPalette palette{};
};

/// Inspection session: records, global threshold and the operator workflow.
/// Reads share a lock; every mutation and every threshold change is exclusive,
/// so readers see either the old or the new state. Inference runs outside the
/// lock, bounded by a semaphore.
class Service {
 public:
  Service(std::optional<ModelHandle> model, ServiceOptions opt)
      : model_(std::move(model)), opt_(std::move(opt)), c_(opt_.default_c), slots_(std::max(1, opt_.inference_workers)) {
    if (c_ < 0) fail(ErrorCode::InvalidSpec, "default threshold must be non-negative");
    std::filesystem::create_directories(opt_.store_dir / "images");
    replay();
  }

  int threshold() const {
    std::shared_lock lock(mu_);
    return c_;
  }

  Reply post_image(std::span<const std::uint8_t> bytes, std::optional<std::string> id = std::nullopt) {
    if (!model_) return Reply::error(503, "no_model", "no model is loaded");
    const std::string image_id = id ? *id : detail::content_id(bytes);
    if (!detail::valid_id(image_id)) return Reply::error(400, "bad_id", "image id may contain only [A-Za-z0-9_.-]");
    {
      std::shared_lock lock(mu_);
      if (records_.count(image_id)) return Reply::error(409, "duplicate_image", "image " + image_id + " already exists");
    }
    Image img;
    try {
      img = decode_image(bytes, image_id);
    } catch (const Error& e) {
      return Reply::error(400, "undecodable_image", e.what());
    }
    const int tile = model_->tile_size;
    if (img.width() < tile || img.height() < tile)
      return Reply::error(422, "image_too_small", "image is smaller than one " + std::to_string(tile) + "px tile");

    aggregate::TilePredictions preds;
    {
      slots_.acquire();
      try {
        preds = model_->predict(img);
      } catch (...) {
        slots_.release();
        throw;
      }
      slots_.release();
    }

    InspectionRecord r;
    r.image_id = image_id;
    r.uploaded_at = detail::now_utc();
    r.image_file = "images/" + image_id + (corrosion::detail::is_png(bytes) ? ".png" : ".jpg");
    r.rows = preds.rows;
    r.cols = preds.cols;
    r.tile_size = tile;
    r.probs = std::move(preds.probs);
    r.verdicts = std::move(preds.verdicts);

    std::unique_lock lock(mu_);
    if (records_.count(image_id)) return Reply::error(409, "duplicate_image", "image " + image_id + " already exists");
    write_file_bytes(opt_.store_dir / r.image_file, bytes);
    r.refresh(c_);
    persist(r);
    audit({{"action", "upload"}, {"image_id", image_id}});
    const json out = record_summary(r);
    records_.emplace(image_id, std::move(r));
    return Reply::ok(out, 201);
  }

  Reply list_images() const {
    std::shared_lock lock(mu_);
    json arr = json::array();
    for (const auto& [id, r] : records_) arr.push_back(record_summary(r));
    return Reply::ok({{"c", c_}, {"images", std::move(arr)}});
  }

  Reply get_image(const std::string& id) const {
    std::shared_lock lock(mu_);
    const auto it = records_.find(id);
    if (it == records_.end()) return Reply::error(404, "not_found", "unknown image " + id);
    return Reply::ok(record_json(it->second));
  }

  /// Heatmap PNG of the effective verdicts; bytes match the CLI renderer.
  Reply heatmap(const std::string& id, std::optional<double> alpha = std::nullopt) const {
    InspectionRecord r;
    {
      std::shared_lock lock(mu_);
      const auto it = records_.find(id);
      if (it == records_.end()) return Reply::error(404, "not_found", "unknown image " + id);
      r = it->second;
    }
    HeatmapPalette pal = opt_.palette;
    if (alpha) {
      if (!(*alpha >= 0.0 && *alpha <= 1.0)) return Reply::error(400, "bad_alpha", "alpha must lie in [0, 1]");
      pal.blend_alpha = *alpha;
    }
    const Image img = load_image(opt_.store_dir / r.image_file);
    const auto v = r.effective_verdicts();
    const auto png = encode_png(render_heatmap(img, r.rows, r.cols, TilingSpec::non_overlapping(r.tile_size), v, pal));
    return {200, "image/png", std::string(png.begin(), png.end())};
  }

  /// What-if evaluation at `c`; persists only when `commit` is set.
  Reply threshold(const json& body) {
    if (!body.is_object() || !body.contains("c") || !body.at("c").is_number_integer())
      return Reply::error(400, "bad_request", "body must be {\"c\": integer, \"commit\": bool}");
    const int c = body.at("c").get<int>();
    if (c < 0) return Reply::error(400, "negative_threshold", "c must be non-negative");
    const bool commit = body.value("commit", false);

    auto evaluate = [&](int current) {
      json flips = json::array(), verdicts = json::array();
      for (const auto& [id, r] : records_) {
        const int v = aggregate::image_verdict(r.corroded_count, c);
        verdicts.push_back({{"image_id", id}, {"corroded_count", r.corroded_count}, {"verdict", v}});
        if (v != r.verdict)
          flips.push_back({{"image_id", id}, {"corroded_count", r.corroded_count}, {"from", r.verdict}, {"to", v}});
      }
      return json{{"c", c}, {"previous_c", current}, {"committed", commit}, {"flips", std::move(flips)},
                  {"verdicts", std::move(verdicts)}};
    };

    if (!commit) {
      std::shared_lock lock(mu_);
      return Reply::ok(evaluate(c_));
    }
    std::unique_lock lock(mu_);
    json out = evaluate(c_);
    if (c != c_) {
      audit({{"action", "threshold"}, {"from", c_}, {"to", c}});
      c_ = c;
      append(opt_.store_dir / "records.jsonl", {{"type", "threshold"}, {"c", c}});
      for (auto& [id, r] : records_) r.refresh(c_);
    }
    return Reply::ok(out);
  }

  Reply override_tile(const std::string& id, int row, int col, const json& body) {
    if (!body.is_object() || !body.contains("label") || !body.at("label").is_number_integer())
      return Reply::error(400, "bad_request", "body must be {\"label\": 0|1}");
    const int label = body.at("label").get<int>();
    if (label != 0 && label != 1) return Reply::error(400, "bad_label", "label must be 0 or 1");
    std::unique_lock lock(mu_);
    const auto it = records_.find(id);
    if (it == records_.end()) return Reply::error(404, "not_found", "unknown image " + id);
    auto& r = it->second;
    if (row < 0 || col < 0 || row >= r.rows || col >= r.cols)
      return Reply::error(404, "not_found", "tile (" + std::to_string(row) + "," + std::to_string(col) + ") is outside the grid");
    const int current = r.effective_verdicts()[static_cast<std::size_t>(row) * r.cols + col];
    if (current != label) {
      r.overrides[{row, col}] = label;
      r.refresh(c_);
      persist(r);
      audit({{"action", "override"}, {"image_id", id}, {"row", row}, {"col", col}, {"from", current}, {"to", label}});
    }
    return Reply::ok(record_json(r));
  }

  /// confirmed: ground truth = current verdict; disputed: the opposite;
  /// an explicit "label" takes precedence; unreviewed clears it.
  Reply review(const std::string& id, const json& body) {
    if (!body.is_object() || !body.contains("status") || !body.at("status").is_string())
      return Reply::error(400, "bad_request", "body must be {\"status\": \"confirmed\"|\"disputed\"|\"unreviewed\"}");
    const auto status = parse_review(body.at("status").get<std::string>());
    if (!status) return Reply::error(400, "bad_status", "unknown review status");
    std::optional<int> explicit_label;
    if (body.contains("label") && !body.at("label").is_null()) {
      if (!body.at("label").is_number_integer() || (body.at("label") != 0 && body.at("label") != 1))
        return Reply::error(400, "bad_label", "label must be 0 or 1");
      explicit_label = body.at("label").get<int>();
    }
    std::unique_lock lock(mu_);
    const auto it = records_.find(id);
    if (it == records_.end()) return Reply::error(404, "not_found", "unknown image " + id);
    auto& r = it->second;
    r.review = *status;
    if (*status == ReviewStatus::unreviewed) r.label.reset();
    else if (explicit_label) r.label = explicit_label;
    else r.label = *status == ReviewStatus::confirmed ? r.verdict : 1 - r.verdict;
    persist(r);
    audit({{"action", "review"}, {"image_id", id}, {"status", to_string(r.review)},
           {"label", r.label ? json(*r.label) : json(nullptr)}});
    return Reply::ok(record_json(r));
  }

  /// Rates over reviewed records; ROC scores are corroded-tile counts.
  Reply metrics() const {
    std::shared_lock lock(mu_);
    std::vector<int> preds, labels;
    std::vector<double> scores;
    for (const auto& [id, r] : records_) {
      if (!r.label) continue;
      preds.push_back(r.verdict);
      labels.push_back(*r.label);
      scores.push_back(r.corroded_count);
    }
    if (preds.empty()) return Reply::error(409, "insufficient_data", "no reviewed images");
    json out = report::rates_json(metrics::confusion(preds, labels));
    out["n_labeled"] = preds.size();
    out["c"] = c_;
    try {
      out["roc"] = report::roc_json(metrics::roc(scores, labels));
    } catch (const Error& e) {
      return Reply::error(409, "insufficient_data", std::string("ROC unavailable: ") + e.what(), out);
    }
    return Reply::ok(out);
  }

  Reply model_info() const {
    json j{{"loaded", model_.has_value()}, {"c", threshold()}, {"model_path", opt_.model_path}};
    if (model_) {
      j.update(model_->info);
      j["tile_size"] = model_->tile_size;
    }
    return Reply::ok(j);
  }

 private:
  static void append(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path, std::ios::app | std::ios::binary);
    out << j.dump() << '\n';
    if (!out) fail(ErrorCode::IoFailure, "cannot append to " + path.string());
  }

  void persist(const InspectionRecord& r) {
    json j = record_json(r);
    j["type"] = "record";
    j["image_file"] = r.image_file;
    append(opt_.store_dir / "records.jsonl", j);
  }

  void audit(json entry) {
    entry["time"] = detail::now_utc();
    append(opt_.store_dir / "audit.jsonl", entry);
  }

  /// Last snapshot per image wins; threshold events update the global c.
  void replay() {
    const auto path = opt_.store_dir / "records.jsonl";
    if (!std::filesystem::exists(path)) return;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        const json j = json::parse(line);
        if (j.value("type", "") == "threshold") c_ = j.at("c").get<int>();
        else {
          auto r = record_from_json(j);
          records_[r.image_id] = std::move(r);
        }
      } catch (const json::exception& e) {
        fail(ErrorCode::BadCheckpoint, "corrupt record store: " + std::string(e.what()));
      }
    }
    for (auto& [id, r] : records_) r.refresh(c_);
  }

  std::optional<ModelHandle> model_;
  ServiceOptions opt_;
  mutable std::shared_mutex mu_;
  int c_ = 0;
  std::map<std::string, InspectionRecord> records_;
  std::counting_semaphore<64> slots_;
};

namespace detail {

inline void send(httplib::Response& res, const Reply& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

inline json parse_body(const httplib::Request& req, bool& ok) {
  try {
    ok = true;
    return req.body.empty() ? json::object() : json::parse(req.body);
  } catch (const json::exception&) {
    ok = false;
    return {};
  }
}

}  // namespace detail

/// Registers the JSON API (and optionally a static console directory) on `server`.
inline void mount(httplib::Server& server, Service& svc, const std::filesystem::path& static_dir = {}) {
  using httplib::Request;
  using httplib::Response;
  const std::string id_re = R"(([A-Za-z0-9_.\-]+))";

  server.Post("/api/images", [&svc](const Request& req, Response& res) {
    std::optional<std::string> id;
    if (req.has_param("id")) id = req.get_param_value("id");
    std::string data = req.body;
    if (req.is_multipart_form_data() && req.has_file("image")) data = req.get_file_value("image").content;
    const auto* p = reinterpret_cast<const std::uint8_t*>(data.data());
    detail::send(res, svc.post_image(std::span<const std::uint8_t>(p, data.size()), id));
  });
  server.Get("/api/images", [&svc](const Request&, Response& res) { detail::send(res, svc.list_images()); });
  server.Get("/api/images/" + id_re + "/heatmap.png", [&svc](const Request& req, Response& res) {
    std::optional<double> alpha;
    if (req.has_param("alpha")) {
      try {
        alpha = std::stod(req.get_param_value("alpha"));
      } catch (const std::exception&) {
        detail::send(res, Reply::error(400, "bad_alpha", "alpha must be a number"));
        return;
      }
    }
    detail::send(res, svc.heatmap(req.matches[1], alpha));
  });
  server.Get("/api/images/" + id_re, [&svc](const Request& req, Response& res) {
    detail::send(res, svc.get_image(req.matches[1]));
  });
  server.Post("/api/threshold", [&svc](const Request& req, Response& res) {
    bool ok = false;
    const auto body = detail::parse_body(req, ok);
    detail::send(res, ok ? svc.threshold(body) : Reply::error(400, "bad_json", "request body is not JSON"));
  });
  server.Patch("/api/images/" + id_re + R"(/tiles/(\d+)/(\d+))", [&svc](const Request& req, Response& res) {
    bool ok = false;
    const auto body = detail::parse_body(req, ok);
    if (!ok) return detail::send(res, Reply::error(400, "bad_json", "request body is not JSON"));
    int row = 0, col = 0;
    try {
      row = std::stoi(req.matches[2]);
      col = std::stoi(req.matches[3]);
    } catch (const std::exception&) {
      return detail::send(res, Reply::error(404, "not_found", "tile index out of range"));
    }
    detail::send(res, svc.override_tile(req.matches[1], row, col, body));
  });
  server.Post("/api/images/" + id_re + "/review", [&svc](const Request& req, Response& res) {
    bool ok = false;
    const auto body = detail::parse_body(req, ok);
    detail::send(res, ok ? svc.review(req.matches[1], body) : Reply::error(400, "bad_json", "request body is not JSON"));
  });
  server.Get("/api/metrics", [&svc](const Request&, Response& res) { detail::send(res, svc.metrics()); });
  server.Get("/api/model", [&svc](const Request&, Response& res) { detail::send(res, svc.model_info()); });

  server.set_exception_handler([](const Request&, Response& res, std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    }
    detail::send(res, Reply::error(500, "internal", msg));
  });
  if (!static_dir.empty() && std::filesystem::is_directory(static_dir)) server.set_mount_point("/", static_dir.string());
}

}  // namespace corrosion::service
