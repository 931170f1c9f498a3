#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "corrosion/aggregate.hpp"
#include "corrosion/checkpoint.hpp"
#include "corrosion/config.hpp"
#include "corrosion/dataset.hpp"
#include "corrosion/heatmap.hpp"
#include "corrosion/image_io.hpp"
#include "corrosion/metrics.hpp"
#include "corrosion/model.hpp"
#include "corrosion/pipeline.hpp"
#include "corrosion/report.hpp"
#include "corrosion/service.hpp"
#include "corrosion/synthgen.hpp"
#include "corrosion/tiling.hpp"
#include "corrosion/trainer.hpp"

namespace corrosion::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct Key {
  std::string name;  // underscore form
  std::string default_value;
  std::string help;
  bool is_flag = false;
};

inline std::vector<Key> common_keys() {
  return {{"seed", "0", "random seed"},
          {"out", "out", "output directory"},
          {"workers", "1", "worker threads"}};
}

inline std::vector<Key> arch_keys() {
  return {{"stem_channels", "16", "stem convolution width"},
          {"stage_channels", "16,32,64", "residual stage widths"},
          {"blocks_per_stage", "2", "basic blocks per stage"},
          {"tile_size", "256", "tile edge length in pixels"}};
}

/// Settings per subcommand, with defaults.
inline std::map<std::string, std::vector<Key>> subcommand_keys() {
  std::map<std::string, std::vector<Key>> k;
  k["synth"] = {{"n_corroded", "60", "defect-bearing surfaces"},
                {"n_intact", "60", "defect-free surfaces"},
                {"width", "768", "surface width"},
                {"height", "512", "surface height"},
                {"tile_size", "256", "tile edge length"},
                {"min_pixels", "64", "defect pixels needed to label a tile corroded"},
                {"defects_min", "1", "fewest defects on a corroded surface"},
                {"defects_max", "3", "most defects on a corroded surface"},
                {"confounders_min", "0", "fewest confounders per surface"},
                {"confounders_max", "3", "most confounders per surface"},
                {"mix_discoloration", "0.4", "share of discoloration blotches"},
                {"mix_pits", "0.3", "share of pit clusters"},
                {"mix_cracks", "0.3", "share of crack polylines"},
                {"mix_scratch", "0.6", "share of scratch confounders"},
                {"mix_shadow", "0.4", "share of shadow confounders"}};
  k["tile"] = {{"input", "", "image file or directory"},
               {"tile_size", "256", "tile edge length"},
               {"stride", "0", "window stride (0 = tile size)"},
               {"label", "", "label for every tile (default: from {id}.mask.png, else 0)"},
               {"min_pixels", "64", "mask pixels needed to label a tile corroded"}};
  k["split"] = {{"manifest", "", "input manifest.csv"},
                {"train_frac", "0.6", "train fraction"},
                {"val_frac", "0.2", "validation fraction"},
                {"test_frac", "0.2", "test fraction"},
                {"stratified", "false", "balance image labels across splits", true}};
  k["lrfind"] = {{"manifest", "", "split manifest.csv"},
                 {"lr_lo", "1e-7", "first learning rate"},
                 {"lr_hi", "10", "last learning rate"},
                 {"steps", "100", "sweep length"},
                 {"batch_size", "64", "batch size"},
                 {"momentum_low", "0.85", "momentum during the sweep"},
                 {"augment", "true", "augment sweep batches", true}};
  k["train"] = {{"manifest", "", "split manifest.csv"},
                {"epochs", "50", "training epochs"},
                {"batch_size", "128", "batch size"},
                {"lr_min", "1e-6", "learning rate of the first layer group"},
                {"lr_max", "5e-4", "learning rate of the last layer group"},
                {"pct_start", "0.3", "warm-up share of the cycle"},
                {"div_factor", "25", "lr_max / starting lr"},
                {"final_div_factor", "1e4", "lr_max / final lr"},
                {"momentum_high", "0.95", "momentum at the cycle ends"},
                {"momentum_low", "0.85", "momentum at the peak lr"},
                {"weight_decay", "0", "L2 penalty"},
                {"weight_intact", "1", "loss weight of intact tiles"},
                {"weight_corroded", "1", "loss weight of corroded tiles"},
                {"augment", "true", "augment training batches", true},
                {"augment_val", "false", "augment validation batches too", true}};
  k["tune"] = {{"model", "", "checkpoint"},
               {"manifest", "", "split manifest.csv"},
               {"metric", "f1", "f1 or accuracy"},
               {"c_max", "", "largest threshold swept (default: most tiles per image)"},
               {"batch_size", "64", "inference batch size"}};
  k["predict"] = {{"model", "", "checkpoint"},
                  {"image", "", "image file or directory"},
                  {"c", "0", "image threshold"},
                  {"tune", "", "tune.json whose c_hat replaces the default c"},
                  {"heatmap", "false", "also write heatmaps", true},
                  {"alpha", "0.35", "heatmap blend factor"},
                  {"batch_size", "64", "inference batch size"}};
  k["evaluate"] = {{"model", "", "checkpoint"},
                   {"manifest", "", "split manifest.csv"},
                   {"split", "test", "split to evaluate"},
                   {"c", "0", "image threshold"},
                   {"tune", "", "tune.json whose c_hat replaces the default c"},
                   {"batch_size", "64", "inference batch size"}};
  k["heatmap"] = {{"image", "", "original image"},
                  {"report", "", "image report JSON"},
                  {"alpha", "0.35", "blend factor"}};
  k["serve"] = {{"model", "", "checkpoint (omit to start without a model)"},
                {"host", "127.0.0.1", "bind address"},
                {"port", "8080", "port"},
                {"c", "0", "initial image threshold"},
                {"tune", "", "tune.json whose c_hat replaces the default c"},
                {"static", "", "directory of console files to serve"}};
  for (auto& [name, keys] : k) {
    auto common = common_keys();
    keys.insert(keys.begin(), common.begin(), common.end());
    if (name == "lrfind" || name == "train") {
      for (const auto& a : arch_keys())
        if (std::none_of(keys.begin(), keys.end(), [&](const Key& x) { return x.name == a.name; })) keys.push_back(a);
    }
  }
  return k;
}

inline std::string dashed(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

/// Flag names accepted in config files but belonging to other subcommands are ignored.
inline bool known_anywhere(const std::string& key) {
  for (const auto& [_, keys] : subcommand_keys())
    for (const auto& k : keys)
      if (k.name == key) return true;
  return false;
}

struct Invocation {
  std::string command;
  config::Settings settings;
  std::map<std::string, bool> explicit_keys;  // set by file or flag

  bool is_explicit(const std::string& k) const { return explicit_keys.count(k) != 0; }
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HelpShown {};

inline bool is_number(const std::string& v) {
  double x = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  return !v.empty() && r.ec == std::errc{} && r.ptr == v.data() + v.size();
}

inline std::string error_line(std::string_view code, std::string_view message) {
  return json{{"error", {{"code", code}, {"message", message}}}}.dump();
}

// ---------------------------------------------------------------------------
// helpers shared by subcommands

inline model::ArchConfig arch_from(const config::Settings& s) {
  model::ArchConfig a;
  a.stem_channels = s.integer("stem_channels");
  a.stage_channels = s.int_list("stage_channels");
  a.blocks_per_stage = s.integer("blocks_per_stage");
  a.input_size = s.integer("tile_size");
  a.validate();
  return a;
}

inline void write_json(const fs::path& path, const json& j) { dataset::write_text(path, j.dump(2) + "\n"); }

inline int resolve_c(const Invocation& inv) {
  const auto& s = inv.settings;
  int c = s.integer("c");
  if (!inv.is_explicit("c")) {
    if (const auto t = s.opt("tune")) c = json::parse(dataset::read_text(*t)).at("c_hat").get<int>();
  }
  if (c < 0) fail(ErrorCode::InvalidSpec, "c must be non-negative");
  return c;
}

inline fs::path required_path(const config::Settings& s, const std::string& key) {
  const auto v = s.opt(key);
  if (!v) throw UsageError("--" + dashed(key) + " is required");
  return *v;
}

inline std::vector<fs::path> image_inputs(const fs::path& p) {
  std::vector<fs::path> out;
  if (fs::is_directory(p)) {
    for (const auto& e : fs::directory_iterator(p)) {
      if (!e.is_regular_file()) continue;
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      const auto name = e.path().filename().string();
      if (name.size() > 9 && name.substr(name.size() - 9) == ".mask.png") continue;
      if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
  } else {
    out.push_back(p);
  }
  if (out.empty()) fail(ErrorCode::UnreadableFile, "no images under " + p.string());
  return out;
}

inline std::vector<std::uint8_t> heatmap_png(const Image& img, const aggregate::TilePredictions& preds, int tile_size,
                                             double alpha) {
  HeatmapPalette pal;
  pal.blend_alpha = alpha;
  return encode_png(render_heatmap(img, preds.rows, preds.cols, TilingSpec::non_overlapping(tile_size), preds.verdicts, pal));
}

/// Rewrites tile paths so they stay valid relative to a new manifest directory.
inline dataset::DatasetManifest rebase_paths(dataset::DatasetManifest m, const fs::path& from_dir, const fs::path& to_dir) {
  const auto from = fs::weakly_canonical(fs::absolute(from_dir));
  const auto to = fs::weakly_canonical(fs::absolute(to_dir));
  if (from == to) return m;
  for (auto& e : m.entries) e.path = fs::relative(from / e.path, to).generic_string();
  return m;
}

// ---------------------------------------------------------------------------
// subcommands

inline int cmd_synth(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  synth::SurfaceSpec spec;
  spec.width = s.integer("width");
  spec.height = s.integer("height");
  spec.defect_count = {s.integer("defects_min"), s.integer("defects_max")};
  spec.confounder_count = {s.integer("confounders_min"), s.integer("confounders_max")};
  spec.defect_mix = {s.real("mix_discoloration"), s.real("mix_pits"), s.real("mix_cracks")};
  spec.confounder_mix = {s.real("mix_scratch"), s.real("mix_shadow")};
  synth::DatasetOptions opt;
  opt.tiling = TilingSpec::non_overlapping(s.integer("tile_size"));
  opt.tiling.validate();
  opt.min_pixels = static_cast<std::size_t>(s.integer("min_pixels"));
  opt.workers = s.integer("workers");
  const fs::path dir = s.str("out");
  const auto m = synth::generate_dataset(spec, s.integer("n_corroded"), s.integer("n_intact"), s.u64("seed"), dir, opt);
  dataset::write_manifest(m, dir / "manifest.csv");
  const auto cc = dataset::class_counts(m, dataset::Split::train);
  out << "synth: " << m.images.size() << " images, " << m.entries.size() << " tiles (" << cc.corroded_tiles
      << " corroded) -> " << (dir / "manifest.csv").string() << "\n";
  return kExitOk;
}

inline int cmd_tile(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  TilingSpec spec;
  spec.tile_size = s.integer("tile_size");
  spec.stride = s.integer("stride") == 0 ? spec.tile_size : s.integer("stride");
  spec.validate();
  const auto label = s.opt("label");
  if (label && *label != "0" && *label != "1") throw UsageError("--label must be 0 or 1");
  const fs::path dir = s.str("out");
  dataset::DatasetManifest m;
  for (const auto& path : image_inputs(required_path(s, "input"))) {
    const Image img = load_image(path);
    const auto grid = tile_image(img, spec);
    std::vector<int> labels(grid.tiles.size(), label ? std::stoi(*label) : 0);
    const auto mask_path = path.parent_path() / (img.id() + ".mask.png");
    if (!label && fs::exists(mask_path)) {
      const Image mimg = load_image(mask_path);
      if (mimg.width() != img.width() || mimg.height() != img.height())
        fail(ErrorCode::ShapeMismatch, "mask " + mask_path.string() + " does not match its image");
      synth::DefectMask mask(img.width(), img.height());
      for (std::size_t k = 0; k < mask.values.size(); ++k) mask.values[k] = mimg.pixels()[3 * k] > 127 ? 1 : 0;
      labels = synth::mask_to_labels(mask, spec, static_cast<std::size_t>(s.integer("min_pixels")));
    }
    m.images.push_back({img.id(), 0, 0, dataset::Split::train});
    for (std::size_t k = 0; k < grid.tiles.size(); ++k) {
      const auto& t = grid.tiles[k];
      const std::string name = tile_file_name(img.id(), t.row, t.col);
      save_png(t.pixels, dir / "tiles" / name);
      m.entries.push_back({img.id(), t.row, t.col, labels[k], dataset::Split::train, "tiles/" + name});
    }
    out << "tile: " << path.string() << " -> " << grid.rows << "x" << grid.cols << " = " << grid.tiles.size()
        << " tiles\n";
  }
  m.recompute();
  dataset::write_manifest(m, dir / "manifest.csv");
  return kExitOk;
}

inline int cmd_split(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  const fs::path src = required_path(s, "manifest");
  const fs::path dir = s.str("out");
  auto m = dataset::read_manifest(src);
  m = dataset::split_grouped(m, {s.real("train_frac"), s.real("val_frac"), s.real("test_frac")}, s.u64("seed"),
                             s.flag("stratified"));
  m = rebase_paths(std::move(m), src.parent_path().empty() ? "." : src.parent_path(), dir);
  dataset::write_manifest(m, dir / "manifest.csv");
  for (auto sp : {dataset::Split::train, dataset::Split::val, dataset::Split::test}) {
    const auto cc = dataset::class_counts(m, sp);
    out << "split " << dataset::to_string(sp) << ": " << m.images_in(sp).size() << " images, " << cc.corroded_tiles + cc.intact_tiles
        << " tiles (" << cc.corroded_tiles << " corroded, " << cc.intact_tiles << " intact)\n";
  }
  return kExitOk;
}

inline std::vector<train::TileSample> load_split(const config::Settings& s, const fs::path& manifest_path,
                                                 const dataset::DatasetManifest& m, dataset::Split sp) {
  return load_samples(m, manifest_path.parent_path(), sp, s.integer("workers"));
}

inline model::ModelParams<float> fresh_model(const config::Settings& s, std::span<const train::TileSample> samples) {
  auto params = model::init_model<float>(arch_from(s), s.u64("seed"));
  std::vector<const Image*> ptrs;
  for (const auto& t : samples) ptrs.push_back(&t.pixels);
  params.input_stats = model::compute_input_stats(ptrs);
  return params;
}

inline int cmd_lrfind(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  const fs::path mpath = required_path(s, "manifest");
  const auto m = dataset::read_manifest(mpath);
  const auto samples = load_split(s, mpath, m, dataset::Split::train);
  if (samples.empty()) fail(ErrorCode::EmptyStream, "training split is empty");
  const auto params = fresh_model(s, samples);
  train::TrainConfig cfg;
  cfg.batch_size = s.integer("batch_size");
  cfg.momentum_low = s.real("momentum_low");
  cfg.seed = s.u64("seed");
  cfg.workers = s.integer("workers");
  cfg.augment.enabled = s.flag("augment");
  const auto curve = train::lr_find<float>(params, samples, s.real("lr_lo"), s.real("lr_hi"), s.integer("steps"), cfg);
  const fs::path dir = s.str("out");
  std::string csv = "lr,smoothed_loss,loss\n";
  char buf[96];
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g\n", curve.points[i].first, curve.points[i].second,
                  curve.raw_losses[i]);
    csv += buf;
  }
  dataset::write_text(dir / "lr_find.csv", csv);
  write_json(dir / "lr_find.json", {{"suggestion", curve.suggestion},
                                    {"stopped_early", curve.stopped_early},
                                    {"steps_run", curve.points.size()}});
  out << "lrfind: suggested lr " << curve.suggestion << " after " << curve.points.size() << " steps\n";
  return kExitOk;
}

inline int cmd_train(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  const fs::path mpath = required_path(s, "manifest");
  const auto m = dataset::read_manifest(mpath);
  const auto tr = load_split(s, mpath, m, dataset::Split::train);
  const auto va = load_split(s, mpath, m, dataset::Split::val);
  if (tr.empty()) fail(ErrorCode::EmptyStream, "training split is empty");
  auto params = fresh_model(s, tr);

  train::TrainConfig cfg;
  cfg.epochs = s.integer("epochs");
  cfg.batch_size = s.integer("batch_size");
  cfg.lr_min = s.real("lr_min");
  cfg.lr_max = s.real("lr_max");
  cfg.pct_start = s.real("pct_start");
  cfg.div_factor = s.real("div_factor");
  cfg.final_div_factor = s.real("final_div_factor");
  cfg.momentum_high = s.real("momentum_high");
  cfg.momentum_low = s.real("momentum_low");
  cfg.weight_decay = s.real("weight_decay");
  cfg.seed = s.u64("seed");
  cfg.augment.enabled = s.flag("augment");
  cfg.augment_val = s.flag("augment_val");
  cfg.class_weights = {s.real("weight_intact"), s.real("weight_corroded")};
  cfg.workers = s.integer("workers");

  const fs::path dir = s.str("out");
  try {
    auto [trained, history] = train::train<float>(std::move(params), tr, va, cfg, [&](const train::EpochRecord& r) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "epoch %3d  train %.5f  val %.5f  (%.1fs)\n", r.epoch, r.train_loss,
                    r.val_loss, r.seconds);
      out << buf << std::flush;
    });
    model::save_checkpoint(trained, dir / "model.ckpt");
    dataset::write_text(dir / "history.csv", train::history_csv(history));
  } catch (const train::TrainingAborted& e) {
    dataset::write_text(dir / "history.csv", train::history_csv(e.partial()));
    throw;
  }
  out << "train: wrote " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

inline int cmd_tune(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  const fs::path mpath = required_path(s, "manifest");
  const auto m = dataset::read_manifest(mpath);
  const Predictor pred(model::load_checkpoint<float>(required_path(s, "model")), s.integer("batch_size"));
  const auto metric_name = s.str("metric");
  if (metric_name != "f1" && metric_name != "accuracy") throw UsageError("--metric must be f1 or accuracy");
  const auto metric = metric_name == "f1" ? aggregate::TuneMetric::f1 : aggregate::TuneMetric::accuracy;
  std::optional<int> c_max;
  if (s.opt("c_max")) c_max = s.integer("c_max");
  const auto vp = predict_split(pred, m, mpath.parent_path(), dataset::Split::val, s.integer("workers"));
  const auto tuning = aggregate::tune_threshold(vp.images, vp.image_labels, metric, c_max);
  json curve = json::array();
  std::string csv = "c," + metric_name + "\n";
  char buf[64];
  for (const auto& [c, v] : tuning.curve) {
    curve.push_back({{"c", c}, {"value", v}});
    std::snprintf(buf, sizeof(buf), "%d,%.9g\n", c, v);
    csv += buf;
  }
  const fs::path dir = s.str("out");
  write_json(dir / "tune.json", {{"c_hat", tuning.c_hat}, {"metric", metric_name}, {"n_images", vp.images.size()},
                                 {"curve", std::move(curve)}});
  dataset::write_text(dir / "tune_curve.csv", csv);
  out << "tune: c_hat = " << tuning.c_hat << " over " << vp.images.size() << " validation images\n";
  return kExitOk;
}

inline int cmd_predict(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  const Predictor pred(model::load_checkpoint<float>(required_path(s, "model")), s.integer("batch_size"));
  const int c = resolve_c(inv);
  const bool heat = s.flag("heatmap");
  const double alpha = s.real("alpha");
  const fs::path dir = s.str("out");
  for (const auto& path : image_inputs(required_path(s, "image"))) {
    const Image img = load_image(path);
    const auto preds = pred.predict_image(img);
    if (preds.verdicts.empty())
      fail(ErrorCode::EmptyPrediction, path.string() + " is smaller than one tile");
    const auto ip = aggregate::classify_image(preds, {c});
    write_json(dir / "reports" / (img.id() + ".json"), report::image_report(preds, ip, pred.tile_size()));
    if (heat) write_file_bytes(dir / "heatmaps" / (img.id() + ".png"), heatmap_png(img, preds, pred.tile_size(), alpha));
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s: %d/%d tiles corroded (%.1f%%), c=%d -> %s\n", img.id().c_str(),
                  ip.corroded_count, ip.n_tiles, ip.areal_percent, c, ip.verdict ? "corroded" : "intact");
    out << buf;
  }
  return kExitOk;
}

inline int cmd_evaluate(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  const fs::path mpath = required_path(s, "manifest");
  const auto m = dataset::read_manifest(mpath);
  const Predictor pred(model::load_checkpoint<float>(required_path(s, "model")), s.integer("batch_size"));
  const int c = resolve_c(inv);
  const auto split = dataset::parse_split(s.str("split"));
  const auto sp = predict_split(pred, m, mpath.parent_path(), split, s.integer("workers"));
  if (sp.images.empty()) fail(ErrorCode::EmptyStream, "split has no tiled images");
  const fs::path dir = s.str("out");

  std::vector<int> image_preds, tile_preds;
  std::vector<double> image_scores, tile_scores;
  for (std::size_t i = 0; i < sp.images.size(); ++i) {
    const auto& p = sp.images[i];
    const auto ip = aggregate::classify_image(p, {c});
    auto rep = report::image_report(p, ip, pred.tile_size());
    rep["label"] = sp.image_labels[i];
    write_json(dir / "reports" / (p.image_id + ".json"), rep);
    image_preds.push_back(ip.verdict);
    image_scores.push_back(ip.corroded_count);
    tile_preds.insert(tile_preds.end(), p.verdicts.begin(), p.verdicts.end());
    tile_scores.insert(tile_scores.end(), p.probs.begin(), p.probs.end());
  }
  const auto image_cc = metrics::confusion(image_preds, sp.image_labels);
  const auto tile_cc = metrics::confusion(tile_preds, sp.tile_labels);
  json result{{"c", c},
              {"split", dataset::to_string(split)},
              {"image", report::rates_json(image_cc)},
              {"tile", report::rates_json(tile_cc)}};
  auto add_roc = [&](const char* key, const char* file, std::span<const double> scores, std::span<const int> labels) {
    try {
      const auto curve = metrics::roc(scores, labels);
      result[key] = curve.auc;
      dataset::write_text(dir / file, metrics::roc_csv(curve));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::SingleClass) throw;
      result[key] = nullptr;
    }
  };
  add_roc("tile_auc", "roc_tiles.csv", tile_scores, sp.tile_labels);
  add_roc("image_auc", "roc_images.csv", image_scores, sp.image_labels);
  write_json(dir / "metrics.json", result);
  const auto table = metrics::format_table({{"image", image_cc}, {"tile", tile_cc}});
  dataset::write_text(dir / "metrics.txt", table);
  out << table;
  return kExitOk;
}

inline int cmd_heatmap(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  const Image img = load_image(required_path(s, "image"));
  const json rep = json::parse(dataset::read_text(required_path(s, "report")));
  const auto preds = report::predictions_from_report(rep);
  const int tile = rep.at("tile_size").get<int>();
  const fs::path dest = fs::path(s.str("out")) / "heatmaps" / (img.id() + ".png");
  write_file_bytes(dest, heatmap_png(img, preds, tile, s.real("alpha")));
  out << "heatmap: wrote " << dest.string() << "\n";
  return kExitOk;
}

inline int cmd_serve(const Invocation& inv, std::ostream& out) {
  const auto& s = inv.settings;
  std::optional<service::ModelHandle> handle;
  if (const auto mp = s.opt("model")) handle = service::ModelHandle::from(Predictor(model::load_checkpoint<float>(*mp)));
  service::ServiceOptions opt;
  opt.store_dir = fs::path(s.str("out")) / "store";
  opt.default_c = resolve_c(inv);
  opt.inference_workers = std::max(1, s.integer("workers"));
  opt.model_path = s.str("model");
  service::Service svc(std::move(handle), opt);
  httplib::Server server;
  server.new_task_queue = [&] { return new httplib::ThreadPool(std::max(2, s.integer("workers") + 1)); };
  service::mount(server, svc, s.str("static"));
  const auto host = s.str("host");
  const int port = s.integer("port");
  out << "serve: listening on http://" << host << ":" << port << "\n" << std::flush;
  if (!server.listen(host, port)) fail(ErrorCode::IoFailure, "cannot bind " + host + ":" + std::to_string(port));
  return kExitOk;
}

// ---------------------------------------------------------------------------

/// Parses argv into the resolved settings of one subcommand.
/// Throws CLI::ParseError / UsageError on bad usage.
inline std::optional<Invocation> parse(std::vector<std::string> args, std::ostream& out) {
  CLI::App app{"Corrosion detection toolkit: synthesize, tile, split, train, tune, predict, evaluate, serve."};
  app.name("corrosion");
  const auto table = subcommand_keys();
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, std::map<std::string, bool>> flags;
  std::map<std::string, std::map<std::string, CLI::Option*>> opts;
  std::map<std::string, std::string> config_paths;
  std::map<std::string, CLI::App*> subs;

  for (const auto& [name, keys] : table) {
    auto* sub = app.add_subcommand(name, "");
    subs[name] = sub;
    for (const auto& k : keys) {
      const std::string flag = "--" + dashed(k.name);
      if (k.is_flag) opts[name][k.name] = sub->add_flag(flag, flags[name][k.name], k.help + " (default " + k.default_value + ")");
      else opts[name][k.name] = sub->add_option(flag, values[name][k.name], k.help + (k.default_value.empty() ? "" : " (default " + k.default_value + ")"));
    }
    sub->add_option("--config", config_paths[name], "key = value settings file; flags override it");
  }
  subs["synth"]->description("generate a labeled synthetic surface dataset");
  subs["tile"]->description("cut images into a tile manifest");
  subs["split"]->description("grouped train/val/test split of a manifest");
  subs["lrfind"]->description("learning-rate range test");
  subs["train"]->description("train the tile classifier");
  subs["tune"]->description("choose the image threshold on the validation split");
  subs["predict"]->description("image reports (and heatmaps) for new images");
  subs["evaluate"]->description("image- and tile-level metrics on a split");
  subs["heatmap"]->description("render a report's tile verdicts over its image");
  subs["serve"]->description("HTTP service for the operator console");
  app.require_subcommand(0, 1);

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    const auto chosen = app.get_subcommands();
    out << (chosen.empty() ? app.help() : chosen.front()->help());
    throw HelpShown{};
  }

  const auto chosen = app.get_subcommands();
  if (chosen.empty()) {
    out << app.help();
    return std::nullopt;
  }
  const std::string name = chosen.front()->get_name();
  Invocation inv;
  inv.command = name;
  config::KeyValues defaults;
  for (const auto& k : table.at(name)) defaults[k.name] = k.default_value;
  inv.settings = config::Settings(defaults);
  if (!config_paths[name].empty()) {
    const auto file = config::load(config_paths[name]);
    for (const auto& key : inv.settings.overlay(file)) {
      if (!known_anywhere(key)) throw UsageError("unknown setting '" + key + "' in " + config_paths[name]);
    }
    for (const auto& [k, v] : file)
      if (defaults.count(config::normalize_key(k))) inv.explicit_keys[config::normalize_key(k)] = true;
  }
  for (const auto& k : table.at(name)) {
    const auto* o = opts[name][k.name];
    if (o->count() == 0) continue;
    inv.settings.set(k.name, k.is_flag ? (flags[name][k.name] ? "true" : "false") : values[name][k.name]);
    inv.explicit_keys[k.name] = true;
  }
  // values must keep the type of their default
  for (const auto& k : table.at(name)) {
    const auto& v = inv.settings.str(k.name);
    if (k.is_flag) {
      try {
        inv.settings.flag(k.name);
      } catch (const Error&) {
        throw UsageError("--" + dashed(k.name) + " expects true or false, got '" + v + "'");
      }
    } else if (is_number(k.default_value) && !is_number(v)) {
      throw UsageError("--" + dashed(k.name) + " expects a number, got '" + v + "'");
    }
  }
  return inv;
}

inline int dispatch(const Invocation& inv, std::ostream& out) {
  const fs::path dir = inv.settings.str("out");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot create " + dir.string());
  dataset::write_text(dir / (inv.command + ".config"), config::dump(inv.settings.values()));
  if (inv.command == "synth") return cmd_synth(inv, out);
  if (inv.command == "tile") return cmd_tile(inv, out);
  if (inv.command == "split") return cmd_split(inv, out);
  if (inv.command == "lrfind") return cmd_lrfind(inv, out);
  if (inv.command == "train") return cmd_train(inv, out);
  if (inv.command == "tune") return cmd_tune(inv, out);
  if (inv.command == "predict") return cmd_predict(inv, out);
  if (inv.command == "evaluate") return cmd_evaluate(inv, out);
  if (inv.command == "heatmap") return cmd_heatmap(inv, out);
  if (inv.command == "serve") return cmd_serve(inv, out);
  throw UsageError("unknown subcommand " + inv.command);
}

/// Entry point. args excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::optional<Invocation> inv;
  try {
    inv = parse(args, out);
    if (!inv) {
      err << error_line("usage", "a subcommand is required") << "\n";
      return kExitUsage;
    }
  } catch (const HelpShown&) {
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << error_line("usage", e.what()) << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << error_line("usage", e.what()) << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << error_line(to_string(e.code()), e.what()) << "\n";
    return kExitUsage;
  }
  try {
    return dispatch(*inv, out);
  } catch (const UsageError& e) {
    err << error_line("usage", e.what()) << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << error_line(to_string(e.code()), e.what()) << "\n";
    return kExitRuntime;
  } catch (const json::exception& e) {
    err << error_line("BadJson", e.what()) << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << error_line("Internal", e.what()) << "\n";
    return kExitRuntime;
  }
}

}  // namespace corrosion::cli
