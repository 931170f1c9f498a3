#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "corrosion/aggregate.hpp"
#include "corrosion/dataset.hpp"
#include "corrosion/error.hpp"
#include "corrosion/image.hpp"
#include "corrosion/image_io.hpp"
#include "corrosion/model.hpp"
#include "corrosion/parallel.hpp"
#include "corrosion/tiling.hpp"
#include "corrosion/trainer.hpp"

namespace corrosion {

/// Read-only inference wrapper: tiles -> standardized batches -> corrosion probabilities.
class Predictor {
 public:
  explicit Predictor(model::ModelParams<float> params, int batch_size = 32)
      : params_(std::move(params)), batch_size_(std::max(1, batch_size)) {}

  const model::ModelParams<float>& params() const noexcept { return params_; }
  int tile_size() const noexcept { return params_.arch.input_size; }
  TilingSpec tiling() const { return TilingSpec::non_overlapping(tile_size()); }

  std::vector<double> predict_tiles(std::span<const Image* const> tiles) const {
    std::vector<double> probs;
    probs.reserve(tiles.size());
    for (std::size_t start = 0; start < tiles.size(); start += batch_size_) {
      const std::size_t end = std::min(tiles.size(), start + static_cast<std::size_t>(batch_size_));
      const auto batch = model::make_batch<float>(tiles.subspan(start, end - start), {}, params_.input_stats);
      const auto logits = model::forward(params_, batch, model::Mode::eval);
      const auto p = model::corrosion_probability<float>(logits);
      probs.insert(probs.end(), p.begin(), p.end());
    }
    return probs;
  }

  aggregate::TilePredictions predict_grid(const TileGrid& grid) const {
    std::vector<const Image*> ptrs;
    for (const auto& t : grid.tiles) ptrs.push_back(&t.pixels);
    return aggregate::TilePredictions::from_probs(grid.image_id, grid.rows, grid.cols, predict_tiles(ptrs));
  }

  aggregate::TilePredictions predict_image(const Image& image) const { return predict_grid(tile_image(image, tiling())); }

 private:
  model::ModelParams<float> params_;
  int batch_size_;
};

/// Tiles of one split, loaded from the manifest directory, in manifest order.
inline std::vector<train::TileSample> load_samples(const dataset::DatasetManifest& m, const std::filesystem::path& root,
                                                   dataset::Split split, int workers = 1) {
  const auto recs = m.tiles_in(split);
  std::vector<train::TileSample> out(recs.size());
  parallel_for(recs.size(), workers, [&](std::size_t i) {
    out[i].pixels = load_image(root / recs[i]->path);
    out[i].label = recs[i]->label;
  });
  return out;
}

struct ImageTiles {
  std::string image_id;
  int image_label = 0;
  int rows = 0, cols = 0;
  std::vector<const dataset::TileRecord*> tiles;  // row-major
};

/// Groups a split's tile records by image, preserving image-table order.
inline std::vector<ImageTiles> group_by_image(const dataset::DatasetManifest& m, dataset::Split split) {
  std::vector<ImageTiles> out;
  std::map<std::string, std::size_t> index;
  for (const auto* img : m.images_in(split)) {
    index[img->image_id] = out.size();
    out.push_back({img->image_id, img->image_label, 0, 0, {}});
  }
  for (const auto* e : m.tiles_in(split)) {
    auto& g = out[index.at(e->image_id)];
    g.tiles.push_back(e);
    g.rows = std::max(g.rows, e->row + 1);
    g.cols = std::max(g.cols, e->col + 1);
  }
  for (auto& g : out) {
    std::sort(g.tiles.begin(), g.tiles.end(), [](const auto* a, const auto* b) {
      return a->row != b->row ? a->row < b->row : a->col < b->col;
    });
  }
  return out;
}

struct SplitPredictions {
  std::vector<aggregate::TilePredictions> images;
  std::vector<int> image_labels;
  std::vector<int> tile_labels;  // flattened in image order
};

/// Runs the predictor over every image of a split. Images without tiles are skipped.
inline SplitPredictions predict_split(const Predictor& predictor, const dataset::DatasetManifest& m,
                                      const std::filesystem::path& root, dataset::Split split, int workers = 1) {
  SplitPredictions out;
  for (const auto& g : group_by_image(m, split)) {
    if (g.tiles.empty()) continue;
    std::vector<Image> tiles(g.tiles.size());
    parallel_for(tiles.size(), workers, [&](std::size_t i) { tiles[i] = load_image(root / g.tiles[i]->path); });
    std::vector<const Image*> ptrs;
    for (const auto& t : tiles) ptrs.push_back(&t);
    out.images.push_back(
        aggregate::TilePredictions::from_probs(g.image_id, g.rows, g.cols, predictor.predict_tiles(ptrs)));
    out.image_labels.push_back(g.image_label);
    for (const auto* t : g.tiles) out.tile_labels.push_back(t->label);
  }
  return out;
}

}  // namespace corrosion
