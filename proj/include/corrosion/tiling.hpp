#pragma once

#include <cstdio>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "corrosion/error.hpp"
#include "corrosion/image.hpp"

namespace corrosion {

enum class EdgePolicy { drop_partial };

struct TilingSpec {
  int tile_size = 256;
  int stride = 256;
  EdgePolicy edge_policy = EdgePolicy::drop_partial;

  static TilingSpec non_overlapping(int tile_size) { return {tile_size, tile_size, EdgePolicy::drop_partial}; }

  void validate() const {
    if (tile_size < 8) fail(ErrorCode::InvalidSpec, "tile_size must be >= 8");
    if (stride < 1 || stride > tile_size) fail(ErrorCode::InvalidSpec, "stride must lie in [1, tile_size]");
  }
};

/// Number of windows along an axis of the given length.
inline constexpr int window_count(int length, int tile_size, int stride) noexcept {
  return length >= tile_size ? (length - tile_size) / stride + 1 : 0;
}

struct Tile {
  int row = 0;
  int col = 0;
  Image pixels;
};

struct TileGrid {
  std::string image_id;
  int rows = 0;
  int cols = 0;
  TilingSpec spec;
  std::vector<Tile> tiles;  // row-major

  std::size_t size() const noexcept { return tiles.size(); }
  bool empty() const noexcept { return tiles.empty(); }
};

/// Row-major grid of tile_size windows anchored at multiples of stride.
/// Partial windows along the right and bottom edges are dropped.
inline TileGrid tile_image(const Image& image, const TilingSpec& spec) {
  spec.validate();
  TileGrid grid;
  grid.image_id = image.id();
  grid.spec = spec;
  grid.rows = window_count(image.height(), spec.tile_size, spec.stride);
  grid.cols = window_count(image.width(), spec.tile_size, spec.stride);
  if (grid.rows == 0 || grid.cols == 0) {
    grid.rows = grid.cols = 0;
    return grid;
  }
  grid.tiles.reserve(static_cast<std::size_t>(grid.rows) * grid.cols);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      Image px = image.crop(r * spec.stride, c * spec.stride, spec.tile_size, spec.tile_size);
      grid.tiles.push_back({r, c, std::move(px)});
    }
  }
  return grid;
}

/// Reassembles a complete non-overlapping grid into the covered crop of its source.
inline Image stitch(const TileGrid& grid) {
  const int t = grid.spec.tile_size;
  if (grid.spec.stride != t) fail(ErrorCode::OverlappingGridUnsupported, "stitching requires stride == tile_size");
  if (grid.rows < 1 || grid.cols < 1) fail(ErrorCode::IncompleteGrid, "grid has no tiles");

  std::vector<const Tile*> cells(static_cast<std::size_t>(grid.rows) * grid.cols, nullptr);
  for (const auto& tile : grid.tiles) {
    if (tile.row < 0 || tile.row >= grid.rows || tile.col < 0 || tile.col >= grid.cols)
      fail(ErrorCode::IncompleteGrid, "tile index outside grid");
    if (tile.pixels.width() != t || tile.pixels.height() != t)
      fail(ErrorCode::ShapeMismatch, "tile has wrong dimensions");
    cells[static_cast<std::size_t>(tile.row) * grid.cols + tile.col] = &tile;
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i] == nullptr) {
      fail(ErrorCode::IncompleteGrid, "missing tile (" + std::to_string(i / grid.cols) + "," +
                                          std::to_string(i % grid.cols) + ")");
    }
  }

  Image out(grid.cols * t, grid.rows * t, grid.image_id);
  for (const Tile* tile : cells) out.paste(tile->pixels, tile->row * t, tile->col * t);
  return out;
}

/// `{image_id}_r{row:03}_c{col:03}.png`
inline std::string tile_file_name(const std::string& image_id, int row, int col) {
  char suffix[32];
  std::snprintf(suffix, sizeof(suffix), "_r%03d_c%03d.png", row, col);
  return image_id + suffix;
}

}  // namespace corrosion
