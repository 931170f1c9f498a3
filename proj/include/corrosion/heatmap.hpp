#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "corrosion/error.hpp"
#include "corrosion/image.hpp"
#include "corrosion/tiling.hpp"

namespace corrosion {

struct HeatmapPalette {
  Rgba corroded_color{255, 255, 0, 255};  // yellow
  Rgba intact_color{0, 255, 0, 255};      // green
  double blend_alpha = 0.35;

  void validate() const {
    if (!(blend_alpha >= 0.0 && blend_alpha <= 1.0)) fail(ErrorCode::InvalidSpec, "blend_alpha must lie in [0,1]");
  }
};

inline std::uint8_t blend_channel(std::uint8_t src, std::uint8_t color, double alpha) {
  return static_cast<std::uint8_t>(std::lround((1.0 - alpha) * src + alpha * color));
}

/// Tints every tile window with its verdict color. Only the grid geometry is
/// taken from `rows`/`cols`/`spec`; pixels outside the tiled area are copied.
inline Image render_heatmap(const Image& image, int rows, int cols, const TilingSpec& spec,
                            std::span<const int> verdicts, const HeatmapPalette& palette) {
  palette.validate();
  if (verdicts.size() != static_cast<std::size_t>(rows) * cols)
    fail(ErrorCode::LengthMismatch, "verdict count does not match grid size");
  Image out = image;
  const double a = palette.blend_alpha;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const Rgba& color = verdicts[static_cast<std::size_t>(r) * cols + c] ? palette.corroded_color
                                                                             : palette.intact_color;
      const std::uint8_t rgb[3] = {color.r, color.g, color.b};
      const int y0 = r * spec.stride, x0 = c * spec.stride;
      for (int y = y0; y < y0 + spec.tile_size; ++y) {
        for (int x = x0; x < x0 + spec.tile_size; ++x) {
          for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = blend_channel(image.at(y, x, ch), rgb[ch], a);
        }
      }
    }
  }
  return out;
}

inline Image render_heatmap(const Image& image, const TileGrid& grid, std::span<const int> verdicts,
                            const HeatmapPalette& palette) {
  return render_heatmap(image, grid.rows, grid.cols, grid.spec, verdicts, palette);
}

}  // namespace corrosion
