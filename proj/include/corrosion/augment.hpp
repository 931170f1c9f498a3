#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "corrosion/error.hpp"
#include "corrosion/image.hpp"
#include "corrosion/rng.hpp"

namespace corrosion {

struct AugmentConfig {
  double max_rotation = 10.0;  // degrees
  bool allow_flips = true;
  double color_shift = 0.05;   // fraction of full scale, per channel
  double zoom_min = 1.0;
  double zoom_max = 1.1;
  double warp_magnitude = 0.1;
  bool enabled = true;

  static AugmentConfig disabled() {
    AugmentConfig cfg;
    cfg.enabled = false;
    return cfg;
  }

  void validate() const {
    if (max_rotation < 0 || color_shift < 0 || warp_magnitude < 0 || zoom_min <= 0)
      fail(ErrorCode::InvalidSpec, "augmentation magnitudes must be non-negative");
    if (zoom_min > zoom_max) fail(ErrorCode::InvalidSpec, "zoom_min must not exceed zoom_max");
  }
};

/// One concrete draw of the transform family.
struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;
  double zoom = 1.0;
  double warp_x = 0.0;
  double warp_y = 0.0;
  std::array<double, 3> color_offset{};  // in 8-bit units

  bool geometric_identity() const { return angle_deg == 0.0 && zoom == 1.0 && warp_x == 0.0 && warp_y == 0.0; }
};

/// Always consumes the same number of variates so streams stay aligned
/// whatever the config enables.
inline AugmentParams draw_augment_params(const AugmentConfig& cfg, Rng& rng) {
  AugmentParams p;
  const double u_h = rng.uniform();
  const double u_v = rng.uniform();
  const double u_angle = rng.uniform(-1.0, 1.0);
  const double u_zoom = rng.uniform();
  const double u_wx = rng.uniform(-1.0, 1.0);
  const double u_wy = rng.uniform(-1.0, 1.0);
  std::array<double, 3> u_color{};
  for (auto& u : u_color) u = rng.uniform(-1.0, 1.0);

  p.hflip = cfg.allow_flips && u_h < 0.5;
  p.vflip = cfg.allow_flips && u_v < 0.5;
  p.angle_deg = cfg.max_rotation * u_angle;
  p.zoom = cfg.zoom_min + (cfg.zoom_max - cfg.zoom_min) * u_zoom;
  p.warp_x = cfg.warp_magnitude * u_wx;
  p.warp_y = cfg.warp_magnitude * u_wy;
  for (int c = 0; c < 3; ++c) p.color_offset[c] = cfg.color_shift * 255.0 * u_color[c];
  return p;
}

namespace detail {

inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

inline std::uint8_t clamp_u8(double v) {
  const double r = std::round(v);
  return static_cast<std::uint8_t>(r < 0.0 ? 0.0 : (r > 255.0 ? 255.0 : r));
}

}  // namespace detail

/// Applies flips, rotation, zoom and a symmetric perspective warp (bilinear,
/// reflect-101 borders), then the per-channel color offset.
inline Image apply_augment(const Image& tile, const AugmentParams& p) {
  const int w = tile.width();
  const int h = tile.height();
  Image out(w, h, tile.id());

  if (p.geometric_identity()) {
    for (int r = 0; r < h; ++r) {
      const int sr = p.vflip ? h - 1 - r : r;
      for (int c = 0; c < w; ++c) {
        const int sc = p.hflip ? w - 1 - c : c;
        for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = tile.at(sr, sc, ch);
      }
    }
  } else {
    const double cx = 0.5 * (w - 1);
    const double cy = 0.5 * (h - 1);
    const double half_x = std::max(cx, 1.0);
    const double half_y = std::max(cy, 1.0);
    const double theta = p.angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        // inverse map: output -> source
        const double dx = c - cx, dy = r - cy;
        double qx = (cs * dx + sn * dy) / p.zoom;
        double qy = (-sn * dx + cs * dy) / p.zoom;
        const double denom = 1.0 + p.warp_x * (qx / half_x) + p.warp_y * (qy / half_y);
        qx /= denom;
        qy /= denom;
        double sx = qx + cx, sy = qy + cy;
        if (p.hflip) sx = (w - 1) - sx;
        if (p.vflip) sy = (h - 1) - sy;

        const double fx = std::floor(sx), fy = std::floor(sy);
        const double ax = sx - fx, ay = sy - fy;
        const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        const int xa = detail::reflect101(x0, w), xb = detail::reflect101(x0 + 1, w);
        const int ya = detail::reflect101(y0, h), yb = detail::reflect101(y0 + 1, h);
        for (int ch = 0; ch < 3; ++ch) {
          const double v = (1 - ay) * ((1 - ax) * tile.at(ya, xa, ch) + ax * tile.at(ya, xb, ch)) +
                           ay * ((1 - ax) * tile.at(yb, xa, ch) + ax * tile.at(yb, xb, ch));
          out.at(r, c, ch) = detail::clamp_u8(v);
        }
      }
    }
  }

  if (p.color_offset != std::array<double, 3>{}) {
    auto px = out.pixels();
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = detail::clamp_u8(px[i] + p.color_offset[i % 3]);
  }
  return out;
}

inline Image augment(const Image& tile, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return tile;
  cfg.validate();
  return apply_augment(tile, draw_augment_params(cfg, rng));
}

}  // namespace corrosion
