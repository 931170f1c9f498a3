#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "corrosion/dataset.hpp"
#include "corrosion/error.hpp"
#include "corrosion/image.hpp"
#include "corrosion/image_io.hpp"
#include "corrosion/parallel.hpp"
#include "corrosion/rng.hpp"
#include "corrosion/tiling.hpp"

namespace corrosion::synth {

enum class BaseTexture { brushed_metal };

struct DefectMix {
  double discoloration_blotch = 0.4;
  double pit_cluster = 0.3;
  double crack_polyline = 0.3;
};

struct ConfounderMix {
  double scratch_line = 0.6;
  double shadow_gradient = 0.4;
};

struct CountRange {
  int min = 0;
  int max = 0;
};

struct SurfaceSpec {
  int width = 768;
  int height = 512;
  BaseTexture base_texture = BaseTexture::brushed_metal;
  DefectMix defect_mix;
  ConfounderMix confounder_mix;
  CountRange defect_count{1, 3};
  CountRange confounder_count{0, 3};

  void validate() const {
    if (width < 1 || height < 1) fail(ErrorCode::InvalidSpec, "surface dimensions must be positive");
    const std::array<double, 3> d{defect_mix.discoloration_blotch, defect_mix.pit_cluster, defect_mix.crack_polyline};
    const std::array<double, 2> c{confounder_mix.scratch_line, confounder_mix.shadow_gradient};
    double ds = 0, cs = 0;
    for (double v : d) {
      if (v < 0) fail(ErrorCode::InvalidSpec, "defect probabilities must be non-negative");
      ds += v;
    }
    for (double v : c) {
      if (v < 0) fail(ErrorCode::InvalidSpec, "confounder probabilities must be non-negative");
      cs += v;
    }
    if (std::abs(ds - 1.0) > 1e-9 || std::abs(cs - 1.0) > 1e-9)
      fail(ErrorCode::InvalidSpec, "each mix must sum to 1");
    for (const auto& r : {defect_count, confounder_count})
      if (r.min < 0 || r.min > r.max) fail(ErrorCode::InvalidSpec, "count ranges must satisfy 0 <= min <= max");
  }
};

/// 1 = corrosion pixel. Confounders never set bits.
struct DefectMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  DefectMask() = default;
  DefectMask(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  void set(int r, int c) { values[static_cast<std::size_t>(r) * width + c] = 1; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1)); }
};

struct Surface {
  Image image;
  DefectMask mask;
  int defects = 0;
  int confounders = 0;
};

namespace detail {

/// Floating-point RGB canvas the generator paints on.
struct Canvas {
  int w, h;
  std::vector<float> px;  // RGB interleaved
  Canvas(int w_, int h_) : w(w_), h(h_), px(static_cast<std::size_t>(w_) * h_ * 3, 0.f) {}
  float* at(int r, int c) { return px.data() + (static_cast<std::size_t>(r) * w + c) * 3; }

  void blend(int r, int c, const std::array<float, 3>& color, float alpha) {
    if (r < 0 || r >= h || c < 0 || c >= w || alpha <= 0.f) return;
    float* p = at(r, c);
    for (int k = 0; k < 3; ++k) p[k] = (1.f - alpha) * p[k] + alpha * color[k];
  }
};

inline void box_blur_rows(std::vector<float>& f, int w, int h, int radius) {
  std::vector<float> row(w);
  for (int r = 0; r < h; ++r) {
    float* v = f.data() + static_cast<std::size_t>(r) * w;
    double acc = 0;
    int n = 0;
    for (int c = 0; c < std::min(radius, w); ++c) acc += v[c], ++n;
    for (int c = 0; c < w; ++c) {
      if (c + radius < w) acc += v[c + radius], ++n;
      if (c - radius - 1 >= 0) acc -= v[c - radius - 1], --n;
      row[c] = static_cast<float>(acc / n);
    }
    std::copy(row.begin(), row.end(), v);
  }
}

/// Coarse random lattice, bilinearly interpolated.
inline std::vector<float> value_noise(int w, int h, int cell, Rng& rng) {
  const int gw = w / cell + 2, gh = h / cell + 2;
  std::vector<float> grid(static_cast<std::size_t>(gw) * gh);
  for (auto& g : grid) g = static_cast<float>(rng.normal());
  std::vector<float> out(static_cast<std::size_t>(w) * h);
  for (int r = 0; r < h; ++r) {
    const double gy = static_cast<double>(r) / cell;
    const int y0 = static_cast<int>(gy);
    const double ty = gy - y0;
    for (int c = 0; c < w; ++c) {
      const double gx = static_cast<double>(c) / cell;
      const int x0 = static_cast<int>(gx);
      const double tx = gx - x0;
      auto g = [&](int y, int x) { return grid[static_cast<std::size_t>(y) * gw + x]; };
      const double sx = tx * tx * (3 - 2 * tx), sy = ty * ty * (3 - 2 * ty);
      out[static_cast<std::size_t>(r) * w + c] = static_cast<float>(
          (1 - sy) * ((1 - sx) * g(y0, x0) + sx * g(y0, x0 + 1)) + sy * ((1 - sx) * g(y0 + 1, x0) + sx * g(y0 + 1, x0 + 1)));
    }
  }
  return out;
}

/// Directional band-limited noise: white noise smeared along the brushing axis.
inline void paint_brushed_metal(Canvas& cv, Rng& rng) {
  const int w = cv.w, h = cv.h;
  const float base = static_cast<float>(rng.uniform(120.0, 175.0));
  const std::array<float, 3> tint{0.f, static_cast<float>(rng.uniform(0, 3)), static_cast<float>(rng.uniform(3, 8))};
  const bool vertical = rng.bernoulli(0.3);

  const int bw = vertical ? h : w, bh = vertical ? w : h;
  std::vector<float> streak(static_cast<std::size_t>(bw) * bh);
  for (auto& v : streak) v = static_cast<float>(rng.normal());
  box_blur_rows(streak, bw, bh, 24);
  std::vector<float> line_offset(bh);
  for (auto& v : line_offset) v = static_cast<float>(rng.normal(0.0, 2.5));
  const auto low = value_noise(w, h, 128, rng);
  const float streak_gain = static_cast<float>(rng.uniform(25.0, 45.0));

  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int br = vertical ? c : r, bc = vertical ? r : c;
      const float s = streak[static_cast<std::size_t>(br) * bw + bc] * streak_gain + line_offset[br];
      const float lum = base + s + 6.f * low[static_cast<std::size_t>(r) * w + c] +
                        static_cast<float>(rng.normal(0.0, 1.5));
      float* p = cv.at(r, c);
      for (int k = 0; k < 3; ++k) p[k] = lum + tint[k];
    }
  }
}

inline std::array<float, 3> rust_color(Rng& rng) {
  return {static_cast<float>(rng.uniform(135, 185)), static_cast<float>(rng.uniform(65, 100)),
          static_cast<float>(rng.uniform(25, 55))};
}

/// Reddish-brown soft blob with an irregular boundary.
inline void paint_discoloration(Canvas& cv, DefectMask& mask, Rng& rng) {
  const double cx = rng.uniform(0, cv.w), cy = rng.uniform(0, cv.h);
  const double ra = rng.uniform(22, 70), rb = ra * rng.uniform(0.5, 1.0);
  const double rot = rng.uniform(0, std::numbers::pi);
  const double k1 = static_cast<double>(rng.uniform_int(2, 5)), k2 = static_cast<double>(rng.uniform_int(5, 9));
  const double p1 = rng.uniform(0, 6.3), p2 = rng.uniform(0, 6.3);
  const float strength = static_cast<float>(rng.uniform(0.6, 0.9));
  const auto color = rust_color(rng);
  const double reach = ra * 1.5;
  const double cs = std::cos(rot), sn = std::sin(rot);
  for (int r = std::max(0, static_cast<int>(cy - reach)); r < std::min(cv.h, static_cast<int>(cy + reach) + 1); ++r) {
    for (int c = std::max(0, static_cast<int>(cx - reach)); c < std::min(cv.w, static_cast<int>(cx + reach) + 1); ++c) {
      const double dx = c - cx, dy = r - cy;
      const double u = (cs * dx + sn * dy) / ra, v = (-sn * dx + cs * dy) / rb;
      const double ang = std::atan2(v, u);
      const double wobble = 1.0 + 0.22 * std::sin(k1 * ang + p1) + 0.12 * std::sin(k2 * ang + p2);
      const double e = std::sqrt(u * u + v * v) / wobble;
      if (e >= 1.0) continue;
      const float alpha = strength * static_cast<float>(std::min(1.0, 1.6 * (1.0 - e * e)));
      const float mottle = static_cast<float>(1.0 + 0.08 * std::sin(0.35 * c + p1) * std::sin(0.29 * r + p2));
      cv.blend(r, c, {color[0] * mottle, color[1] * mottle, color[2] * mottle}, alpha);
      if (e < 0.85) mask.set(r, c);
    }
  }
}

/// Cluster of small dark ellipses.
inline void paint_pits(Canvas& cv, DefectMask& mask, Rng& rng) {
  const double cx = rng.uniform(0, cv.w), cy = rng.uniform(0, cv.h);
  const double spread = rng.uniform(15, 45);
  const int n = static_cast<int>(rng.uniform_int(8, 26));
  for (int i = 0; i < n; ++i) {
    const double px = cx + rng.normal(0, spread * 0.5), py = cy + rng.normal(0, spread * 0.5);
    const double a = rng.uniform(2.0, 5.5), b = a * rng.uniform(0.5, 1.0);
    const double rot = rng.uniform(0, std::numbers::pi);
    const std::array<float, 3> color{static_cast<float>(rng.uniform(40, 70)), static_cast<float>(rng.uniform(25, 40)),
                                     static_cast<float>(rng.uniform(15, 30))};
    const double cs = std::cos(rot), sn = std::sin(rot);
    for (int r = static_cast<int>(py - a - 2); r <= static_cast<int>(py + a + 2); ++r) {
      for (int c = static_cast<int>(px - a - 2); c <= static_cast<int>(px + a + 2); ++c) {
        if (r < 0 || r >= cv.h || c < 0 || c >= cv.w) continue;
        const double dx = c - px, dy = r - py;
        const double u = (cs * dx + sn * dy) / a, v = (-sn * dx + cs * dy) / b;
        const double e = u * u + v * v;
        if (e > 1.6) continue;
        if (e <= 1.0) {
          cv.blend(r, c, color, 0.9f);
          mask.set(r, c);
        } else {
          cv.blend(r, c, {150.f, 85.f, 45.f}, 0.35f);  // thin rust rim
        }
      }
    }
  }
}

inline void stamp_disk(Canvas& cv, DefectMask* mask, double x, double y, double radius,
                       const std::array<float, 3>& color, float alpha) {
  const int r0 = static_cast<int>(std::floor(y - radius)), r1 = static_cast<int>(std::ceil(y + radius));
  const int c0 = static_cast<int>(std::floor(x - radius)), c1 = static_cast<int>(std::ceil(x + radius));
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      if (r < 0 || r >= cv.h || c < 0 || c >= cv.w) continue;
      const double dx = c - x, dy = r - y;
      if (dx * dx + dy * dy > radius * radius) continue;
      cv.blend(r, c, color, alpha);
      if (mask) mask->set(r, c);
    }
  }
}

inline std::vector<std::pair<double, double>> random_walk(double x, double y, double heading, double length, Rng& rng) {
  constexpr double step = 3.0;
  constexpr double max_turn = 15.0 * std::numbers::pi / 180.0;
  std::vector<std::pair<double, double>> pts{{x, y}};
  for (double travelled = 0; travelled < length; travelled += step) {
    heading += rng.uniform(-max_turn, max_turn);
    x += step * std::cos(heading);
    y += step * std::sin(heading);
    pts.emplace_back(x, y);
  }
  return pts;
}

inline void paint_polyline(Canvas& cv, DefectMask* mask, const std::vector<std::pair<double, double>>& pts,
                           double width, const std::array<float, 3>& color, float alpha) {
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const auto [x0, y0] = pts[i];
    const auto [x1, y1] = pts[i + 1];
    const double len = std::hypot(x1 - x0, y1 - y0);
    const int n = std::max(1, static_cast<int>(std::ceil(len * 2)));
    for (int k = 0; k <= n; ++k) {
      const double t = static_cast<double>(k) / n;
      stamp_disk(cv, mask, x0 + t * (x1 - x0), y0 + t * (y1 - y0), width * 0.5, color, alpha);
    }
  }
}

/// Thin jittered random-walk crack, optionally branched and haloed.
inline void paint_crack(Canvas& cv, DefectMask& mask, Rng& rng) {
  const double length = rng.uniform(100, 1500);
  const double width = rng.uniform(1.0, 4.0);
  const bool halo = rng.bernoulli(0.5);
  const bool branch = rng.bernoulli(0.35);
  const double x = rng.uniform(0, cv.w), y = rng.uniform(0, cv.h);
  const double heading = rng.uniform(0, 2 * std::numbers::pi);
  const std::array<float, 3> dark{static_cast<float>(rng.uniform(25, 50)), static_cast<float>(rng.uniform(20, 40)),
                                  static_cast<float>(rng.uniform(18, 35))};
  std::vector<std::vector<std::pair<double, double>>> paths{random_walk(x, y, heading, length, rng)};
  if (branch) {
    const auto& main = paths.front();
    const auto at = main[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(main.size()) - 1))];
    const double bh = heading + (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.4, 1.2);
    paths.push_back(random_walk(at.first, at.second, bh, length * rng.uniform(0.2, 0.5), rng));
  }
  if (halo) {
    const auto rust = rust_color(rng);
    for (const auto& p : paths) paint_polyline(cv, &mask, p, width + 12.0, rust, 0.45f);
  }
  for (const auto& p : paths) paint_polyline(cv, &mask, p, width, dark, 0.9f);
}

/// Straight, high-contrast thin line. Not a defect.
inline void paint_scratch(Canvas& cv, Rng& rng) {
  const double length = rng.uniform(100, 900);
  const double width = rng.uniform(1.0, 2.5);
  const double x = rng.uniform(0, cv.w), y = rng.uniform(0, cv.h);
  const double heading = rng.uniform(0, 2 * std::numbers::pi);
  const bool bright = rng.bernoulli(0.6);
  const float g = static_cast<float>(bright ? rng.uniform(220, 250) : rng.uniform(55, 85));
  const std::vector<std::pair<double, double>> pts{{x, y}, {x + length * std::cos(heading), y + length * std::sin(heading)}};
  paint_polyline(cv, nullptr, pts, width, {g, g, g}, 0.85f);
}

/// Smooth low-frequency luminance multiplier. Not a defect.
inline void apply_shadow(Canvas& cv, Rng& rng) {
  const double depth = rng.uniform(0.25, 0.5);
  const double angle = rng.uniform(0, 2 * std::numbers::pi);
  const double nx = std::cos(angle), ny = std::sin(angle);
  const double diag = std::hypot(cv.w, cv.h);
  const double edge = rng.uniform(-0.3, 0.3) * diag;
  const double softness = rng.uniform(0.05, 0.25) * diag;
  const double cx = cv.w * 0.5, cy = cv.h * 0.5;
  for (int r = 0; r < cv.h; ++r) {
    for (int c = 0; c < cv.w; ++c) {
      const double d = ((c - cx) * nx + (r - cy) * ny - edge) / softness;
      const double s = 1.0 / (1.0 + std::exp(-d));  // 0 -> lit, 1 -> shadowed
      const float m = static_cast<float>(1.0 - depth * s);
      float* p = cv.at(r, c);
      for (int k = 0; k < 3; ++k) p[k] *= m;
    }
  }
}

}  // namespace detail

/// Deterministic in (spec, seed).
inline Surface generate_surface(const SurfaceSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, 0x5EED));
  detail::Canvas cv(spec.width, spec.height);
  Surface out;
  out.mask = DefectMask(spec.width, spec.height);

  detail::paint_brushed_metal(cv, rng);
  out.defects = static_cast<int>(rng.uniform_int(spec.defect_count.min, spec.defect_count.max));
  out.confounders = static_cast<int>(rng.uniform_int(spec.confounder_count.min, spec.confounder_count.max));
  const std::array<double, 3> dmix{spec.defect_mix.discoloration_blotch, spec.defect_mix.pit_cluster,
                                   spec.defect_mix.crack_polyline};
  const std::array<double, 2> cmix{spec.confounder_mix.scratch_line, spec.confounder_mix.shadow_gradient};

  std::vector<std::size_t> confounder_kinds(out.confounders);
  for (auto& k : confounder_kinds) k = rng.categorical(cmix);

  for (int i = 0; i < out.defects; ++i) {
    switch (rng.categorical(dmix)) {
      case 0: detail::paint_discoloration(cv, out.mask, rng); break;
      case 1: detail::paint_pits(cv, out.mask, rng); break;
      default: detail::paint_crack(cv, out.mask, rng); break;
    }
  }
  for (std::size_t k : confounder_kinds)
    if (k == 0) detail::paint_scratch(cv, rng);
  for (std::size_t k : confounder_kinds)
    if (k == 1) detail::apply_shadow(cv, rng);

  out.image = Image(spec.width, spec.height);
  auto px = out.image.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    const float v = std::round(cv.px[i]);
    px[i] = static_cast<std::uint8_t>(std::clamp(v, 0.f, 255.f));
  }
  return out;
}

/// Tile label = 1 iff its window holds at least `min_pixels` mask pixels.
inline std::vector<int> mask_to_labels(const DefectMask& mask, const TilingSpec& spec, std::size_t min_pixels) {
  spec.validate();
  const int rows = window_count(mask.height, spec.tile_size, spec.stride);
  const int cols = window_count(mask.width, spec.tile_size, spec.stride);
  if (rows == 0 || cols == 0) return {};
  // summed-area table
  const int w = mask.width, h = mask.height;
  std::vector<std::uint32_t> sat(static_cast<std::size_t>(w + 1) * (h + 1), 0);
  for (int r = 0; r < h; ++r) {
    std::uint32_t run = 0;
    for (int c = 0; c < w; ++c) {
      run += mask.at(r, c);
      sat[static_cast<std::size_t>(r + 1) * (w + 1) + c + 1] = sat[static_cast<std::size_t>(r) * (w + 1) + c + 1] + run;
    }
  }
  auto s = [&](int r, int c) { return sat[static_cast<std::size_t>(r) * (w + 1) + c]; };
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int y0 = r * spec.stride, x0 = c * spec.stride, t = spec.tile_size;
      const std::size_t n = s(y0 + t, x0 + t) - s(y0, x0 + t) - s(y0 + t, x0) + s(y0, x0);
      labels.push_back(n >= min_pixels ? 1 : 0);
    }
  }
  return labels;
}

struct DatasetOptions {
  TilingSpec tiling{};
  std::size_t min_pixels = 64;
  int workers = 1;
  bool write_files = true;
};

/// A corroded surface that yields no corroded tile is redrawn with a derived seed.
inline Surface generate_labeled(const SurfaceSpec& spec, bool corroded, std::uint64_t seed, const DatasetOptions& opt,
                                std::vector<int>& labels) {
  SurfaceSpec s = spec;
  if (corroded) {
    s.defect_count.min = std::max(1, s.defect_count.min);
    s.defect_count.max = std::max(s.defect_count.min, s.defect_count.max);
  } else {
    s.defect_count = {0, 0};
  }
  for (std::uint64_t attempt = 0;; ++attempt) {
    Surface surf = generate_surface(s, derive_seed(seed, attempt));
    labels = mask_to_labels(surf.mask, opt.tiling, opt.min_pixels);
    const bool any = std::any_of(labels.begin(), labels.end(), [](int v) { return v == 1; });
    if (!corroded || any || labels.empty() || attempt >= 64) return surf;
  }
}

inline std::string surface_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "surf_%04zu", index);
  return buf;
}

/// Generates n_corroded defect-bearing and n_intact defect-free surfaces,
/// writes images, masks and tiles under `out_dir`, and returns the manifest
/// (every image initially in the train split).
inline dataset::DatasetManifest generate_dataset(const SurfaceSpec& spec, int n_corroded, int n_intact,
                                                 std::uint64_t seed, const std::filesystem::path& out_dir,
                                                 const DatasetOptions& opt = {}) {
  spec.validate();
  if (n_corroded < 0 || n_intact < 0) fail(ErrorCode::InvalidSpec, "image counts must be non-negative");
  const std::size_t total = static_cast<std::size_t>(n_corroded) + n_intact;

  struct Generated {
    std::vector<int> labels;
    int rows = 0, cols = 0;
  };
  std::vector<Generated> results(total);
  if (opt.write_files) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    std::filesystem::create_directories(out_dir / "tiles", ec);
    if (ec) fail(ErrorCode::IoFailure, "cannot create " + out_dir.string());
  }

  parallel_for(total, opt.workers, [&](std::size_t i) {
    const bool corroded = i < static_cast<std::size_t>(n_corroded);
    const std::string id = surface_id(i);
    Generated& g = results[i];
    Surface surf = generate_labeled(spec, corroded, derive_seed(seed, i), opt, g.labels);
    surf.image.set_id(id);
    const TileGrid grid = tile_image(surf.image, opt.tiling);
    g.rows = grid.rows;
    g.cols = grid.cols;
    if (opt.write_files) {
      save_png(surf.image, out_dir / "images" / (id + ".png"));
      std::vector<std::uint8_t> mask_px(surf.mask.values.size());
      for (std::size_t k = 0; k < mask_px.size(); ++k) mask_px[k] = surf.mask.values[k] ? 255 : 0;
      write_file_bytes(out_dir / "images" / (id + ".mask.png"),
                       encode_gray_png(surf.mask.width, surf.mask.height, mask_px));
      for (const auto& tile : grid.tiles)
        save_png(tile.pixels, out_dir / "tiles" / tile_file_name(id, tile.row, tile.col));
    }
  });

  dataset::DatasetManifest manifest;
  for (std::size_t i = 0; i < total; ++i) {
    const std::string id = surface_id(i);
    const Generated& g = results[i];
    manifest.images.push_back({id, 0, 0, dataset::Split::train});
    for (int r = 0; r < g.rows; ++r) {
      for (int c = 0; c < g.cols; ++c) {
        dataset::TileRecord rec;
        rec.image_id = id;
        rec.row = r;
        rec.col = c;
        rec.label = g.labels[static_cast<std::size_t>(r) * g.cols + c];
        rec.split = dataset::Split::train;
        rec.path = "tiles/" + tile_file_name(id, r, c);
        manifest.entries.push_back(std::move(rec));
      }
    }
  }
  manifest.recompute();
  return manifest;
}

}  // namespace corrosion::synth
