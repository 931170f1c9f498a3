#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corrosion/error.hpp"

namespace corrosion {

/// Owned H x W x 3 raster, row-major, interleaved RGB, 8 bits per sample.
class Image {
 public:
  static constexpr int kChannels = 3;

  Image() = default;

  Image(int width, int height, std::string id = {})
      : id_(std::move(id)), width_(width), height_(height) {
    if (width < 1 || height < 1) fail(ErrorCode::ZeroDimension, "image dimensions must be positive");
    pixels_.assign(static_cast<std::size_t>(width) * height * kChannels, 0);
  }

  Image(int width, int height, std::vector<std::uint8_t> pixels, std::string id = {})
      : id_(std::move(id)), width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width < 1 || height < 1) fail(ErrorCode::ZeroDimension, "image dimensions must be positive");
    if (pixels_.size() != static_cast<std::size_t>(width) * height * kChannels)
      fail(ErrorCode::LengthMismatch, "pixel buffer does not match dimensions");
  }

  const std::string& id() const noexcept { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }
  const std::optional<std::string>& source_path() const noexcept { return source_path_; }
  void set_source_path(std::string path) { source_path_ = std::move(path); }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return pixels_.empty(); }

  std::span<const std::uint8_t> pixels() const noexcept { return pixels_; }
  std::span<std::uint8_t> pixels() noexcept { return pixels_; }

  std::size_t offset(int row, int col) const noexcept {
    return (static_cast<std::size_t>(row) * width_ + col) * kChannels;
  }

  std::uint8_t at(int row, int col, int ch) const noexcept { return pixels_[offset(row, col) + ch]; }
  std::uint8_t& at(int row, int col, int ch) noexcept { return pixels_[offset(row, col) + ch]; }

  /// Copy of the window [row0, row0+h) x [col0, col0+w); the window must lie inside.
  Image crop(int row0, int col0, int w, int h) const {
    Image out(w, h);
    const std::size_t row_bytes = static_cast<std::size_t>(w) * kChannels;
    for (int r = 0; r < h; ++r) {
      const auto* src = pixels_.data() + offset(row0 + r, col0);
      std::copy(src, src + row_bytes, out.pixels_.data() + out.offset(r, 0));
    }
    return out;
  }

  void paste(const Image& src, int row0, int col0) {
    const std::size_t row_bytes = static_cast<std::size_t>(src.width()) * kChannels;
    for (int r = 0; r < src.height(); ++r) {
      const auto* from = src.pixels_.data() + src.offset(r, 0);
      std::copy(from, from + row_bytes, pixels_.data() + offset(row0 + r, col0));
    }
  }

  /// Pixel equality only; identity and provenance are ignored.
  friend bool same_pixels(const Image& a, const Image& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.pixels_ == b.pixels_;
  }

 private:
  std::string id_;
  std::optional<std::string> source_path_;
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

struct Rgba {
  std::uint8_t r = 0, g = 0, b = 0, a = 255;
};

}  // namespace corrosion
