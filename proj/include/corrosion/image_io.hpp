#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "corrosion/error.hpp"
#include "corrosion/image.hpp"

namespace corrosion {

namespace detail {

inline bool is_png(std::span<const std::uint8_t> b) {
  static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  return b.size() >= 8 && std::equal(sig, sig + 8, b.begin());
}

inline bool is_jpeg(std::span<const std::uint8_t> b) {
  return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF;
}

// libjpeg happily returns a partially decoded raster for a truncated stream,
// so completeness is checked on the container before decoding.
inline bool has_png_trailer(std::span<const std::uint8_t> b) {
  if (b.size() < 12) return false;
  const auto* tail = b.data() + b.size() - 12;
  return tail[4] == 'I' && tail[5] == 'E' && tail[6] == 'N' && tail[7] == 'D';
}

inline bool has_jpeg_trailer(std::span<const std::uint8_t> b) {
  std::size_t end = b.size();
  while (end > 2 && b[end - 1] == 0x00) --end;
  return end >= 4 && b[end - 2] == 0xFF && b[end - 1] == 0xD9;
}

}  // namespace detail

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::UnreadableFile, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoFailure, "short write to " + path.string());
}

/// Decodes an in-memory PNG or JPEG into an RGB image. Grayscale is expanded
/// to three identical channels and alpha is discarded.
inline Image decode_image(std::span<const std::uint8_t> bytes, std::string id = {}) {
  const bool png = detail::is_png(bytes);
  const bool jpeg = detail::is_jpeg(bytes);
  if (!png && !jpeg) fail(ErrorCode::UnsupportedFormat, "not a PNG or JPEG stream");
  if ((png && !detail::has_png_trailer(bytes)) || (jpeg && !detail::has_jpeg_trailer(bytes)))
    fail(ErrorCode::UnreadableFile, "truncated image stream");

  const cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat decoded = cv::imdecode(raw, cv::IMREAD_UNCHANGED);
  if (decoded.empty()) fail(ErrorCode::UnreadableFile, "image stream failed to decode");
  if (decoded.depth() != CV_8U) fail(ErrorCode::UnsupportedFormat, "only 8-bit rasters are supported");
  if (decoded.cols < 1 || decoded.rows < 1) fail(ErrorCode::ZeroDimension, "decoded image is empty");

  cv::Mat rgb;
  switch (decoded.channels()) {
    case 1: cv::cvtColor(decoded, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(decoded, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(decoded, rgb, cv::COLOR_BGRA2RGB); break;
    default: fail(ErrorCode::UnsupportedFormat, "unexpected channel count");
  }
  if (!rgb.isContinuous()) rgb = rgb.clone();
  std::vector<std::uint8_t> pixels(rgb.data, rgb.data + rgb.total() * 3);
  return Image(rgb.cols, rgb.rows, std::move(pixels), std::move(id));
}

inline Image load_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Image img = decode_image(bytes, path.stem().string());
  img.set_source_path(path.string());
  return img;
}

/// PNG encoding with pinned settings so identical rasters give identical bytes.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
  cv::Mat rgb(img.height(), img.width(), CV_8UC3, const_cast<std::uint8_t*>(img.pixels().data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> out;
  const std::vector<int> params = {cv::IMWRITE_PNG_COMPRESSION, 6, cv::IMWRITE_PNG_STRATEGY,
                                   cv::IMWRITE_PNG_STRATEGY_DEFAULT};
  if (!cv::imencode(".png", bgr, out, params)) fail(ErrorCode::IoFailure, "PNG encoding failed");
  return out;
}

/// Single-channel PNG, used for defect masks (0 or 255 per pixel).
inline std::vector<std::uint8_t> encode_gray_png(int width, int height, std::span<const std::uint8_t> values) {
  cv::Mat gray(height, width, CV_8UC1, const_cast<std::uint8_t*>(values.data()));
  std::vector<std::uint8_t> out;
  const std::vector<int> params = {cv::IMWRITE_PNG_COMPRESSION, 6};
  if (!cv::imencode(".png", gray, out, params)) fail(ErrorCode::IoFailure, "PNG encoding failed");
  return out;
}

inline std::vector<std::uint8_t> encode_jpeg(const Image& img, int quality = 95) {
  cv::Mat rgb(img.height(), img.width(), CV_8UC3, const_cast<std::uint8_t*>(img.pixels().data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".jpg", bgr, out, {cv::IMWRITE_JPEG_QUALITY, quality}))
    fail(ErrorCode::IoFailure, "JPEG encoding failed");
  return out;
}

inline void save_png(const Image& img, const std::filesystem::path& path) { write_file_bytes(path, encode_png(img)); }

}  // namespace corrosion
