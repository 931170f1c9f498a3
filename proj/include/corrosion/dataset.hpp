#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "corrosion/error.hpp"
#include "corrosion/rng.hpp"

namespace corrosion::dataset {

enum class Split { train, val, test };

inline constexpr std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  fail(ErrorCode::InvalidSpec, "unknown split '" + std::string(s) + "'");
}

struct TileRecord {
  std::string image_id;
  int row = 0;
  int col = 0;
  int label = 0;  // 1 = corroded
  Split split = Split::train;
  std::string path;

  friend bool operator==(const TileRecord&, const TileRecord&) = default;
};

struct ImageRecord {
  std::string image_id;
  int n_tiles = 0;
  int image_label = 0;
  Split split = Split::train;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetManifest {
  std::vector<TileRecord> entries;
  std::vector<ImageRecord> images;

  bool empty() const noexcept { return images.empty(); }

  /// Recomputes per-image tile counts and labels from the entries. Images
  /// present only in `entries` are appended in first-appearance order; every
  /// tile inherits its image's split.
  void recompute() {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < images.size(); ++i) {
      index[images[i].image_id] = i;
      images[i].n_tiles = 0;
      images[i].image_label = 0;
    }
    for (auto& e : entries) {
      auto it = index.find(e.image_id);
      if (it == index.end()) {
        it = index.emplace(e.image_id, images.size()).first;
        images.push_back({e.image_id, 0, 0, e.split});
      }
      ImageRecord& img = images[it->second];
      ++img.n_tiles;
      img.image_label = std::max(img.image_label, e.label);
      e.split = img.split;
    }
  }

  void validate() const {
    std::map<std::string, const ImageRecord*> by_id;
    for (const auto& img : images) {
      if (!by_id.emplace(img.image_id, &img).second) fail(ErrorCode::InvalidSpec, "duplicate image " + img.image_id);
    }
    std::set<std::tuple<std::string, int, int>> seen;
    std::map<std::string, std::pair<int, int>> tally;
    for (const auto& e : entries) {
      if (e.label != 0 && e.label != 1) fail(ErrorCode::InvalidSpec, "labels must be 0 or 1");
      if (!seen.emplace(e.image_id, e.row, e.col).second)
        fail(ErrorCode::InvalidSpec, "duplicate tile " + e.image_id);
      const auto it = by_id.find(e.image_id);
      if (it == by_id.end()) fail(ErrorCode::InvalidSpec, "tile references unknown image " + e.image_id);
      if (it->second->split != e.split) fail(ErrorCode::InvalidSpec, "tile split differs from image split");
      auto& t = tally[e.image_id];
      ++t.first;
      t.second = std::max(t.second, e.label);
    }
    for (const auto& img : images) {
      const auto t = tally[img.image_id];
      if (t.first != img.n_tiles || t.second != img.image_label)
        fail(ErrorCode::InvalidSpec, "image table inconsistent for " + img.image_id);
    }
  }

  std::vector<const TileRecord*> tiles_in(Split s) const {
    std::vector<const TileRecord*> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(&e);
    return out;
  }

  std::vector<const ImageRecord*> images_in(Split s) const {
    std::vector<const ImageRecord*> out;
    for (const auto& i : images)
      if (i.split == s) out.push_back(&i);
    return out;
  }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct Fractions {
  double train = 0.6, val = 0.2, test = 0.2;
};

/// Image counts per split. Each split gets floor(N * f); leftover images go
/// first to any split that would otherwise be empty (train, val, test order),
/// then to validation. 166 images at 60/20/20 give 99/34/33.
inline std::array<std::size_t, 3> allocate_counts(std::size_t n, const Fractions& f) {
  const std::array<double, 3> fr{f.train, f.val, f.test};
  std::array<std::size_t, 3> counts{};
  std::size_t used = 0;
  for (int k = 0; k < 3; ++k) {
    counts[k] = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fr[k] + 1e-9));
    used += counts[k];
  }
  while (used > n) {  // guards rounding fuzz only
    for (int k = 2; k >= 0 && used > n; --k)
      if (counts[k] > 0) --counts[k], --used;
  }
  std::size_t left = n - used;
  for (int k = 0; k < 3 && left > 0; ++k) {
    if (counts[k] == 0) ++counts[k], --left;
  }
  counts[1] += left;
  return counts;
}

/// Assigns whole images to splits by a seeded permutation; tiles follow their image.
inline DatasetManifest split_grouped(const DatasetManifest& manifest, const Fractions& f, std::uint64_t seed,
                                     bool stratified = false) {
  if (manifest.images.empty()) fail(ErrorCode::EmptyManifest, "manifest has no images");
  if (!(f.train > 0 && f.val > 0 && f.test > 0) || std::abs(f.train + f.val + f.test - 1.0) > 1e-9)
    fail(ErrorCode::BadFractions, "fractions must be positive and sum to 1");

  DatasetManifest out = manifest;
  Rng rng(derive_seed(seed, 0x5917));
  auto assign = [&](std::vector<std::size_t> pool) {
    rng.shuffle(pool);
    const auto counts = allocate_counts(pool.size(), f);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      out.images[pool[i]].split = i < counts[0]               ? Split::train
                                  : i < counts[0] + counts[1] ? Split::val
                                                              : Split::test;
    }
  };
  if (stratified) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < out.images.size(); ++i) (out.images[i].image_label ? pos : neg).push_back(i);
    assign(pos);
    assign(neg);
  } else {
    std::vector<std::size_t> all(out.images.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    assign(all);
  }
  std::map<std::string, Split> split_of;
  for (const auto& img : out.images) split_of[img.image_id] = img.split;
  for (auto& e : out.entries) e.split = split_of.at(e.image_id);
  return out;
}

struct ClassCounts {
  std::size_t corroded_tiles = 0;
  std::size_t intact_tiles = 0;
  std::size_t corroded_images = 0;
  std::size_t intact_images = 0;

  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

inline ClassCounts class_counts(const DatasetManifest& m, Split s) {
  ClassCounts c;
  for (const auto& e : m.entries) {
    if (e.split != s) continue;
    (e.label ? c.corroded_tiles : c.intact_tiles) += 1;
  }
  for (const auto& i : m.images) {
    if (i.split != s) continue;
    (i.image_label ? c.corroded_images : c.intact_images) += 1;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Persistence: manifest.csv (one row per tile) and images.csv beside it.

inline constexpr std::string_view kTileHeader = "image_id,row,col,label,split,path";
inline constexpr std::string_view kImageHeader = "image_id,n_tiles,image_label,split";

inline std::string tiles_csv(const DatasetManifest& m) {
  std::ostringstream os;
  os << kTileHeader << '\n';
  for (const auto& e : m.entries)
    os << e.image_id << ',' << e.row << ',' << e.col << ',' << e.label << ',' << to_string(e.split) << ',' << e.path
       << '\n';
  return os.str();
}

inline std::string images_csv(const DatasetManifest& m) {
  std::ostringstream os;
  os << kImageHeader << '\n';
  for (const auto& i : m.images)
    os << i.image_id << ',' << i.n_tiles << ',' << i.image_label << ',' << to_string(i.split) << '\n';
  return os.str();
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline int to_int(const std::string& s) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidSpec, "bad integer field '" + s + "'");
  }
}

}  // namespace detail

inline DatasetManifest parse_manifest(const std::string& tiles, const std::string& images) {
  DatasetManifest m;
  std::istringstream ti(tiles), ii(images);
  std::string line;
  if (!std::getline(ii, line) || line != kImageHeader) fail(ErrorCode::InvalidSpec, "bad images.csv header");
  while (std::getline(ii, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 4) fail(ErrorCode::InvalidSpec, "bad images.csv row: " + line);
    m.images.push_back({f[0], detail::to_int(f[1]), detail::to_int(f[2]), parse_split(f[3])});
  }
  if (!std::getline(ti, line) || line != kTileHeader) fail(ErrorCode::InvalidSpec, "bad manifest.csv header");
  while (std::getline(ti, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 6) fail(ErrorCode::InvalidSpec, "bad manifest.csv row: " + line);
    m.entries.push_back({f[0], detail::to_int(f[1]), detail::to_int(f[2]), detail::to_int(f[3]), parse_split(f[4]), f[5]});
  }
  return m;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCode::IoFailure, "short write to " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// `manifest_path` names the tile table; the image table is `images.csv` in the same directory.
inline std::filesystem::path images_table_path(const std::filesystem::path& manifest_path) {
  return manifest_path.parent_path() / "images.csv";
}

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& manifest_path) {
  write_text(manifest_path, tiles_csv(m));
  write_text(images_table_path(manifest_path), images_csv(m));
}

inline DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
  return parse_manifest(read_text(manifest_path), read_text(images_table_path(manifest_path)));
}

}  // namespace corrosion::dataset
