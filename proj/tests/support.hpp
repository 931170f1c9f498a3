#pragma once

// Shared fixtures and independent oracles for the test suites. Oracles here are
// written from the definitions, not by calling the library routine they check.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "corrosion/dataset.hpp"
#include "corrosion/image.hpp"
#include "corrosion/metrics.hpp"
#include "corrosion/model.hpp"

namespace testsupport {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("corrosion_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline corrosion::Image random_image(int w, int h, std::mt19937_64& gen, std::string id = "img") {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h * 3);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& v : px) v = static_cast<std::uint8_t>(d(gen));
  return corrosion::Image(w, h, std::move(px), std::move(id));
}

inline corrosion::Image solid_image(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b, std::string id = "img") {
  corrosion::Image img(w, h, std::move(id));
  auto px = img.pixels();
  for (std::size_t k = 0; k < px.size(); k += 3) {
    px[k] = r;
    px[k + 1] = g;
    px[k + 2] = b;
  }
  return img;
}

/// Counts anchors y = 0, s, 2s, ... with y + T <= L.
inline int enumerate_windows(int length, int tile, int stride) {
  int n = 0;
  for (int y = 0; y + tile <= length; y += stride) ++n;
  return n;
}

/// P(score+ > score-) + 0.5 P(tie) over all positive/negative pairs.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

struct FourWay {
  long tn = 0, fp = 0, fn = 0, tp = 0;
};

inline FourWay recount(const std::vector<int>& preds, const std::vector<int>& labels) {
  FourWay f;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] == 0 && preds[i] == 0) ++f.tn;
    if (labels[i] == 0 && preds[i] == 1) ++f.fp;
    if (labels[i] == 1 && preds[i] == 0) ++f.fn;
    if (labels[i] == 1 && preds[i] == 1) ++f.tp;
  }
  return f;
}

/// Manifest of `n` images with `tiles_per_image` tiles each and random labels.
inline corrosion::dataset::DatasetManifest random_manifest(std::size_t n, int max_tiles, std::mt19937_64& gen) {
  corrosion::dataset::DatasetManifest m;
  std::uniform_int_distribution<int> tiles(0, max_tiles);
  std::bernoulli_distribution corrupt(0.2);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = "im" + std::to_string(i);
    m.images.push_back({id, 0, 0, corrosion::dataset::Split::train});
    const int t = tiles(gen);
    for (int k = 0; k < t; ++k)
      m.entries.push_back({id, k / 4, k % 4, corrupt(gen) ? 1 : 0, corrosion::dataset::Split::train,
                           "tiles/" + id + "_" + std::to_string(k) + ".png"});
  }
  m.recompute();
  return m;
}

/// A miniature residual net for gradient checks and fast training tests.
inline corrosion::model::ArchConfig mini_arch(int input = 8, int stem = 2, std::vector<int> stages = {2, 2},
                                              int blocks = 1) {
  corrosion::model::ArchConfig a;
  a.input_size = input;
  a.stem_channels = stem;
  a.stage_channels = std::move(stages);
  a.blocks_per_stage = blocks;
  return a;
}

template <typename T>
corrosion::model::Batch<T> random_batch(int n, int size, std::mt19937_64& gen, int channels = 3) {
  corrosion::model::Batch<T> b;
  b.inputs = corrosion::nn::Act<T>(n, channels, size, size);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : b.inputs.v) v = static_cast<T>(nd(gen));
  std::bernoulli_distribution bit(0.5);
  for (int i = 0; i < n; ++i) b.labels.push_back(bit(gen) ? 1 : 0);
  return b;
}

/// Randomizes every tensor so that no gradient is trivially zero: conv and
/// head weights ~ N(0, sd), BN scale in [0.5, 1.5], shifts and running means
/// ~ N(0, 0.3), running variances in [0.5, 2].
template <typename T>
void randomize(corrosion::model::ModelParams<T>& p, std::mt19937_64& gen) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  for (auto& t : p.tensors) {
    const auto ends = [&](const std::string& s) {
      return t.name.size() >= s.size() && t.name.compare(t.name.size() - s.size(), s.size(), s) == 0;
    };
    for (auto& v : t.values) {
      if (t.shape.size() == 4) {
        const double fan = static_cast<double>(t.shape[1]) * t.shape[2] * t.shape[3];
        v = static_cast<T>(nd(gen) * std::sqrt(2.0 / fan));
      } else if (t.name == "head.fc.weight") {
        v = static_cast<T>(nd(gen) * 0.5);
      } else if (ends(".running_var")) {
        v = static_cast<T>(0.5 + 1.5 * ud(gen));
      } else if (ends(".weight")) {
        v = static_cast<T>(0.5 + ud(gen));
      } else {
        v = static_cast<T>(nd(gen) * 0.3);
      }
    }
  }
}

struct GradCheckResult {
  double max_rel_error = 0.0;  // worst tensor
  std::string worst_tensor;
  std::size_t coordinates = 0;
  std::size_t skipped = 0;  // kink inside every tried interval
};

/// ReLU on/off bits and max-pool winners of a forward pass. The loss is smooth
/// in a parameter only while this pattern is unchanged.
template <typename T>
std::vector<int> activation_pattern(const corrosion::model::Trace<T>& tr) {
  std::vector<int> bits;
  auto add = [&](const corrosion::nn::Act<T>& a) {
    for (T v : a.v) bits.push_back(v > T(0));
  };
  add(tr.a0);
  for (const auto& b : tr.blocks) {
    add(b.a1);
    add(b.out);
  }
  bits.insert(bits.end(), tr.argmax.begin(), tr.argmax.end());
  return bits;
}

/// Central finite differences against the analytic gradient, tensor by
/// tensor. The error of a tensor is ||g_a - g_fd|| / max(||g_a||, ||g_fd||, floor).
/// A difference whose interval crosses a ReLU or max-pool switch is retried with
/// the step halved, up to `max_halvings` times, then left out and counted.
template <typename T>
GradCheckResult finite_difference_check(const corrosion::model::ModelParams<T>& p,
                                        const corrosion::model::Batch<T>& batch, corrosion::model::Mode mode,
                                        double h, double floor, int max_halvings = 8) {
  using namespace corrosion::model;
  const auto analytic = grad(p, batch, mode);
  ModelParams<T> q = p;
  GradCheckResult res;
  // Loss recomputed from the definition, in double.
  auto eval = [&](const ModelParams<T>& params, std::vector<int>* pattern) {
    const auto tr = forward_trace(params, batch, mode);
    if (pattern) *pattern = activation_pattern(tr);
    double total = 0.0;
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      const double l0 = tr.logits[2 * i], l1 = tr.logits[2 * i + 1];
      const double y = batch.labels[i] ? l1 : l0;
      total += std::log(std::exp(l0) + std::exp(l1)) - y;
    }
    return total / static_cast<double>(batch.labels.size());
  };
  std::vector<int> base, pattern;
  eval(p, &base);
  for (std::size_t ti = 0; ti < q.tensors.size(); ++ti) {
    if (!q.tensors[ti].trainable) continue;
    double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
    for (std::size_t k = 0; k < q.tensors[ti].values.size(); ++k) {
      const T orig = q.tensors[ti].values[k];
      ++res.coordinates;
      bool smooth = false;
      double fd = 0.0;
      double step = h;
      for (int attempt = 0; attempt <= max_halvings && !smooth; ++attempt, step /= 2) {
        q.tensors[ti].values[k] = static_cast<T>(orig + step);
        const double up_off = static_cast<double>(q.tensors[ti].values[k]) - orig;
        const double up = eval(q, &pattern);
        smooth = pattern == base;
        q.tensors[ti].values[k] = static_cast<T>(orig - step);
        const double down_off = orig - static_cast<double>(q.tensors[ti].values[k]);
        const double down = eval(q, &pattern);
        smooth = smooth && pattern == base;
        q.tensors[ti].values[k] = orig;
        fd = (up - down) / (up_off + down_off);
      }
      if (!smooth) {
        ++res.skipped;
        continue;
      }
      const double an = analytic.grads.values[ti][k];
      diff2 += (an - fd) * (an - fd);
      a2 += an * an;
      f2 += fd * fd;
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(f2), floor});
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_tensor = q.tensors[ti].name;
    }
  }
  return res;
}

/// One column of the published tile-level and whole-image result tables:
/// the four counts and the four printed rates.
struct TableColumn {
  const char* table;
  const char* name;
  long tn, fp, fn, tp;
  double tpr, fpr, ppv, f1;
};

inline const std::vector<TableColumn>& reference_columns() {
  static const std::vector<TableColumn> cols = {
      {"tiles", "ResNet-18", 7004, 138, 205, 619, 0.7512, 0.0193, 0.8177, 0.7830},
      {"tiles", "ResNet-34", 6936, 206, 143, 681, 0.8265, 0.0288, 0.7678, 0.7960},
      {"tiles", "ResNet-50", 6938, 204, 190, 634, 0.7694, 0.0286, 0.7566, 0.7629},
      {"images", "ResNet-18", 16, 0, 1, 16, 0.9412, 0.0000, 1.0000, 0.9697},
      {"images", "ResNet-34", 15, 1, 1, 16, 0.9412, 0.0625, 0.9412, 0.9412},
      {"images", "ResNet-50", 14, 2, 0, 17, 1.0, 0.1250, 0.8950, 0.9444},
  };
  return cols;
}

}  // namespace testsupport
