#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "corrosion/error.hpp"
#include "corrosion/image.hpp"
#include "corrosion/rng.hpp"
#include "corrosion/tensor.hpp"

namespace corrosion::model {

struct ArchConfig {
  int input_channels = 3;
  int stem_channels = 16;
  std::vector<int> stage_channels{16, 32, 64};
  int blocks_per_stage = 2;
  int num_classes = 2;
  int input_size = 256;

  int num_stages() const noexcept { return static_cast<int>(stage_channels.size()); }
  int num_groups() const noexcept { return num_stages() + 2; }
  int final_channels() const noexcept { return stage_channels.back(); }

  /// Spatial side after the stem (stride 2) and each stage entry past the first (stride 2).
  int final_spatial() const noexcept {
    int s = (input_size + 2 - 3) / 2 + 1;
    for (int i = 1; i < num_stages(); ++i) s = (s + 2 - 3) / 2 + 1;
    return s;
  }

  void validate() const {
    if (stage_channels.empty()) fail(ErrorCode::InvalidSpec, "stage_channels must be nonempty");
    if (num_classes != 2) fail(ErrorCode::InvalidSpec, "num_classes is fixed at 2");
    if (stem_channels < 1 || blocks_per_stage < 1 || input_size < 2 || input_channels < 1)
      fail(ErrorCode::InvalidSpec, "architecture sizes must be positive");
    for (int c : stage_channels)
      if (c < 1) fail(ErrorCode::InvalidSpec, "stage channel counts must be positive");
  }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Per-channel input standardization, computed on the training split.
struct InputStats {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stddev{0.25, 0.25, 0.25};

  friend bool operator==(const InputStats&, const InputStats&) = default;
};

template <typename T>
struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> values;
  int group = 0;
  bool trainable = true;

  std::size_t count() const noexcept { return values.size(); }
};

template <typename T>
struct ModelParams {
  ArchConfig arch;
  InputStats input_stats;
  std::vector<std::string> group_names;
  std::vector<ParamTensor<T>> tensors;

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors)
      if (t.trainable) n += t.count();
    return n;
  }

  const ParamTensor<T>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  ParamTensor<T>* find(const std::string& name) {
    for (auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.arch = arch;
    out.input_stats = input_stats;
    out.group_names = group_names;
    for (const auto& t : tensors) {
      ParamTensor<U> u{t.name, t.shape, std::vector<U>(t.values.begin(), t.values.end()), t.group, t.trainable};
      out.tensors.push_back(std::move(u));
    }
    return out;
  }
};

/// Gradient buffers aligned index-for-index with ModelParams::tensors;
/// non-trainable entries stay zero.
template <typename T>
struct Gradients {
  std::vector<std::vector<T>> values;

  static Gradients zeros_like(const ModelParams<T>& p) {
    Gradients g;
    for (const auto& t : p.tensors) g.values.emplace_back(t.count(), T(0));
    return g;
  }
};

enum class Mode { train, eval };

template <typename T>
struct Batch {
  nn::Act<T> inputs;        // B x C x H x W, standardized
  std::vector<int> labels;  // 1 = corroded

  int size() const noexcept { return inputs.n; }
};

// ---------------------------------------------------------------------------
// Layout: where each layer's tensors live in ModelParams::tensors.

struct ConvRef {
  int weight = -1;
  nn::ConvGeom geom;
};

struct BnRef {
  int gamma = -1, beta = -1, mean = -1, var = -1;
};

struct BlockRef {
  ConvRef conv1, conv2;
  BnRef bn1, bn2;
  std::optional<ConvRef> proj;
  std::optional<BnRef> proj_bn;
};

struct Layout {
  ConvRef stem;
  BnRef stem_bn;
  std::vector<BlockRef> blocks;
  int fc_weight = -1, fc_bias = -1;
};

namespace detail {

struct TensorDecl {
  std::string name;
  std::vector<int> shape;
  int group;
  bool trainable;
};

inline std::vector<TensorDecl> declare(const ArchConfig& arch, Layout& layout) {
  std::vector<TensorDecl> decls;
  auto add = [&](std::string name, std::vector<int> shape, int group, bool trainable) {
    decls.push_back({std::move(name), std::move(shape), group, trainable});
    return static_cast<int>(decls.size()) - 1;
  };
  auto conv = [&](const std::string& prefix, int cin, int cout, int k, int stride, int group) {
    ConvRef ref;
    ref.geom = {cin, cout, k, stride, k / 2};
    ref.weight = add(prefix + ".weight", {cout, cin, k, k}, group, true);
    return ref;
  };
  auto bn = [&](const std::string& prefix, int c, int group) {
    BnRef ref;
    ref.gamma = add(prefix + ".weight", {c}, group, true);
    ref.beta = add(prefix + ".bias", {c}, group, true);
    ref.mean = add(prefix + ".running_mean", {c}, group, false);
    ref.var = add(prefix + ".running_var", {c}, group, false);
    return ref;
  };

  layout.stem = conv("stem.conv", arch.input_channels, arch.stem_channels, 3, 2, 0);
  layout.stem_bn = bn("stem.bn", arch.stem_channels, 0);
  int cin = arch.stem_channels;
  for (int s = 0; s < arch.num_stages(); ++s) {
    const int group = s + 1;
    const int cout = arch.stage_channels[s];
    for (int b = 0; b < arch.blocks_per_stage; ++b) {
      const std::string prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      BlockRef blk;
      blk.conv1 = conv(prefix + ".conv1", cin, cout, 3, stride, group);
      blk.bn1 = bn(prefix + ".bn1", cout, group);
      blk.conv2 = conv(prefix + ".conv2", cout, cout, 3, 1, group);
      blk.bn2 = bn(prefix + ".bn2", cout, group);
      if (stride != 1 || cin != cout) {
        blk.proj = conv(prefix + ".proj.conv", cin, cout, 1, stride, group);
        blk.proj_bn = bn(prefix + ".proj.bn", cout, group);
      }
      layout.blocks.push_back(blk);
      cin = cout;
    }
  }
  const int head = arch.num_groups() - 1;
  layout.fc_weight = add("head.fc.weight", {arch.num_classes, 2 * cin}, head, true);
  layout.fc_bias = add("head.fc.bias", {arch.num_classes}, head, true);
  return decls;
}

}  // namespace detail

inline Layout make_layout(const ArchConfig& arch) {
  Layout layout;
  detail::declare(arch, layout);
  return layout;
}

inline std::vector<std::string> group_names(const ArchConfig& arch) {
  std::vector<std::string> names{"stem"};
  for (int s = 0; s < arch.num_stages(); ++s) names.push_back("stage_" + std::to_string(s + 1));
  names.push_back("head");
  return names;
}

/// Fan-in scaled normal convolution weights, unit BN scales, zero shifts,
/// and a near-zero head.
template <typename T>
ModelParams<T> init_model(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  Layout layout;
  const auto decls = detail::declare(arch, layout);
  ModelParams<T> params;
  params.arch = arch;
  params.group_names = group_names(arch);
  Rng rng(derive_seed(seed, 0x1417));
  for (const auto& d : decls) {
    ParamTensor<T> t;
    t.name = d.name;
    t.shape = d.shape;
    t.group = d.group;
    t.trainable = d.trainable;
    const std::size_t n = std::accumulate(d.shape.begin(), d.shape.end(), std::size_t{1},
                                          [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    t.values.assign(n, T(0));
    const auto ends_with = [&](std::string_view suffix) {
      return d.name.size() >= suffix.size() && d.name.compare(d.name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (d.shape.size() == 4) {
      const double fan_in = static_cast<double>(d.shape[1]) * d.shape[2] * d.shape[3];
      const double sd = std::sqrt(2.0 / fan_in);
      for (auto& v : t.values) v = static_cast<T>(rng.normal() * sd);
    } else if (d.name == "head.fc.weight") {
      for (auto& v : t.values) v = static_cast<T>(rng.normal() * 0.01);
    } else if (ends_with(".running_var") || (ends_with(".weight") && d.shape.size() == 1)) {
      std::fill(t.values.begin(), t.values.end(), T(1));
    }
    params.tensors.push_back(std::move(t));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Forward / backward.

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

template <typename T>
struct BnTrace {
  std::vector<T> mean, invstd;
};

template <typename T>
struct BlockTrace {
  nn::Act<T> z1, a1, z2, zp, out;
  BnTrace<T> s1, s2, sp;
};

/// Everything backward needs from a forward pass.
template <typename T>
struct Trace {
  Mode mode = Mode::eval;
  nn::Act<T> z0, a0;
  BnTrace<T> s0;
  std::vector<BlockTrace<T>> blocks;
  std::vector<T> features;  // B x 2C
  std::vector<int> argmax;  // B x C, flat spatial index of the max
  std::vector<T> logits;    // B x 2
};

namespace detail {

template <typename T>
BnTrace<T> bn_stats(const nn::Act<T>& z, const ModelParams<T>& p, const BnRef& ref, Mode mode) {
  BnTrace<T> st;
  st.mean.resize(z.c);
  st.invstd.resize(z.c);
  const std::size_t plane = z.plane();
  for (int ch = 0; ch < z.c; ++ch) {
    if (mode == Mode::eval) {
      st.mean[ch] = p.tensors[ref.mean].values[ch];
      st.invstd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(p.tensors[ref.var].values[ch]) + kBnEps));
      continue;
    }
    double sum = 0.0;
    for (int i = 0; i < z.n; ++i) {
      const T* x = z.channel(i, ch);
      for (std::size_t k = 0; k < plane; ++k) sum += x[k];
    }
    const double m = static_cast<double>(z.n) * plane;
    const double mean = sum / m;
    double sq = 0.0;
    for (int i = 0; i < z.n; ++i) {
      const T* x = z.channel(i, ch);
      for (std::size_t k = 0; k < plane; ++k) {
        const double d = x[k] - mean;
        sq += d * d;
      }
    }
    st.mean[ch] = static_cast<T>(mean);
    st.invstd[ch] = static_cast<T>(1.0 / std::sqrt(sq / m + kBnEps));
  }
  return st;
}

template <typename T>
void bn_update_running(const nn::Act<T>& z, ModelParams<T>& p, const BnRef& ref, const BnTrace<T>& st) {
  const double m = static_cast<double>(z.n) * z.plane();
  for (int ch = 0; ch < z.c; ++ch) {
    const double invstd = st.invstd[ch];
    const double var = 1.0 / (invstd * invstd) - kBnEps;
    const double unbiased = m > 1 ? var * m / (m - 1) : var;
    auto& rm = p.tensors[ref.mean].values[ch];
    auto& rv = p.tensors[ref.var].values[ch];
    rm = static_cast<T>((1 - kBnMomentum) * rm + kBnMomentum * st.mean[ch]);
    rv = static_cast<T>((1 - kBnMomentum) * rv + kBnMomentum * unbiased);
  }
}

/// y = gamma * (z - mean) * invstd + beta, optionally followed by ReLU.
template <typename T>
nn::Act<T> bn_apply(const nn::Act<T>& z, const ModelParams<T>& p, const BnRef& ref, const BnTrace<T>& st, bool relu) {
  nn::Act<T> y(z.n, z.c, z.h, z.w);
  const std::size_t plane = z.plane();
  const auto& gamma = p.tensors[ref.gamma].values;
  const auto& beta = p.tensors[ref.beta].values;
  for (int i = 0; i < z.n; ++i) {
    for (int ch = 0; ch < z.c; ++ch) {
      const T scale = gamma[ch] * st.invstd[ch];
      const T shift = beta[ch] - st.mean[ch] * scale;
      const T* x = z.channel(i, ch);
      T* out = y.channel(i, ch);
      if (relu) {
        for (std::size_t k = 0; k < plane; ++k) out[k] = std::max(T(0), x[k] * scale + shift);
      } else {
        for (std::size_t k = 0; k < plane; ++k) out[k] = x[k] * scale + shift;
      }
    }
  }
  return y;
}

/// In-place: turns dy (w.r.t. BN output) into dz (w.r.t. BN input).
template <typename T>
void bn_backward(nn::Act<T>& dy, const nn::Act<T>& z, const ModelParams<T>& p, const BnRef& ref,
                 const BnTrace<T>& st, Mode mode, Gradients<T>& g) {
  const std::size_t plane = z.plane();
  const double m = static_cast<double>(z.n) * plane;
  const auto& gamma = p.tensors[ref.gamma].values;
  for (int ch = 0; ch < z.c; ++ch) {
    const double mean = st.mean[ch];
    const double invstd = st.invstd[ch];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int i = 0; i < z.n; ++i) {
      const T* x = z.channel(i, ch);
      const T* d = dy.channel(i, ch);
      for (std::size_t k = 0; k < plane; ++k) {
        sum_dy += d[k];
        sum_dy_xhat += d[k] * ((x[k] - mean) * invstd);
      }
    }
    g.values[ref.gamma][ch] += static_cast<T>(sum_dy_xhat);
    g.values[ref.beta][ch] += static_cast<T>(sum_dy);
    const double gi = gamma[ch] * invstd;
    if (mode == Mode::eval) {
      for (int i = 0; i < z.n; ++i) {
        T* d = dy.channel(i, ch);
        for (std::size_t k = 0; k < plane; ++k) d[k] = static_cast<T>(d[k] * gi);
      }
    } else {
      const double mean_dy = sum_dy / m;
      const double mean_dy_xhat = sum_dy_xhat / m;
      for (int i = 0; i < z.n; ++i) {
        const T* x = z.channel(i, ch);
        T* d = dy.channel(i, ch);
        for (std::size_t k = 0; k < plane; ++k) {
          const double xhat = (x[k] - mean) * invstd;
          d[k] = static_cast<T>(gi * (d[k] - mean_dy - xhat * mean_dy_xhat));
        }
      }
    }
  }
}

template <typename T>
void check_batch(const ModelParams<T>& p, const Batch<T>& batch) {
  const auto& a = p.arch;
  const auto& x = batch.inputs;
  if (x.n < 1) fail(ErrorCode::ShapeMismatch, "batch must hold at least one sample");
  if (x.c != a.input_channels || x.h != a.input_size || x.w != a.input_size)
    fail(ErrorCode::ShapeMismatch, "batch dimensions do not match the architecture");
  if (!batch.labels.empty() && static_cast<int>(batch.labels.size()) != x.n)
    fail(ErrorCode::ShapeMismatch, "label count does not match batch size");
  for (T v : x.v)
    if (!std::isfinite(static_cast<double>(v))) fail(ErrorCode::NonFiniteInput, "batch contains non-finite values");
}

}  // namespace detail

/// Runs the network and keeps the intermediate activations. In train mode
/// normalization uses batch statistics; running statistics are updated only
/// when `running` is given.
template <typename T>
Trace<T> forward_trace(const ModelParams<T>& p, const Batch<T>& batch, Mode mode, ModelParams<T>* running = nullptr) {
  detail::check_batch(p, batch);
  const Layout layout = make_layout(p.arch);
  Trace<T> tr;
  tr.mode = mode;

  tr.z0 = nn::conv_forward(batch.inputs, p.tensors[layout.stem.weight].values.data(), layout.stem.geom);
  tr.s0 = detail::bn_stats(tr.z0, p, layout.stem_bn, mode);
  if (running) detail::bn_update_running(tr.z0, *running, layout.stem_bn, tr.s0);
  tr.a0 = detail::bn_apply(tr.z0, p, layout.stem_bn, tr.s0, true);

  const nn::Act<T>* x = &tr.a0;
  tr.blocks.resize(layout.blocks.size());
  for (std::size_t b = 0; b < layout.blocks.size(); ++b) {
    const BlockRef& ref = layout.blocks[b];
    BlockTrace<T>& bt = tr.blocks[b];
    bt.z1 = nn::conv_forward(*x, p.tensors[ref.conv1.weight].values.data(), ref.conv1.geom);
    bt.s1 = detail::bn_stats(bt.z1, p, ref.bn1, mode);
    if (running) detail::bn_update_running(bt.z1, *running, ref.bn1, bt.s1);
    bt.a1 = detail::bn_apply(bt.z1, p, ref.bn1, bt.s1, true);
    bt.z2 = nn::conv_forward(bt.a1, p.tensors[ref.conv2.weight].values.data(), ref.conv2.geom);
    bt.s2 = detail::bn_stats(bt.z2, p, ref.bn2, mode);
    if (running) detail::bn_update_running(bt.z2, *running, ref.bn2, bt.s2);
    bt.out = detail::bn_apply(bt.z2, p, ref.bn2, bt.s2, false);
    if (ref.proj) {
      bt.zp = nn::conv_forward(*x, p.tensors[ref.proj->weight].values.data(), ref.proj->geom);
      bt.sp = detail::bn_stats(bt.zp, p, *ref.proj_bn, mode);
      if (running) detail::bn_update_running(bt.zp, *running, *ref.proj_bn, bt.sp);
      const nn::Act<T> skip = detail::bn_apply(bt.zp, p, *ref.proj_bn, bt.sp, false);
      for (std::size_t k = 0; k < bt.out.size(); ++k) bt.out.v[k] = std::max(T(0), bt.out.v[k] + skip.v[k]);
    } else {
      for (std::size_t k = 0; k < bt.out.size(); ++k) bt.out.v[k] = std::max(T(0), bt.out.v[k] + x->v[k]);
    }
    x = &bt.out;
  }

  // concat(global average pool, global max pool) -> affine 2C -> 2
  const int n = x->n, c = x->c;
  const std::size_t plane = x->plane();
  tr.features.assign(static_cast<std::size_t>(n) * 2 * c, T(0));
  tr.argmax.assign(static_cast<std::size_t>(n) * c, 0);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* v = x->channel(i, ch);
      double sum = 0.0;
      std::size_t best = 0;
      for (std::size_t k = 0; k < plane; ++k) {
        sum += v[k];
        if (v[k] > v[best]) best = k;
      }
      tr.features[static_cast<std::size_t>(i) * 2 * c + ch] = static_cast<T>(sum / plane);
      tr.features[static_cast<std::size_t>(i) * 2 * c + c + ch] = v[best];
      tr.argmax[static_cast<std::size_t>(i) * c + ch] = static_cast<int>(best);
    }
  }
  const auto& fw = p.tensors[layout.fc_weight].values;
  const auto& fb = p.tensors[layout.fc_bias].values;
  const int classes = p.arch.num_classes;
  tr.logits.assign(static_cast<std::size_t>(n) * classes, T(0));
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < classes; ++k) {
      double acc = fb[k];
      for (int j = 0; j < 2 * c; ++j)
        acc += static_cast<double>(fw[static_cast<std::size_t>(k) * 2 * c + j]) *
               tr.features[static_cast<std::size_t>(i) * 2 * c + j];
      tr.logits[static_cast<std::size_t>(i) * classes + k] = static_cast<T>(acc);
    }
  }
  return tr;
}

/// B x 2 logits, row-major.
template <typename T>
std::vector<T> forward(const ModelParams<T>& p, const Batch<T>& batch, Mode mode) {
  return forward_trace(p, batch, mode).logits;
}

/// Probability of the corroded class per row of logits.
template <typename T>
std::vector<double> corrosion_probability(std::span<const T> logits) {
  std::vector<double> out(logits.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = static_cast<double>(logits[2 * i]) - static_cast<double>(logits[2 * i + 1]);
    out[i] = 1.0 / (1.0 + std::exp(d));
  }
  return out;
}

struct ClassWeights {
  double intact = 1.0;
  double corroded = 1.0;
  double operator[](int label) const noexcept { return label ? corroded : intact; }
};

/// Mean over the batch of -w_y * log softmax(logits)_y.
template <typename T>
double loss(std::span<const T> logits, std::span<const int> labels, ClassWeights weights = {}) {
  if (logits.size() != labels.size() * 2 || labels.empty())
    fail(ErrorCode::ShapeMismatch, "logits must be B x 2 with B labels");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double l0 = logits[2 * i], l1 = logits[2 * i + 1];
    const double mx = std::max(l0, l1);
    const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
    const double ly = labels[i] ? l1 : l0;
    total += weights[labels[i]] * (lse - ly);
  }
  return total / static_cast<double>(labels.size());
}

template <typename T>
struct GradResult {
  double loss = 0.0;
  Gradients<T> grads;
  std::vector<T> logits;
};

/// Reverse-mode gradients of the loss for a recorded forward pass.
template <typename T>
Gradients<T> backward(const ModelParams<T>& p, const Batch<T>& batch, const Trace<T>& tr, ClassWeights weights = {}) {
  const Layout layout = make_layout(p.arch);
  Gradients<T> g = Gradients<T>::zeros_like(p);
  const int n = batch.size();
  const int classes = p.arch.num_classes;
  const nn::Act<T>& last = tr.blocks.empty() ? tr.a0 : tr.blocks.back().out;
  const int c = last.c;
  const std::size_t plane = last.plane();

  // d loss / d logits = w_y (softmax - onehot) / B
  std::vector<double> dlogits(static_cast<std::size_t>(n) * classes);
  for (int i = 0; i < n; ++i) {
    const double l0 = tr.logits[2 * i], l1 = tr.logits[2 * i + 1];
    const double p1 = 1.0 / (1.0 + std::exp(l0 - l1));
    const double w = weights[batch.labels[i]] / n;
    const int y = batch.labels[i];
    dlogits[2 * i] = w * ((1.0 - p1) - (y == 0 ? 1.0 : 0.0));
    dlogits[2 * i + 1] = w * (p1 - (y == 1 ? 1.0 : 0.0));
  }

  const auto& fw = p.tensors[layout.fc_weight].values;
  auto& gw = g.values[layout.fc_weight];
  auto& gb = g.values[layout.fc_bias];
  nn::Act<T> dx(n, c, last.h, last.w);
  for (int i = 0; i < n; ++i) {
    std::vector<double> dfeat(2 * c, 0.0);
    for (int k = 0; k < classes; ++k) {
      const double d = dlogits[static_cast<std::size_t>(i) * classes + k];
      gb[k] += static_cast<T>(d);
      for (int j = 0; j < 2 * c; ++j) {
        gw[static_cast<std::size_t>(k) * 2 * c + j] +=
            static_cast<T>(d * tr.features[static_cast<std::size_t>(i) * 2 * c + j]);
        dfeat[j] += d * fw[static_cast<std::size_t>(k) * 2 * c + j];
      }
    }
    for (int ch = 0; ch < c; ++ch) {
      T* dv = dx.channel(i, ch);
      const T avg = static_cast<T>(dfeat[ch] / plane);
      std::fill(dv, dv + plane, avg);
      dv[tr.argmax[static_cast<std::size_t>(i) * c + ch]] += static_cast<T>(dfeat[c + ch]);
    }
  }

  for (std::size_t bi = layout.blocks.size(); bi-- > 0;) {
    const BlockRef& ref = layout.blocks[bi];
    const BlockTrace<T>& bt = tr.blocks[bi];
    const nn::Act<T>& x = bi == 0 ? tr.a0 : tr.blocks[bi - 1].out;

    for (std::size_t k = 0; k < dx.size(); ++k)
      if (!(bt.out.v[k] > T(0))) dx.v[k] = T(0);
    // dx now holds the gradient at the residual sum.

    nn::Act<T> dskip;
    if (ref.proj) {
      nn::Act<T> dzp = dx;
      detail::bn_backward(dzp, bt.zp, p, *ref.proj_bn, bt.sp, tr.mode, g);
      nn::conv_backward(x, dzp, p.tensors[ref.proj->weight].values.data(), ref.proj->geom,
                        g.values[ref.proj->weight].data(), &dskip);
    }

    nn::Act<T> dz2 = ref.proj ? std::move(dx) : dx;
    detail::bn_backward(dz2, bt.z2, p, ref.bn2, bt.s2, tr.mode, g);
    nn::Act<T> da1;
    nn::conv_backward(bt.a1, dz2, p.tensors[ref.conv2.weight].values.data(), ref.conv2.geom,
                      g.values[ref.conv2.weight].data(), &da1);
    dz2.release();
    for (std::size_t k = 0; k < da1.size(); ++k)
      if (!(bt.a1.v[k] > T(0))) da1.v[k] = T(0);
    detail::bn_backward(da1, bt.z1, p, ref.bn1, bt.s1, tr.mode, g);
    nn::Act<T> dx1;
    nn::conv_backward(x, da1, p.tensors[ref.conv1.weight].values.data(), ref.conv1.geom,
                      g.values[ref.conv1.weight].data(), &dx1);
    if (ref.proj) {
      for (std::size_t k = 0; k < dx1.size(); ++k) dx1.v[k] += dskip.v[k];
    } else {
      for (std::size_t k = 0; k < dx1.size(); ++k) dx1.v[k] += dx.v[k];
    }
    dx = std::move(dx1);
  }

  for (std::size_t k = 0; k < dx.size(); ++k)
    if (!(tr.a0.v[k] > T(0))) dx.v[k] = T(0);
  detail::bn_backward(dx, tr.z0, p, layout.stem_bn, tr.s0, tr.mode, g);
  nn::conv_backward(batch.inputs, dx, p.tensors[layout.stem.weight].values.data(), layout.stem.geom,
                    g.values[layout.stem.weight].data(), static_cast<nn::Act<T>*>(nullptr));

  for (const auto& v : g.values)
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) fail(ErrorCode::NonFiniteGradient, "gradient is not finite");
  return g;
}

/// Loss and exact gradients w.r.t. every trainable parameter. Eval mode uses
/// fixed normalization statistics, so the loss is a deterministic function of
/// the parameters; train mode differentiates through the batch statistics.
template <typename T>
GradResult<T> grad(const ModelParams<T>& p, const Batch<T>& batch, Mode mode = Mode::eval,
                   ClassWeights weights = {}) {
  Trace<T> tr = forward_trace(p, batch, mode);
  GradResult<T> out;
  out.loss = loss<T>(tr.logits, batch.labels, weights);
  out.grads = backward(p, batch, tr, weights);
  out.logits = std::move(tr.logits);
  return out;
}

/// Train-mode pass that also folds batch statistics into the running estimates.
template <typename T>
GradResult<T> train_grad(ModelParams<T>& p, const Batch<T>& batch, ClassWeights weights = {}) {
  ModelParams<T>& running = p;
  Trace<T> tr = forward_trace(static_cast<const ModelParams<T>&>(p), batch, Mode::train, &running);
  GradResult<T> out;
  out.loss = loss<T>(tr.logits, batch.labels, weights);
  if (!std::isfinite(out.loss)) fail(ErrorCode::NonFiniteLoss, "training loss is not finite");
  out.grads = backward(p, batch, tr, weights);
  out.logits = std::move(tr.logits);
  return out;
}

// ---------------------------------------------------------------------------
// Input assembly.

/// Converts 8-bit RGB tiles into a standardized NCHW batch.
template <typename T>
Batch<T> make_batch(std::span<const Image* const> tiles, std::span<const int> labels, const InputStats& stats) {
  if (tiles.empty()) fail(ErrorCode::ShapeMismatch, "empty batch");
  if (!labels.empty() && labels.size() != tiles.size()) fail(ErrorCode::ShapeMismatch, "label count mismatch");
  const int h = tiles[0]->height(), w = tiles[0]->width();
  Batch<T> b;
  b.inputs = nn::Act<T>(static_cast<int>(tiles.size()), 3, h, w);
  b.labels.assign(labels.begin(), labels.end());
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const Image& img = *tiles[i];
    if (img.height() != h || img.width() != w) fail(ErrorCode::ShapeMismatch, "tiles differ in size");
    const auto px = img.pixels();
    for (int ch = 0; ch < 3; ++ch) {
      T* dst = b.inputs.channel(static_cast<int>(i), ch);
      const double scale = 1.0 / (255.0 * stats.stddev[ch]);
      const double shift = stats.mean[ch] / stats.stddev[ch];
      for (std::size_t k = 0; k < b.inputs.plane(); ++k) dst[k] = static_cast<T>(px[k * 3 + ch] * scale - shift);
    }
  }
  return b;
}

/// Per-channel mean and standard deviation of [0,1]-scaled pixels.
inline InputStats compute_input_stats(std::span<const Image* const> tiles) {
  InputStats s;
  std::array<double, 3> sum{}, sq{};
  double count = 0.0;
  for (const Image* img : tiles) {
    const auto px = img->pixels();
    for (std::size_t k = 0; k < px.size(); k += 3) {
      for (int ch = 0; ch < 3; ++ch) {
        const double v = px[k + ch] / 255.0;
        sum[ch] += v;
        sq[ch] += v * v;
      }
    }
    count += static_cast<double>(px.size() / 3);
  }
  if (count == 0) return s;
  for (int ch = 0; ch < 3; ++ch) {
    s.mean[ch] = sum[ch] / count;
    const double var = std::max(sq[ch] / count - s.mean[ch] * s.mean[ch], 0.0);
    s.stddev[ch] = std::max(std::sqrt(var), 1e-3);
  }
  return s;
}

}  // namespace corrosion::model
