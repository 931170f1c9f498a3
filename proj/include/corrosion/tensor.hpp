#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

namespace corrosion::nn {

/// Dense NCHW activation buffer.
template <typename T>
struct Act {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> v;

  Act() = default;
  Act(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * h_ * w_) {}

  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c) * plane(); }
  std::size_t size() const noexcept { return v.size(); }
  T* sample(int i) noexcept { return v.data() + i * sample_size(); }
  const T* sample(int i) const noexcept { return v.data() + i * sample_size(); }
  T* channel(int i, int ch) noexcept { return sample(i) + ch * plane(); }
  const T* channel(int i, int ch) const noexcept { return sample(i) + ch * plane(); }
  void release() { std::vector<T>().swap(v); }
};

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

struct ConvGeom {
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

  int out_size(int in) const noexcept { return (in + 2 * pad - k) / stride + 1; }
  int patch() const noexcept { return cin * k * k; }
};

/// Unfolds one sample (cin x h x w) into a (cin*k*k) x (ho*wo) matrix.
template <typename T>
void im2col(const T* x, int h, int w, const ConvGeom& g, T* cols) {
  const int ho = g.out_size(h), wo = g.out_size(w);
  for (int c = 0; c < g.cin; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = cols + (static_cast<std::size_t>((c * g.k + ky) * g.k + kx)) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * w;
          if (g.stride == 1) {
            const int shift = kx - g.pad;
            const int lo = std::max(0, -shift);
            const int hi = std::min(wo, w - shift);
            std::fill(dst, dst + lo, T(0));
            if (hi > lo) std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + std::max(hi, lo), dst + wo, T(0));
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-and-adds columns back into a sample.
template <typename T>
void col2im(const T* cols, int h, int w, const ConvGeom& g, T* x) {
  const int ho = g.out_size(h), wo = g.out_size(w);
  for (int c = 0; c < g.cin; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = cols + (static_cast<std::size_t>((c * g.k + ky) * g.k + kx)) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * wo;
          T* dst = xc + static_cast<std::size_t>(iy) * w;
          if (g.stride == 1) {
            const int shift = kx - g.pad;
            const int lo = std::max(0, -shift);
            const int hi = std::min(wo, w - shift);
            for (int ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

/// y = conv(x, weight); weight laid out as cout x (cin*k*k).
template <typename T>
Act<T> conv_forward(const Act<T>& x, const T* weight, const ConvGeom& g) {
  const int ho = g.out_size(x.h), wo = g.out_size(x.w);
  Act<T> y(x.n, g.cout, ho, wo);
  const bool direct = g.k == 1 && g.stride == 1 && g.pad == 0;
  std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(g.patch()) * ho * wo);
  CMapR<T> wmat(weight, g.cout, g.patch());
  for (int i = 0; i < x.n; ++i) {
    const T* src = x.sample(i);
    if (!direct) {
      im2col(src, x.h, x.w, g, cols.data());
      src = cols.data();
    }
    CMapR<T> cmat(src, g.patch(), static_cast<Eigen::Index>(ho) * wo);
    MapR<T> ymat(y.sample(i), g.cout, static_cast<Eigen::Index>(ho) * wo);
    ymat.noalias() = wmat * cmat;
  }
  return y;
}

/// Accumulates dweight and, when `dx` is non-null, writes the input gradient.
template <typename T>
void conv_backward(const Act<T>& x, const Act<T>& dy, const T* weight, const ConvGeom& g, T* dweight, Act<T>* dx) {
  const Eigen::Index hw = static_cast<Eigen::Index>(dy.h) * dy.w;
  const bool direct = g.k == 1 && g.stride == 1 && g.pad == 0;
  std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(g.patch()) * hw);
  std::vector<T> dcols(static_cast<std::size_t>(g.patch()) * hw);
  CMapR<T> wmat(weight, g.cout, g.patch());
  MapR<T> dwmat(dweight, g.cout, g.patch());
  if (dx) *dx = Act<T>(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    const T* src = x.sample(i);
    if (!direct) {
      im2col(src, x.h, x.w, g, cols.data());
      src = cols.data();
    }
    CMapR<T> cmat(src, g.patch(), hw);
    CMapR<T> dymat(dy.sample(i), g.cout, hw);
    dwmat.noalias() += dymat * cmat.transpose();
    if (dx) {
      if (direct) {
        MapR<T> dxmat(dx->sample(i), g.patch(), hw);
        dxmat.noalias() = wmat.transpose() * dymat;
      } else {
        MapR<T> dcmat(dcols.data(), g.patch(), hw);
        dcmat.noalias() = wmat.transpose() * dymat;
        col2im(dcols.data(), x.h, x.w, g, dx->sample(i));
      }
    }
  }
}

}  // namespace corrosion::nn
