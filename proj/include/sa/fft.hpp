#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "sa/error.hpp"
#include "sa/tensor.hpp"

namespace sa {

using cd = std::complex<double>;

inline size_t image_height(const Tensor& img) { return img.shape.at(0); }
inline size_t image_width(const Tensor& img) { return img.shape.at(1); }
inline size_t image_channels(const Tensor& img) {
  return img.shape.size() >= 3 ? img.shape[2] : 1;
}

// Complex frequency grid per channel, DC at (0,0). Forward transform is
// unnormalized; the inverse divides by H*W.
struct Spectrum {
  size_t h = 0, w = 0;
  std::vector<std::vector<cd>> planes;  // one H*W row-major grid per channel

  cd& bin(size_t c, size_t u, size_t v) { return planes[c][u * w + v]; }
  cd bin(size_t c, size_t u, size_t v) const { return planes[c][u * w + v]; }
};

namespace detail {

inline bool is_pow2(size_t n) { return n >= 1 && (n & (n - 1)) == 0; }

// In-place radix-2 when the length is a power of two, naive DFT otherwise.
inline void fft_1d(std::vector<cd>& a, bool inverse) {
  const size_t n = a.size();
  const double sign = inverse ? 1.0 : -1.0;
  if (n <= 1) return;
  if (!is_pow2(n)) {
    std::vector<cd> out(n, cd{0.0, 0.0});
    for (size_t k = 0; k < n; ++k)
      for (size_t j = 0; j < n; ++j)
        out[k] += a[j] * std::polar(1.0, sign * 2.0 * std::numbers::pi *
                                             static_cast<double>(k * j) /
                                             static_cast<double>(n));
    a = std::move(out);
    return;
  }
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    for (size_t i = 0; i < n; i += len) {
      for (size_t j = 0; j < len / 2; ++j) {
        const cd w = std::polar(1.0, sign * 2.0 * std::numbers::pi *
                                         static_cast<double>(j) /
                                         static_cast<double>(len));
        const cd u = a[i + j];
        const cd v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
      }
    }
  }
}

inline void fft_2d_plane(std::vector<cd>& plane, size_t h, size_t w,
                         bool inverse) {
  std::vector<cd> line;
  for (size_t u = 0; u < h; ++u) {
    line.assign(plane.begin() + u * w, plane.begin() + (u + 1) * w);
    fft_1d(line, inverse);
    std::copy(line.begin(), line.end(), plane.begin() + u * w);
  }
  line.resize(h);
  for (size_t v = 0; v < w; ++v) {
    for (size_t u = 0; u < h; ++u) line[u] = plane[u * w + v];
    fft_1d(line, inverse);
    for (size_t u = 0; u < h; ++u) plane[u * w + v] = line[u];
  }
}

}  // namespace detail

inline Spectrum fft2(const Tensor& img) {
  const size_t h = image_height(img), w = image_width(img);
  const size_t ch = image_channels(img);
  if (h < 2 || w < 2) throw DimensionError("fft2: image must be at least 2x2");
  Spectrum s;
  s.h = h;
  s.w = w;
  s.planes.assign(ch, std::vector<cd>(h * w));
  for (size_t c = 0; c < ch; ++c)
    for (size_t y = 0; y < h; ++y)
      for (size_t x = 0; x < w; ++x)
        s.planes[c][y * w + x] = cd{img.data[(y * w + x) * ch + c], 0.0};
  for (auto& p : s.planes) detail::fft_2d_plane(p, h, w, false);
  return s;
}

// Real part of the inverse transform, shaped {H, W, C}.
inline Tensor ifft2(const Spectrum& s) {
  const size_t ch = s.planes.size();
  Tensor img = Tensor::zeros({s.h, s.w, ch});
  const double norm = static_cast<double>(s.h * s.w);
  for (size_t c = 0; c < ch; ++c) {
    std::vector<cd> p = s.planes[c];
    detail::fft_2d_plane(p, s.h, s.w, true);
    for (size_t i = 0; i < p.size(); ++i)
      img.data[i * ch + c] = p[i].real() / norm;
  }
  return img;
}

// Index mapped to the signed frequency range (-n/2, n/2].
inline long signed_frequency(size_t i, size_t n) {
  const long li = static_cast<long>(i), ln = static_cast<long>(n);
  return 2 * li <= ln ? li : li - ln;
}

// The 1-D sgn(xi) lifted to 2-D: sign of the summed signed frequencies.
inline int frequency_sign(size_t u, size_t v, size_t h, size_t w) {
  const long s = signed_frequency(u, h) + signed_frequency(v, w);
  return (s > 0) - (s < 0);
}

inline cd ht_multiplier(size_t u, size_t v, size_t h, size_t w) {
  return cd{0.0, -static_cast<double>(frequency_sign(u, v, h, w))};
}

// HT(I) = invfft(-i sgn(xi) fft(I)), real part, per channel.
inline Tensor hilbert_transform(const Tensor& img) {
  Spectrum s = fft2(img);
  for (auto& plane : s.planes)
    for (size_t u = 0; u < s.h; ++u)
      for (size_t v = 0; v < s.w; ++v)
        plane[u * s.w + v] *= ht_multiplier(u, v, s.h, s.w);
  return ifft2(s);
}

// Amplitude of the input, phase of its HT image. Bins where the HT spectrum
// vanishes (the sgn=0 set, plus the Nyquist lines that cancel when the HT
// image is realized) keep the original phase.
inline Tensor ht_phase_swap(const Tensor& img) {
  const Spectrum f = fft2(img);
  const Spectrum g = fft2(hilbert_transform(img));
  Spectrum out = f;
  for (size_t c = 0; c < f.planes.size(); ++c) {
    for (size_t i = 0; i < f.planes[c].size(); ++i) {
      const cd fv = f.planes[c][i];
      const cd gv = g.planes[c][i];
      const double fa = std::abs(fv);
      const double ga = std::abs(gv);
      // analytic zeros of the HT spectrum land at rounding-noise level;
      // anything that small relative to |F| keeps the original phase
      out.planes[c][i] = (ga <= 1e-9 * fa || ga == 0.0) ? fv : fa * (gv / ga);
    }
  }
  return ifft2(out);
}

// OOD augmentation: the phase swap, clipped to the [0,1] pixel range.
inline Tensor ht_augment(const Tensor& img) {
  Tensor aug = ht_phase_swap(img);
  for (double& p : aug.data) p = std::min(1.0, std::max(0.0, p));
  return aug;
}

}  // namespace sa
