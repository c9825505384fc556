#pragma once

// Reconstruction quality metrics. Pixel values are treated as lying in
// [0, 1], so the dynamic range constant is 1 throughout.

#include <cmath>
#include <cstddef>
#include <string>

#include "sa/error.hpp"
#include "sa/tensor.hpp"

namespace sa {

namespace metrics_detail {

struct Dims {
  size_t h = 0, w = 0, c = 1;
  bool operator==(const Dims&) const = default;
};

// {H, W} and {H, W, 1} describe the same single-channel image.
inline Dims image_dims(const Tensor& t, const char* what) {
  if (t.shape.size() < 2)
    throw ArgumentError(std::string(what) + ": need a 2-d image");
  Dims d{t.shape[0], t.shape[1], 1};
  for (size_t i = 2; i < t.shape.size(); ++i) d.c *= t.shape[i];
  return d;
}

}  // namespace metrics_detail

inline double mse(const Tensor& a, const Tensor& b) {
  if (metrics_detail::image_dims(a, "mse") !=
      metrics_detail::image_dims(b, "mse"))
    throw ArgumentError("mse: shape mismatch");
  if (a.data.empty()) throw ArgumentError("mse: empty image");
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

// Peak signal-to-noise ratio in dB, capped at 99 so identical images
// stay finite.
inline double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse(a, b);
  if (m <= 0.0) return 99.0;
  const double v = -10.0 * std::log10(m);
  return v > 99.0 ? 99.0 : v;
}

// Mean structural similarity over every fully-contained window position,
// uniform (unweighted) windows. Single-channel images only.
inline double ssim(const Tensor& a, const Tensor& b, size_t window = 7) {
  const auto da = metrics_detail::image_dims(a, "ssim");
  if (da != metrics_detail::image_dims(b, "ssim"))
    throw ArgumentError("ssim: shape mismatch");
  if (da.c != 1) throw ArgumentError("ssim: single-channel images only");
  const size_t h = da.h;
  const size_t w = da.w;
  if (window == 0 || h < window || w < window)
    throw ArgumentError("ssim: image smaller than the window");

  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  const double n = static_cast<double>(window * window);
  double acc = 0.0;
  size_t count = 0;
  for (size_t y0 = 0; y0 + window <= h; ++y0) {
    for (size_t x0 = 0; x0 + window <= w; ++x0) {
      double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
      for (size_t y = y0; y < y0 + window; ++y) {
        for (size_t x = x0; x < x0 + window; ++x) {
          const double px = a.data[y * w + x];
          const double py = b.data[y * w + x];
          sx += px;
          sy += py;
          sxx += px * px;
          syy += py * py;
          sxy += px * py;
        }
      }
      const double mx = sx / n;
      const double my = sy / n;
      const double vx = sxx / n - mx * mx;
      const double vy = syy / n - my * my;
      const double cov = sxy / n - mx * my;
      acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace sa
