#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "sa/error.hpp"
#include "sa/rng.hpp"
#include "sa/serialize.hpp"
#include "sa/tensor.hpp"

namespace sa {

struct Dataset {
  size_t height = 0, width = 0, channels = 1;
  uint16_t class_count = 0;
  std::vector<uint16_t> labels;
  std::vector<Tensor> images;  // each {H, W, C}, pixels in [0,1]

  size_t size() const { return images.size(); }
};

// Rendering styles realize the two domains: same shape primitives, different
// stroke, background texture, and intensity curve.
enum class RenderStyle { server, client };

inline RenderStyle parse_style(const std::string& s) {
  if (s == "server") return RenderStyle::server;
  if (s == "client") return RenderStyle::client;
  throw ConfigError("unknown render style '" + s + "' (server|client)");
}

// Shape families shared by both domains.
inline constexpr int kShapeFamilies = 10;

namespace shapes_detail {

struct StyleParams {
  double fg_lo, fg_hi;
  double bg_lo, bg_hi;
  double texture_amp;
  double noise_std;
  double gamma;
};

inline StyleParams style_params(RenderStyle s) {
  if (s == RenderStyle::server)
    return {0.75, 0.95, 0.05, 0.15, 0.03, 0.02, 1.0};
  return {0.55, 0.80, 0.10, 0.30, 0.06, 0.03, 1.3};
}

inline double soft_in(double signed_dist, double edge = 0.8) {
  // 1 inside (negative distance), 0 outside, smooth across the edge band
  const double t = std::clamp(0.5 - signed_dist / edge, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Membership in [0,1] of pixel (x,y) for one shape family.
inline double shape_membership(int family, double x, double y, double cx,
                               double cy, double r, double rot, double stroke,
                               double aux) {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(rot), s = std::sin(rot);
  const double rx = c * dx + s * dy;
  const double ry = -s * dx + c * dy;
  const double dist = std::sqrt(dx * dx + dy * dy);
  switch (family) {
    case 0:  // disk
      return soft_in(dist - r);
    case 1:  // square
      return soft_in(std::max(std::abs(rx), std::abs(ry)) - 0.8 * r);
    case 2: {  // upright cross
      const double bar1 = std::max(std::abs(rx) - stroke, std::abs(ry) - r);
      const double bar2 = std::max(std::abs(ry) - stroke, std::abs(rx) - r);
      return soft_in(std::min(bar1, bar2));
    }
    case 3: {  // triangle: intersection of three rotated half planes
      double d = -1e9;
      for (int k = 0; k < 3; ++k) {
        const double a = rot + 2.0 * std::numbers::pi * k / 3.0;
        const double nx = std::cos(a), ny = std::sin(a);
        d = std::max(d, nx * dx + ny * dy - 0.62 * r);
      }
      return soft_in(d);
    }
    case 4:  // ring: thin band around a clear hole
      return soft_in(std::abs(dist - 0.85 * r) - 0.2 * r);
    case 5: {  // horizontal stripes in a square window
      const double period = aux;
      const double wave = std::sin(2.0 * std::numbers::pi * (y - cy) / period);
      const double window =
          soft_in(std::max(std::abs(dx), std::abs(dy)) - 1.05 * r);
      return window * soft_in(-wave * period / 4.0, 1.0);
    }
    case 6: {  // crisp vertical stripes in a wide square window
      const double period = aux;
      const double wave = std::sin(2.0 * std::numbers::pi * (x - cx) / period);
      const double window =
          soft_in(std::max(std::abs(dx), std::abs(dy)) - 1.3 * r);
      return window * soft_in(-wave * period / 3.0, 1.0);
    }
    case 7:  // diamond
      return soft_in(std::abs(rx) + std::abs(ry) - 1.05 * r);
    case 8: {  // long-armed diagonal cross
      const double ux = std::numbers::sqrt2 / 2.0 * (dx + dy);
      const double uy = std::numbers::sqrt2 / 2.0 * (dy - dx);
      const double arm = 1.2 * r;
      const double bar1 = std::max(std::abs(ux) - stroke, std::abs(uy) - arm);
      const double bar2 = std::max(std::abs(uy) - stroke, std::abs(ux) - arm);
      return soft_in(std::min(bar1, bar2));
    }
    case 9: {  // coarse checkerboard in a square window
      const double b = 1.4 * aux;
      const long ix = static_cast<long>(std::floor((x - cx) / b));
      const long iy = static_cast<long>(std::floor((y - cy) / b));
      const double cell = ((ix + iy) % 2 + 2) % 2 == 0 ? 1.0 : 0.0;
      const double window =
          soft_in(std::max(std::abs(dx), std::abs(dy)) - 1.1 * r);
      return window * cell;
    }
    default:
      throw ArgumentError("shape family out of range");
  }
}

}  // namespace shapes_detail

inline void snap_to_f32(Tensor& t) {
  for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

// Procedural grayscale shapes. `families` lists the shape families to render;
// the emitted label is the position in that list, so labels are contiguous.
inline Dataset generate_shapes(RenderStyle style, const std::vector<int>& families,
                               size_t n_per_class, uint64_t seed, size_t hw = 16) {
  if (n_per_class < 1) throw ArgumentError("generate_shapes: n_per_class >= 1");
  for (int f : families)
    if (f < 0 || f >= kShapeFamilies)
      throw ConfigError("generate_shapes: unknown shape family " +
                        std::to_string(f));
  const auto sp = shapes_detail::style_params(style);
  Dataset ds;
  ds.height = ds.width = hw;
  ds.channels = 1;
  ds.class_count = static_cast<uint16_t>(families.size());
  Rng rng(seed);
  const double half = static_cast<double>(hw) / 2.0;
  for (size_t ci = 0; ci < families.size(); ++ci) {
    for (size_t i = 0; i < n_per_class; ++i) {
      const double cx = half + (rng.uniform() - 0.5) * 0.25 * hw;
      const double cy = half + (rng.uniform() - 0.5) * 0.25 * hw;
      const double r = (0.22 + 0.12 * rng.uniform()) * hw;
      const double rot = rng.uniform() * 2.0 * std::numbers::pi;
      const double stroke = 1.0 + 0.6 * rng.uniform();
      const double aux = 2.5 + 2.0 * rng.uniform();  // stripe period / cell
      const double fg = sp.fg_lo + (sp.fg_hi - sp.fg_lo) * rng.uniform();
      const double bg = sp.bg_lo + (sp.bg_hi - sp.bg_lo) * rng.uniform();
      const double ta = rng.uniform() * 2.0 * std::numbers::pi;
      const double tfx = 0.5 + rng.uniform();
      const double tfy = 0.5 + rng.uniform();
      Tensor img = Tensor::zeros({hw, hw, 1});
      for (size_t y = 0; y < hw; ++y) {
        for (size_t x = 0; x < hw; ++x) {
          const double m = shapes_detail::shape_membership(
              families[ci], static_cast<double>(x), static_cast<double>(y), cx,
              cy, r, rot, stroke, aux);
          const double texture =
              sp.texture_amp * std::sin(tfx * x + tfy * y + ta);
          double p = bg + texture + (fg - bg) * m;
          p += sp.noise_std * rng.normal();
          p = std::clamp(p, 0.0, 1.0);
          img.data[y * hw + x] = std::pow(p, sp.gamma);
        }
      }
      snap_to_f32(img);
      ds.labels.push_back(static_cast<uint16_t>(ci));
      ds.images.push_back(std::move(img));
    }
  }
  return ds;
}

// --------------------------- container format -----------------------------

inline constexpr uint32_t kDatasetVersion = 1;

inline std::vector<uint8_t> encode_dataset(const Dataset& ds) {
  ByteWriter w;
  w.magic("SADT");
  w.u32(kDatasetVersion);
  w.u32(static_cast<uint32_t>(ds.size()));
  w.u16(static_cast<uint16_t>(ds.height));
  w.u16(static_cast<uint16_t>(ds.width));
  w.u16(static_cast<uint16_t>(ds.channels));
  w.u16(ds.class_count);
  for (size_t i = 0; i < ds.size(); ++i) {
    w.u16(ds.labels[i]);
    for (double p : ds.images[i].data) w.f32(static_cast<float>(p));
  }
  return w.take();
}

inline Dataset decode_dataset(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("SADT", "dataset");
  const uint32_t version = r.u32();
  if (version != kDatasetVersion)
    throw FormatError("dataset: unsupported version " + std::to_string(version),
                      r.offset() - 4);
  const uint32_t count = r.u32();
  Dataset ds;
  ds.height = r.u16();
  ds.width = r.u16();
  ds.channels = r.u16();
  ds.class_count = r.u16();
  if (ds.height == 0 || ds.width == 0 || ds.channels == 0)
    throw FormatError("dataset: zero dimension in header", r.offset());
  const size_t pixels = ds.height * ds.width * ds.channels;
  const size_t expect = r.offset() + count * (2 + 4 * pixels);
  if (bytes.size() != expect)
    throw FormatError("dataset: file length " + std::to_string(bytes.size()) +
                          ", header implies " + std::to_string(expect),
                      r.offset());
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t label = r.u16();
    if (ds.class_count && label >= ds.class_count)
      throw FormatError("dataset: label out of range", r.offset() - 2);
    Tensor img = Tensor::zeros({ds.height, ds.width, ds.channels});
    for (size_t p = 0; p < pixels; ++p)
      img.data[p] = static_cast<double>(r.f32());
    ds.labels.push_back(label);
    ds.images.push_back(std::move(img));
  }
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  write_file_atomic(path, encode_dataset(ds));
}

inline Dataset read_dataset(const std::string& path) {
  return decode_dataset(read_file_bytes(path));
}

// 8-bit binary PGM for eyeballing images.
inline void write_pgm(const Tensor& img, const std::string& path) {
  const size_t h = img.shape.at(0), w = img.shape.at(1);
  std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) +
                       "\n255\n";
  std::vector<uint8_t> bytes(header.begin(), header.end());
  const size_t ch = img.shape.size() >= 3 ? img.shape[2] : 1;
  for (size_t i = 0; i < h * w; ++i) {
    const double v = std::clamp(img.data[i * ch], 0.0, 1.0);
    bytes.push_back(static_cast<uint8_t>(std::lround(v * 255.0)));
  }
  write_file_atomic(path, bytes);
}

// ----------------------------- sampling -----------------------------------

inline std::vector<std::vector<size_t>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<size_t>> by_class(ds.class_count);
  for (size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  return by_class;
}

// Shots per class, drawn without replacement.
inline Dataset sample_few_shot(const Dataset& pool, size_t shots, Rng& rng) {
  Dataset out;
  out.height = pool.height;
  out.width = pool.width;
  out.channels = pool.channels;
  out.class_count = pool.class_count;
  for (const auto& idx : indices_by_class(pool)) {
    if (idx.size() < shots)
      throw ArgumentError("sample_few_shot: class has " +
                          std::to_string(idx.size()) + " samples, need " +
                          std::to_string(shots));
    for (size_t pick : rng.sample_without_replacement(idx.size(), shots)) {
      out.labels.push_back(pool.labels[idx[pick]]);
      out.images.push_back(pool.images[idx[pick]]);
    }
  }
  return out;
}

}  // namespace sa
