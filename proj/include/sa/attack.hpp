#pragma once

// Representation inversion. A decoder maps uploaded token representations
// back to pixels: a per-token linear projection into patch space, then two
// dense refinement layers over the flattened image, sigmoid output. It is
// trained on the operator's own data and applied to captured uploads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sa/autograd.hpp"
#include "sa/error.hpp"
#include "sa/image_metrics.hpp"
#include "sa/protocol.hpp"
#include "sa/quantize.hpp"
#include "sa/rng.hpp"
#include "sa/serialize.hpp"
#include "sa/tensor.hpp"
#include "sa/vit.hpp"

namespace sa {

// Inverse of patchify: a num_patches x patch_dim grid back to an image.
inline Tensor unpatchify(const Tensor& patches, const ModelSpec& spec) {
  if (patches.rows() != spec.num_patches() || patches.cols() != spec.patch_dim())
    throw DimensionError("unpatchify: patch grid does not match the model spec");
  const size_t hw = spec.image_size, ch = spec.channels, ps = spec.patch_size;
  const size_t g = spec.grid();
  Tensor img = Tensor::zeros({hw, hw, ch});
  for (size_t py = 0; py < g; ++py)
    for (size_t px = 0; px < g; ++px)
      for (size_t y = 0; y < ps; ++y)
        for (size_t x = 0; x < ps; ++x)
          for (size_t c = 0; c < ch; ++c)
            img.data[((py * ps + y) * hw + (px * ps + x)) * ch + c] =
                patches.at(py * g + px, (y * ps + x) * ch + c);
  return img;
}

// patchify flattened row-major into a single row; this is the pixel order
// the decoder produces.
inline Tensor flat_patches(const Tensor& image, const ModelSpec& spec) {
  Tensor p = patchify(image, spec);
  const size_t flat = p.data.size();
  return Tensor({1, flat}, std::move(p.data));
}

inline Tensor row_to_image(const Tensor& row, const ModelSpec& spec) {
  const size_t flat = spec.num_patches() * spec.patch_dim();
  if (row.numel() != flat)
    throw DimensionError("row_to_image: wrong pixel count");
  Tensor p({spec.num_patches(), spec.patch_dim()}, row.data);
  return unpatchify(p, spec);
}

struct InverseDecoder {
  ModelSpec spec;
  Param w_patch, b_patch;  // embed_dim -> patch_dim, applied per token
  Param w_h, b_h;          // flat -> flat
  Param w_o, b_o;          // flat -> flat

  size_t flat_dim() const { return spec.num_patches() * spec.patch_dim(); }
  std::vector<Param*> all_params() {
    return {&w_patch, &b_patch, &w_h, &b_h, &w_o, &b_o};
  }
};

inline InverseDecoder init_decoder(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  using namespace vit_detail;
  Rng rng(seed);
  InverseDecoder dec;
  dec.spec = spec;
  dec.w_patch = weight(rng, spec.embed_dim, spec.patch_dim());
  dec.b_patch = zeros_param(1, spec.patch_dim());
  const size_t f = dec.flat_dim();
  dec.w_h = weight(rng, f, f);
  dec.b_h = zeros_param(1, f);
  dec.w_o = weight(rng, f, f);
  dec.b_o = zeros_param(1, f);
  return dec;
}

struct DecoderVars {
  Var w_patch, b_patch, w_h, b_h, w_o, b_o;
};

inline DecoderVars register_decoder(Graph& g, InverseDecoder& dec) {
  return {g.param(dec.w_patch), g.param(dec.b_patch), g.param(dec.w_h),
          g.param(dec.b_h),     g.param(dec.w_o),     g.param(dec.b_o)};
}

// One representation (tokens x embed_dim, CLS first) to a 1 x flat pixel
// row in [0, 1]. The CLS token carries no spatial content and is dropped.
inline Var decoder_row(Graph& g, const DecoderVars& v, const ModelSpec& spec,
                       const Tensor& rep) {
  if (rep.rows() != spec.tokens() || rep.cols() != spec.embed_dim)
    throw DimensionError("decoder_row: representation does not match the spec");
  const size_t np = spec.num_patches();
  Tensor tok = Tensor::zeros(np, spec.embed_dim);
  std::copy(rep.data.begin() + static_cast<long>(spec.embed_dim),
            rep.data.end(), tok.data.begin());
  Var t = g.input(std::move(tok));
  Var p = g.add_row_vector(g.matmul(t, v.w_patch), v.b_patch);
  std::vector<Var> rows;
  rows.reserve(np);
  for (size_t i = 0; i < np; ++i) rows.push_back(g.take_row(p, i));
  Var flat = g.concat_cols(rows);
  Var h = g.gelu(g.add_row_vector(g.matmul(flat, v.w_h), v.b_h));
  return g.sigmoid(g.add_row_vector(g.matmul(h, v.w_o), v.b_o));
}

inline Tensor reconstruct_image(InverseDecoder& dec, const Tensor& rep) {
  Graph g;
  DecoderVars v = register_decoder(g, dec);
  Var o = decoder_row(g, v, dec.spec, rep);
  return row_to_image(g.value(o), dec.spec);
}

struct DecoderTrainConfig {
  size_t epochs = 40;
  double lr = 1e-3;
  size_t batch = 8;
  uint64_t seed = 1;

  void validate() const {
    if (lr <= 0.0) throw ConfigError("decoder lr must be positive");
    if (batch == 0) throw ConfigError("decoder batch must be at least 1");
  }
};

// Fits the decoder by mean squared error in patch space (same pixel set as
// image space, so the objective is the image-space MSE). Returns the mean
// error per epoch.
inline std::vector<double> train_decoder(InverseDecoder& dec,
                                         std::span<const Tensor> reps,
                                         std::span<const Tensor> images,
                                         const DecoderTrainConfig& cfg) {
  cfg.validate();
  if (reps.size() != images.size())
    throw ArgumentError("train_decoder: reps and images differ in count");
  if (reps.empty()) throw ArgumentError("train_decoder: no training pairs");

  const size_t n = reps.size();
  const size_t flat = dec.flat_dim();
  std::vector<Tensor> targets;
  targets.reserve(n);
  for (const Tensor& im : images) targets.push_back(flat_patches(im, dec.spec));

  std::vector<Param*> params = dec.all_params();
  AdamOptimizer opt(params, cfg.lr);
  Rng order_rng(cfg.seed);
  std::vector<double> losses;
  losses.reserve(cfg.epochs);
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<size_t> order = order_rng.permutation(n);
    double epoch_loss = 0.0;
    for (size_t at = 0; at < n;) {
      const size_t take = std::min(cfg.batch, n - at);
      Graph g;
      DecoderVars v = register_decoder(g, dec);
      std::vector<Var> outs;
      outs.reserve(take);
      Tensor want = Tensor::zeros(take, flat);
      for (size_t b = 0; b < take; ++b) {
        const size_t idx = order[at + b];
        outs.push_back(decoder_row(g, v, dec.spec, reps[idx]));
        std::copy(targets[idx].data.begin(), targets[idx].data.end(),
                  want.data.begin() + static_cast<long>(b * flat));
      }
      Var out = g.concat_rows(outs);
      Var diff = g.sub(out, g.input(std::move(want)));
      Var loss = g.scale(g.sum(g.hadamard(diff, diff)),
                         1.0 / static_cast<double>(take * flat));
      const double lv = g.value(loss).data[0];
      if (!std::isfinite(lv)) throw TrainingError("decoder training diverged");
      g.backward(loss);
      opt.step();
      opt.zero_grad();
      epoch_loss += lv * static_cast<double>(take);
      at += take;
    }
    losses.push_back(epoch_loss / static_cast<double>(n));
  }
  return losses;
}

struct AttackScore {
  double mean_ssim = 0.0;
  double mean_psnr = 0.0;
  std::vector<double> ssim_per_image;
  std::vector<double> psnr_per_image;
};

// Reconstructs every representation and scores it against the matching
// ground-truth image.
inline AttackScore reconstruct_and_score(InverseDecoder& dec,
                                         std::span<const Tensor> reps,
                                         std::span<const Tensor> images,
                                         size_t window = 7) {
  if (reps.size() != images.size())
    throw ArgumentError("reconstruct_and_score: reps and images differ in count");
  if (reps.empty()) throw ArgumentError("reconstruct_and_score: nothing to score");
  AttackScore sc;
  for (size_t i = 0; i < reps.size(); ++i) {
    const Tensor rec = reconstruct_image(dec, reps[i]);
    sc.ssim_per_image.push_back(ssim(rec, images[i], window));
    sc.psnr_per_image.push_back(psnr(rec, images[i]));
    sc.mean_ssim += sc.ssim_per_image.back();
    sc.mean_psnr += sc.psnr_per_image.back();
  }
  sc.mean_ssim /= static_cast<double>(reps.size());
  sc.mean_psnr /= static_cast<double>(reps.size());
  return sc;
}

// Every uploaded code batch in a wiretap dump, decoded at the advertised
// step size. This is exactly what a listener on the wire can recover.
inline std::vector<Tensor> reps_from_dump(const std::string& path,
                                          const ModelSpec& spec) {
  std::vector<Tensor> out;
  for (const Message& m : read_wiretap_dump(path)) {
    if (m.tag != Tag::RepUpload) continue;
    const CodeBatch cb = decode_code_batch(m.payload);
    if (cb.tokens != spec.tokens() || cb.dim != spec.embed_dim)
      throw FormatError("reps_from_dump: geometry does not match the spec", 0);
    for (const std::vector<int8_t>& codes : cb.codes)
      out.push_back(codes_to_rep(codes, spec, cb.delta));
  }
  return out;
}

// 8-bit binary PPM for three-channel images, pixels clamped to [0, 1].
// The single-channel companion is write_pgm.
inline void write_ppm(const Tensor& img, const std::string& path) {
  if (img.shape.size() < 3 || img.shape[2] != 3)
    throw ArgumentError("write_ppm: need an H x W x 3 image");
  const size_t h = img.shape[0], w = img.shape[1];
  std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) +
                       "\n255\n";
  std::vector<uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + img.data.size());
  for (double v : img.data) {
    const double c = std::clamp(v, 0.0, 1.0);
    bytes.push_back(static_cast<uint8_t>(std::lround(c * 255.0)));
  }
  write_file_atomic(path, bytes);
}

}  // namespace sa
