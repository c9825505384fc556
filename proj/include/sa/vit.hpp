#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sa/autograd.hpp"
#include "sa/error.hpp"
#include "sa/rng.hpp"
#include "sa/serialize.hpp"
#include "sa/tensor.hpp"

namespace sa {

struct ModelSpec {
  size_t image_size = 16;  // H = W
  size_t channels = 1;
  size_t patch_size = 4;
  size_t embed_dim = 32;
  size_t num_heads = 4;
  size_t mlp_hidden = 64;
  size_t num_layers = 6;
  double layernorm_eps = 1e-5;

  size_t grid() const { return image_size / patch_size; }
  size_t num_patches() const { return grid() * grid(); }
  size_t tokens() const { return num_patches() + 1; }
  size_t patch_dim() const { return patch_size * patch_size * channels; }
  size_t head_dim() const { return embed_dim / num_heads; }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
      throw ConfigError("ModelSpec: patch size must divide image size");
    if (num_heads == 0 || embed_dim % num_heads != 0)
      throw ConfigError("ModelSpec: head count must divide embed dim");
    if (num_layers < 3) throw ConfigError("ModelSpec: need at least 3 layers");
    if (channels == 0 || embed_dim == 0 || mlp_hidden == 0)
      throw ConfigError("ModelSpec: zero dimension");
  }

  // K must satisfy L/2 < K < L
  bool valid_split(size_t k) const {
    return 2 * k > num_layers && k < num_layers;
  }

  bool operator==(const ModelSpec&) const = default;
};

inline void encode_model_spec(ByteWriter& w, const ModelSpec& s) {
  w.u32(static_cast<uint32_t>(s.image_size));
  w.u32(static_cast<uint32_t>(s.channels));
  w.u32(static_cast<uint32_t>(s.patch_size));
  w.u32(static_cast<uint32_t>(s.embed_dim));
  w.u32(static_cast<uint32_t>(s.num_heads));
  w.u32(static_cast<uint32_t>(s.mlp_hidden));
  w.u32(static_cast<uint32_t>(s.num_layers));
  w.f64(s.layernorm_eps);
}

inline ModelSpec decode_model_spec(ByteReader& r) {
  ModelSpec s;
  s.image_size = r.u32();
  s.channels = r.u32();
  s.patch_size = r.u32();
  s.embed_dim = r.u32();
  s.num_heads = r.u32();
  s.mlp_hidden = r.u32();
  s.num_layers = r.u32();
  s.layernorm_eps = r.f64();
  return s;
}

inline uint64_t spec_hash(const ModelSpec& s) {
  ByteWriter w;
  encode_model_spec(w, s);
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (uint8_t b : w.data()) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

struct EmbedParams {
  Param patch_embed;    // P^2 C x d
  Param pos_encoding;   // (N+1) x d
  Param cls_token;      // 1 x d
};

struct LayerParams {
  Param w_q, w_k, w_v, w_o;                         // d x d
  Param w1, b1, w2, b2;                             // MLP
  Param ln1_gain, ln1_bias, ln2_gain, ln2_bias;     // 1 x d
};

inline void collect_layer_params(LayerParams& lp, std::vector<Param*>& out) {
  for (Param* p : {&lp.w_q, &lp.w_k, &lp.w_v, &lp.w_o, &lp.w1, &lp.b1, &lp.w2,
                   &lp.b2, &lp.ln1_gain, &lp.ln1_bias, &lp.ln2_gain,
                   &lp.ln2_bias})
    out.push_back(p);
}

struct VitParams {
  ModelSpec spec;
  EmbedParams embed;
  std::vector<LayerParams> layers;
  Param final_ln_gain, final_ln_bias;

  // declaration order, used by serialization and optimizers
  std::vector<Param*> all_params() {
    std::vector<Param*> out{&embed.patch_embed, &embed.pos_encoding,
                            &embed.cls_token};
    for (LayerParams& lp : layers) collect_layer_params(lp, out);
    out.push_back(&final_ln_gain);
    out.push_back(&final_ln_bias);
    return out;
  }

  std::vector<Param*> backend_params(size_t split) {
    std::vector<Param*> out;
    for (size_t l = split; l < layers.size(); ++l)
      collect_layer_params(layers[l], out);
    out.push_back(&final_ln_gain);
    out.push_back(&final_ln_bias);
    return out;
  }

  std::vector<Param*> frontend_params(size_t split) {
    std::vector<Param*> out{&embed.patch_embed, &embed.pos_encoding,
                            &embed.cls_token};
    for (size_t l = 0; l < split; ++l) collect_layer_params(layers[l], out);
    return out;
  }
};

namespace vit_detail {

inline Param weight(Rng& rng, size_t r, size_t c) {
  Tensor t = Tensor::zeros(r, c);
  for (double& v : t.data) v = rng.truncated_normal(0.02);
  return Param(std::move(t));
}
inline Param zeros_param(size_t r, size_t c) {
  return Param(Tensor::zeros(r, c));
}
inline Param ones_param(size_t r, size_t c) {
  Tensor t = Tensor::zeros(r, c);
  std::fill(t.data.begin(), t.data.end(), 1.0);
  return Param(std::move(t));
}

}  // namespace vit_detail

inline VitParams init_vit(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  using namespace vit_detail;
  Rng rng(seed);
  const size_t d = spec.embed_dim;
  VitParams p;
  p.spec = spec;
  p.embed.patch_embed = weight(rng, spec.patch_dim(), d);
  p.embed.pos_encoding = weight(rng, spec.tokens(), d);
  p.embed.cls_token = weight(rng, 1, d);
  for (size_t l = 0; l < spec.num_layers; ++l) {
    LayerParams lp;
    lp.w_q = weight(rng, d, d);
    lp.w_k = weight(rng, d, d);
    lp.w_v = weight(rng, d, d);
    lp.w_o = weight(rng, d, d);
    lp.w1 = weight(rng, d, spec.mlp_hidden);
    lp.b1 = zeros_param(1, spec.mlp_hidden);
    lp.w2 = weight(rng, spec.mlp_hidden, d);
    lp.b2 = zeros_param(1, d);
    lp.ln1_gain = ones_param(1, d);
    lp.ln1_bias = zeros_param(1, d);
    lp.ln2_gain = ones_param(1, d);
    lp.ln2_bias = zeros_param(1, d);
    p.layers.push_back(std::move(lp));
  }
  p.final_ln_gain = ones_param(1, d);
  p.final_ln_bias = zeros_param(1, d);
  return p;
}

// Task module: linear on the CLS row; optional "wide" two-layer variant.
struct Head {
  size_t in_dim = 0, classes = 0;
  bool wide = false;
  Param w1, b1;  // wide ? d x d : d x classes
  Param w2, b2;  // used only when wide

  std::vector<Param*> all_params() {
    if (wide) return {&w1, &b1, &w2, &b2};
    return {&w1, &b1};
  }
};

inline Head init_head(size_t in_dim, size_t classes, uint64_t seed,
                      bool wide = false) {
  using namespace vit_detail;
  Rng rng(seed);
  Head h;
  h.in_dim = in_dim;
  h.classes = classes;
  h.wide = wide;
  if (wide) {
    h.w1 = weight(rng, in_dim, in_dim);
    h.b1 = zeros_param(1, in_dim);
    h.w2 = weight(rng, in_dim, classes);
    h.b2 = zeros_param(1, classes);
  } else {
    h.w1 = weight(rng, in_dim, classes);
    h.b1 = zeros_param(1, classes);
  }
  return h;
}

// Row-major patch grid; within a patch, pixels row-major with channel inner.
inline Tensor patchify(const Tensor& image, const ModelSpec& spec) {
  const size_t hw = spec.image_size, ch = spec.channels, ps = spec.patch_size;
  if (image.shape.size() < 2 || image.shape[0] != hw || image.shape[1] != hw ||
      (image.shape.size() >= 3 ? image.shape[2] : 1) != ch)
    throw DimensionError("patchify: image " + image.shape_str() +
                         " does not match the model spec");
  const size_t g = spec.grid();
  Tensor out = Tensor::zeros(spec.num_patches(), spec.patch_dim());
  for (size_t py = 0; py < g; ++py)
    for (size_t px = 0; px < g; ++px) {
      const size_t patch = py * g + px;
      for (size_t y = 0; y < ps; ++y)
        for (size_t x = 0; x < ps; ++x)
          for (size_t c = 0; c < ch; ++c)
            out.at(patch, (y * ps + x) * ch + c) =
                image.data[((py * ps + y) * hw + (px * ps + x)) * ch + c];
    }
  return out;
}

// ---------------------------------------------------------------------------
// One forward definition instantiated over two executors, so the plain and
// autograd paths run the same arithmetic in the same order.
// ---------------------------------------------------------------------------

struct PlainOps {
  using V = Tensor;
  V param(Param& p) { return p.value; }
  V input(const Tensor& t) { return t; }
  V matmul(const V& a, const V& b) { return sa::matmul(a, b); }
  V add(const V& a, const V& b) { return sa::add(a, b); }
  V add_row_vector(const V& m, const V& v) { return sa::add_row_vector(m, v); }
  V transpose(const V& a) { return sa::transpose(a); }
  V softmax_rows(const V& a) { return sa::softmax_rows(a); }
  V layer_norm(const V& x, const V& g, const V& b, double eps) {
    return sa::layer_norm(x, g, b, eps);
  }
  V gelu(const V& a) { return sa::gelu(a); }
  V scale(const V& a, double s) { return sa::scale(a, s); }
  V slice_cols(const V& a, size_t c0, size_t c1) {
    return sa::slice_cols(a, c0, c1);
  }
  V concat_cols(const std::vector<V>& parts) {
    std::vector<const Tensor*> ps;
    ps.reserve(parts.size());
    for (const V& p : parts) ps.push_back(&p);
    return sa::concat_cols(ps);
  }
  V concat_rows(const std::vector<V>& parts) {
    std::vector<const Tensor*> ps;
    ps.reserve(parts.size());
    for (const V& p : parts) ps.push_back(&p);
    return sa::concat_rows(ps);
  }
  V take_row(const V& a, size_t i) { return sa::take_row(a, i); }
};

struct GraphOps {
  Graph& g;
  using V = Var;
  V param(Param& p) { return g.param(p); }
  V input(const Tensor& t) { return g.input(t); }
  V matmul(V a, V b) { return g.matmul(a, b); }
  V add(V a, V b) { return g.add(a, b); }
  V add_row_vector(V m, V v) { return g.add_row_vector(m, v); }
  V transpose(V a) { return g.transpose(a); }
  V softmax_rows(V a) { return g.softmax_rows(a); }
  V layer_norm(V x, V gn, V b, double eps) { return g.layer_norm(x, gn, b, eps); }
  V gelu(V a) { return g.gelu(a); }
  V scale(V a, double s) { return g.scale(a, s); }
  V slice_cols(V a, size_t c0, size_t c1) { return g.slice_cols(a, c0, c1); }
  V concat_cols(const std::vector<V>& parts) { return g.concat_cols(parts); }
  V concat_rows(const std::vector<V>& parts) { return g.concat_rows(parts); }
  V take_row(V a, size_t i) { return g.take_row(a, i); }
};

template <class Ops>
typename Ops::V embed_forward(Ops& ops, const Tensor& image, EmbedParams& ep,
                              const ModelSpec& spec) {
  using V = typename Ops::V;
  V patches = ops.input(patchify(image, spec));
  V emb = ops.matmul(patches, ops.param(ep.patch_embed));
  V with_cls = ops.concat_rows({ops.param(ep.cls_token), emb});
  return ops.add(with_cls, ops.param(ep.pos_encoding));
}

template <class Ops>
typename Ops::V encoder_layer_forward(Ops& ops, typename Ops::V x,
                                      LayerParams& lp, const ModelSpec& spec) {
  using V = typename Ops::V;
  V q = ops.matmul(x, ops.param(lp.w_q));
  V k = ops.matmul(x, ops.param(lp.w_k));
  V v = ops.matmul(x, ops.param(lp.w_v));
  const size_t dh = spec.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<V> heads;
  heads.reserve(spec.num_heads);
  for (size_t h = 0; h < spec.num_heads; ++h) {
    V qh = ops.slice_cols(q, h * dh, (h + 1) * dh);
    V kh = ops.slice_cols(k, h * dh, (h + 1) * dh);
    V vh = ops.slice_cols(v, h * dh, (h + 1) * dh);
    V scores = ops.scale(ops.matmul(qh, ops.transpose(kh)), inv_sqrt_dh);
    heads.push_back(ops.matmul(ops.softmax_rows(scores), vh));
  }
  V msa = ops.matmul(ops.concat_cols(heads), ops.param(lp.w_o));
  V z = ops.layer_norm(ops.add(x, msa), ops.param(lp.ln1_gain),
                       ops.param(lp.ln1_bias), spec.layernorm_eps);
  V h1 = ops.gelu(ops.add_row_vector(ops.matmul(z, ops.param(lp.w1)),
                                     ops.param(lp.b1)));
  V mlp = ops.add_row_vector(ops.matmul(h1, ops.param(lp.w2)),
                             ops.param(lp.b2));
  return ops.layer_norm(ops.add(z, mlp), ops.param(lp.ln2_gain),
                        ops.param(lp.ln2_bias), spec.layernorm_eps);
}

// Embedding plus the given encoder layers (frontend when `layers` is 1..K).
template <class Ops>
typename Ops::V frontend_forward(Ops& ops, const Tensor& image, EmbedParams& ep,
                                 std::span<LayerParams> layers,
                                 const ModelSpec& spec) {
  typename Ops::V x = embed_forward(ops, image, ep, spec);
  for (LayerParams& lp : layers) x = encoder_layer_forward(ops, x, lp, spec);
  return x;
}

// Remaining layers plus the final LayerNorm.
template <class Ops>
typename Ops::V backend_forward(Ops& ops, typename Ops::V rep,
                                std::span<LayerParams> layers,
                                Param& final_gain, Param& final_bias,
                                const ModelSpec& spec) {
  typename Ops::V x = rep;
  for (LayerParams& lp : layers) x = encoder_layer_forward(ops, x, lp, spec);
  return ops.layer_norm(x, ops.param(final_gain), ops.param(final_bias),
                        spec.layernorm_eps);
}

template <class Ops>
typename Ops::V head_forward(Ops& ops, typename Ops::V cls_rows, Head& head) {
  using V = typename Ops::V;
  V h = ops.add_row_vector(ops.matmul(cls_rows, ops.param(head.w1)),
                           ops.param(head.b1));
  if (!head.wide) return h;
  return ops.add_row_vector(ops.matmul(ops.gelu(h), ops.param(head.w2)),
                            ops.param(head.b2));
}

// Convenience wrappers over the templates.

inline std::span<LayerParams> frontend_span(VitParams& p, size_t split) {
  return {p.layers.data(), split};
}
inline std::span<LayerParams> backend_span(VitParams& p, size_t split) {
  return {p.layers.data() + split, p.layers.size() - split};
}

inline Tensor vit_frontend(VitParams& p, size_t split, const Tensor& image) {
  PlainOps ops;
  return frontend_forward(ops, image, p.embed, frontend_span(p, split), p.spec);
}

inline Tensor vit_backend(VitParams& p, size_t split, const Tensor& rep) {
  PlainOps ops;
  return backend_forward(ops, rep, backend_span(p, split), p.final_ln_gain,
                         p.final_ln_bias, p.spec);
}

// The unsplit forward is the composition at split = L (all layers in the
// frontend pass, backend contributing the final LN).
inline Tensor vit_full(VitParams& p, const Tensor& image) {
  PlainOps ops;
  Tensor x = frontend_forward(ops, image, p.embed,
                              std::span<LayerParams>(p.layers), p.spec);
  return ops.layer_norm(x, ops.param(p.final_ln_gain),
                        ops.param(p.final_ln_bias), p.spec.layernorm_eps);
}

// CLS rows of backend outputs for a batch of split-layer representations.
inline Tensor backend_cls_batch(VitParams& p, size_t split,
                                std::span<const Tensor> reps) {
  PlainOps ops;
  std::vector<Tensor> rows;
  rows.reserve(reps.size());
  for (const Tensor& r : reps)
    rows.push_back(ops.take_row(vit_backend(p, split, r), 0));
  return ops.concat_rows(rows);
}

inline Tensor model_logits(VitParams& p, Head& head, const Tensor& image) {
  PlainOps ops;
  Tensor out = vit_full(p, image);
  return head_forward(ops, ops.take_row(out, 0), head);
}

inline Tensor model_logits_batch(VitParams& p, Head& head,
                                 std::span<const Tensor> images) {
  PlainOps ops;
  std::vector<Tensor> rows;
  rows.reserve(images.size());
  for (const Tensor& img : images)
    rows.push_back(ops.take_row(vit_full(p, img), 0));
  return head_forward(ops, ops.concat_rows(rows), head);
}

// Tape-building forward of the whole model over an image batch.
inline Var vit_logits_graph(Graph& g, VitParams& p, Head& head,
                            std::span<const Tensor> images) {
  GraphOps ops{g};
  std::vector<Var> cls;
  cls.reserve(images.size());
  for (const Tensor& img : images) {
    Var x = frontend_forward(ops, img, p.embed,
                             std::span<LayerParams>(p.layers), p.spec);
    x = ops.layer_norm(x, ops.param(p.final_ln_gain),
                       ops.param(p.final_ln_bias), p.spec.layernorm_eps);
    cls.push_back(ops.take_row(x, 0));
  }
  return head_forward(ops, ops.concat_rows(cls), head);
}

// Same, but from split-layer representations through the backend only.
inline Var backend_logits_graph(Graph& g, VitParams& p, size_t split,
                                Head& head, std::span<const Tensor> reps) {
  GraphOps ops{g};
  std::vector<Var> cls;
  cls.reserve(reps.size());
  for (const Tensor& r : reps) {
    Var x = backend_forward(ops, ops.input(r), backend_span(p, split),
                            p.final_ln_gain, p.final_ln_bias, p.spec);
    cls.push_back(ops.take_row(x, 0));
  }
  return head_forward(ops, ops.concat_rows(cls), head);
}

// Full forward on one image with handles to every unit output: the embedding
// (unit 0) and each encoder layer. Supports per-unit gradient extraction.
struct TraceVars {
  Var embed_out;
  std::vector<Var> layer_outs;
  Var final_out;
  Var logits;
};

inline TraceVars vit_trace_graph(Graph& g, VitParams& p, Head& head,
                                 const Tensor& image) {
  GraphOps ops{g};
  TraceVars t;
  Var x = embed_forward(ops, image, p.embed, p.spec);
  t.embed_out = x;
  for (LayerParams& lp : p.layers) {
    x = encoder_layer_forward(ops, x, lp, p.spec);
    t.layer_outs.push_back(x);
  }
  t.final_out = ops.layer_norm(x, ops.param(p.final_ln_gain),
                               ops.param(p.final_ln_bias), p.spec.layernorm_eps);
  t.logits = head_forward(ops, ops.take_row(t.final_out, 0), head);
  return t;
}

// Argmax with ties broken toward the lowest class index.
inline int argmax_row(const Tensor& logits, size_t row = 0) {
  int best = 0;
  double best_v = logits.at(row, 0);
  for (size_t j = 1; j < logits.cols(); ++j)
    if (logits.at(row, j) > best_v) {
      best_v = logits.at(row, j);
      best = static_cast<int>(j);
    }
  return best;
}

// ------------------------------ checkpoints --------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

inline std::vector<uint8_t> encode_vit(VitParams& p) {
  ByteWriter w;
  w.magic("SAVT");
  w.u32(kCheckpointVersion);
  encode_model_spec(w, p.spec);
  for (Param* t : p.all_params())
    for (double v : t->value.data) w.f64(v);
  return w.take();
}

inline VitParams decode_vit(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("SAVT", "checkpoint");
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version", r.offset() - 4);
  ModelSpec spec = decode_model_spec(r);
  spec.validate();
  VitParams p = init_vit(spec, 0);
  for (Param* t : p.all_params())
    for (double& v : t->value.data) v = r.f64();
  if (!r.done())
    throw FormatError("checkpoint: trailing bytes", r.offset());
  return p;
}

inline void write_vit(VitParams& p, const std::string& path) {
  write_file_atomic(path, encode_vit(p));
}
inline VitParams read_vit(const std::string& path) {
  return decode_vit(read_file_bytes(path));
}

inline constexpr uint32_t kHeadVersion = 1;

inline std::vector<uint8_t> encode_head(Head& h) {
  ByteWriter w;
  w.magic("SAHD");
  w.u32(kHeadVersion);
  w.u32(static_cast<uint32_t>(h.in_dim));
  w.u32(static_cast<uint32_t>(h.classes));
  w.u8(h.wide ? 1 : 0);
  for (Param* t : h.all_params())
    for (double v : t->value.data) w.f64(v);
  return w.take();
}

inline Head decode_head(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("SAHD", "head");
  const uint32_t version = r.u32();
  if (version != kHeadVersion)
    throw FormatError("head: unsupported version", r.offset() - 4);
  const size_t in_dim = r.u32();
  const size_t classes = r.u32();
  const bool wide = r.u8() != 0;
  Head h = init_head(in_dim, classes, 0, wide);
  for (Param* t : h.all_params())
    for (double& v : t->value.data) v = r.f64();
  if (!r.done()) throw FormatError("head: trailing bytes", r.offset());
  return h;
}

inline void write_head(Head& h, const std::string& path) {
  write_file_atomic(path, encode_head(h));
}
inline Head read_head(const std::string& path) {
  return decode_head(read_file_bytes(path));
}

}  // namespace sa
