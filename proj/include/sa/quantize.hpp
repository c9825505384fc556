#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sa/error.hpp"
#include "sa/serialize.hpp"
#include "sa/tensor.hpp"
#include "sa/vit.hpp"

namespace sa {

inline void check_bits(int bits) {
  if (bits < 2 || bits > 8)
    throw ArgumentError("bit width must be in [2,8], got " +
                        std::to_string(bits));
}

inline int code_min(int bits) { return -(1 << (bits - 1)); }
inline int code_max(int bits) { return (1 << (bits - 1)) - 1; }

// clamp(round(w/delta), -2^(k-1), 2^(k-1)-1); round half away from zero
inline int quantize_value(double w, double delta, int bits) {
  check_bits(bits);
  if (!(delta > 0.0)) throw ArgumentError("quantize_value: delta must be > 0");
  const double r = std::round(w / delta);
  const double lo = static_cast<double>(code_min(bits));
  const double hi = static_cast<double>(code_max(bits));
  return static_cast<int>(std::min(hi, std::max(lo, r)));
}

inline double dequantize_value(int code, double delta) {
  if (!(delta > 0.0)) throw ArgumentError("dequantize_value: delta must be > 0");
  return static_cast<double>(code) * delta;
}

inline std::vector<int8_t> quantize_tensor(const Tensor& t, double delta,
                                           int bits) {
  std::vector<int8_t> codes;
  codes.reserve(t.data.size());
  for (double v : t.data)
    codes.push_back(static_cast<int8_t>(quantize_value(v, delta, bits)));
  return codes;
}

inline Tensor dequantize_tensor(std::span<const int8_t> codes,
                                const std::vector<size_t>& shape, double delta) {
  Tensor t;
  t.shape = shape;
  t.data.reserve(codes.size());
  for (int8_t c : codes) t.data.push_back(dequantize_value(c, delta));
  if (t.numel() != t.data.size())
    throw DimensionError("dequantize_tensor: shape does not match code count");
  return t;
}

// Quantize-then-dequantize through the same code path the wire format uses,
// so simulated quantization and stored codes agree bitwise.
inline Tensor fake_quantize(const Tensor& t, double delta, int bits) {
  return dequantize_tensor(quantize_tensor(t, delta, bits), t.shape, delta);
}

inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data) m = std::max(m, std::abs(v));
  return m;
}

// Candidate scales beta * amax / (2^(k-1)-1), beta in {0.50, 0.52, ..., 1.20}.
inline std::vector<double> scale_grid(double amax, int bits) {
  check_bits(bits);
  std::vector<double> grid;
  grid.reserve(36);
  for (int i = 0; i < 36; ++i) {
    const double beta = 0.50 + 0.02 * static_cast<double>(i);
    grid.push_back(beta * amax / static_cast<double>(code_max(bits)));
  }
  return grid;
}

// Grid argmin with the smallest candidate winning ties.
inline double search_scale(const std::vector<double>& grid,
                           const std::function<double(double)>& objective_at) {
  if (grid.empty()) throw ArgumentError("search_scale: empty candidate grid");
  double best_delta = 0.0;
  double best_obj = 0.0;
  bool first = true;
  for (double delta : grid) {
    const double obj = objective_at(delta);
    if (first || obj < best_obj ||
        (obj == best_obj && delta < best_delta)) {
      best_obj = obj;
      best_delta = delta;
      first = false;
    }
  }
  return best_delta;
}

// Mean over the batch of (xhat - x)' diag(g o g) (xhat - x).
inline double reconstruction_objective(std::span<const Tensor> xhat,
                                       std::span<const Tensor> xref,
                                       std::span<const Tensor> grad) {
  if (xhat.empty() || xhat.size() != xref.size() || xref.size() != grad.size())
    throw ArgumentError("reconstruction_objective: batch mismatch");
  double total = 0.0;
  for (size_t i = 0; i < xhat.size(); ++i) {
    check_same_shape(xhat[i], xref[i], "reconstruction_objective");
    check_same_shape(grad[i], xref[i], "reconstruction_objective");
    for (size_t j = 0; j < xref[i].data.size(); ++j) {
      const double d = xhat[i].data[j] - xref[i].data[j];
      const double g = grad[i].data[j];
      total += g * g * d * d;
    }
  }
  return total / static_cast<double>(xhat.size());
}

// ---------------------------------------------------------------------------
// Quantized frontend: codes + scales, with a dequantized working copy that
// the fake-quant forward runs on. Units are the embedding (unit 0) and the
// first `split` encoder layers; unit tensors follow declaration order.
// ---------------------------------------------------------------------------

struct QuantizedFrontend {
  ModelSpec spec;
  size_t split = 0;
  int bits = 8;
  uint64_t model_hash = 0;

  EmbedParams embed;                       // dequantized values
  std::vector<LayerParams> layers;         // dequantized values, size = split
  std::vector<std::vector<int8_t>> codes;  // 3 + 12*split tensors
  std::vector<double> weight_scales;
  std::vector<double> act_scales;          // per layer; entry split-1 is delta_K

  double delta_k() const { return act_scales.at(split - 1); }

  std::vector<Param*> tensor_order() {
    std::vector<Param*> out{&embed.patch_embed, &embed.pos_encoding,
                            &embed.cls_token};
    for (LayerParams& lp : layers) collect_layer_params(lp, out);
    return out;
  }
};

// Split-layer output -> wire codes and back.
inline std::vector<int8_t> rep_to_codes(const Tensor& rep, double delta,
                                        int bits) {
  return quantize_tensor(rep, delta, bits);
}
inline Tensor codes_to_rep(std::span<const int8_t> codes, const ModelSpec& spec,
                           double delta) {
  return dequantize_tensor(codes, {spec.tokens(), spec.embed_dim}, delta);
}

// Fake-quant forward: dequantized weights, activations re-coded at each
// encoder layer output (scale 0 marks a not-yet-searched layer, left float).
inline Tensor quantized_frontend_forward(QuantizedFrontend& qf,
                                         const Tensor& image,
                                         size_t stop_after_layers) {
  PlainOps ops;
  Tensor x = embed_forward(ops, image, qf.embed, qf.spec);
  for (size_t l = 0; l < stop_after_layers; ++l) {
    x = encoder_layer_forward(ops, x, qf.layers[l], qf.spec);
    if (qf.act_scales[l] > 0.0)
      x = fake_quantize(x, qf.act_scales[l], qf.bits);
  }
  return x;
}

inline Tensor quantized_frontend_forward(QuantizedFrontend& qf,
                                         const Tensor& image) {
  return quantized_frontend_forward(qf, image, qf.split);
}

// ---------------------------------------------------------------------------
// Calibration: per-sample float references and loss gradients at every unit
// output, obtained from the float model with the server task head.
// ---------------------------------------------------------------------------

struct CalibrationData {
  std::vector<Tensor> images;
  std::vector<int> labels;
  // [sample][unit], unit 0 = embedding output, unit u = layer u output
  std::vector<std::vector<Tensor>> refs;
  std::vector<std::vector<Tensor>> grads;
};

inline CalibrationData build_calibration(VitParams& model, Head& head,
                                         size_t split,
                                         std::span<const Tensor> images,
                                         std::span<const int> labels) {
  if (images.empty()) throw ArgumentError("build_calibration: empty batch");
  if (images.size() != labels.size())
    throw ArgumentError("build_calibration: image/label count mismatch");
  CalibrationData cal;
  cal.images.assign(images.begin(), images.end());
  cal.labels.assign(labels.begin(), labels.end());
  for (size_t i = 0; i < images.size(); ++i) {
    Graph g;
    TraceVars t = vit_trace_graph(g, model, head, images[i]);
    Var loss = g.cross_entropy(t.logits, {labels[i]});
    g.backward(loss);
    std::vector<Tensor> refs{g.value(t.embed_out)};
    std::vector<Tensor> grads{g.grad(t.embed_out)};
    for (size_t u = 0; u < split; ++u) {
      refs.push_back(g.value(t.layer_outs[u]));
      grads.push_back(g.grad(t.layer_outs[u]));
    }
    cal.refs.push_back(std::move(refs));
    cal.grads.push_back(std::move(grads));
    for (Param* p : model.all_params()) p->zero_grad();
    for (Param* p : head.all_params()) p->zero_grad();
  }
  return cal;
}

// ---------------------------------------------------------------------------
// Per-unit search context: inputs under the partially quantized state, float
// references, and gradient weights for the Eq.-8-style objective. The
// objective functions below are what both the production search and the
// brute-force oracle in the tests evaluate.
// ---------------------------------------------------------------------------

struct UnitContext {
  QuantizedFrontend* qf = nullptr;
  const CalibrationData* cal = nullptr;
  size_t unit = 0;                // 0 = embedding, u >= 1 = layer u
  std::vector<Tensor> inputs;     // unused for unit 0 (images are the input)
};

inline UnitContext build_unit_context(QuantizedFrontend& qf,
                                      const CalibrationData& cal, size_t unit) {
  UnitContext ctx;
  ctx.qf = &qf;
  ctx.cal = &cal;
  ctx.unit = unit;
  if (unit > 0)
    for (const Tensor& img : cal.images)
      ctx.inputs.push_back(quantized_frontend_forward(qf, img, unit - 1));
  return ctx;
}

namespace quant_detail {

// Unit forward for every calibration sample with the current working values.
inline std::vector<Tensor> unit_outputs(const UnitContext& ctx) {
  QuantizedFrontend& qf = *ctx.qf;
  std::vector<Tensor> outs;
  outs.reserve(ctx.cal->images.size());
  PlainOps ops;
  if (ctx.unit == 0) {
    for (const Tensor& img : ctx.cal->images)
      outs.push_back(embed_forward(ops, img, qf.embed, qf.spec));
  } else {
    LayerParams& lp = qf.layers[ctx.unit - 1];
    for (const Tensor& in : ctx.inputs)
      outs.push_back(encoder_layer_forward(ops, in, lp, qf.spec));
  }
  return outs;
}

inline double objective_against_refs(const UnitContext& ctx,
                                     std::span<const Tensor> outs) {
  std::vector<Tensor> refs, grads;
  for (size_t i = 0; i < ctx.cal->images.size(); ++i) {
    refs.push_back(ctx.cal->refs[i][ctx.unit]);
    grads.push_back(ctx.cal->grads[i][ctx.unit]);
  }
  return reconstruction_objective(outs, refs, grads);
}

}  // namespace quant_detail

// Objective for quantizing one weight tensor of the unit at scale `delta`,
// holding every other working value fixed. Activation quantization of this
// unit is off while its weights are searched.
inline double unit_objective_weight(UnitContext& ctx, Param& tensor,
                                    const Tensor& float_values, double delta) {
  tensor.value = fake_quantize(float_values, delta, ctx.qf->bits);
  std::vector<Tensor> outs = quant_detail::unit_outputs(ctx);
  const double obj = quant_detail::objective_against_refs(ctx, outs);
  tensor.value = float_values;
  return obj;
}

// Objective for the unit's activation scale, weights already committed.
inline double unit_objective_activation(UnitContext& ctx, double delta) {
  std::vector<Tensor> outs = quant_detail::unit_outputs(ctx);
  for (Tensor& o : outs) o = fake_quantize(o, delta, ctx.qf->bits);
  return quant_detail::objective_against_refs(ctx, outs);
}

// Optional observers fired at each scale decision, before committing. They
// see the exact working state the search saw, so an outside check can rerun
// the candidate sweep and compare.
struct SearchTrace {
  std::function<void(UnitContext&, Param&, const Tensor& float_values,
                     const std::vector<double>& grid, double chosen)>
      on_weight;
  std::function<void(UnitContext&, const std::vector<double>& grid,
                     double chosen)>
      on_activation;
};

// ---------------------------------------------------------------------------
// Full frontend quantization: sequential over units, per-tensor weight scale
// search then the unit's activation scale, committing codes as it goes.
// ---------------------------------------------------------------------------

inline QuantizedFrontend quantize_frontend(VitParams& model, Head& server_head,
                                           size_t split, int bits,
                                           std::span<const Tensor> calib_images,
                                           std::span<const int> calib_labels,
                                           const SearchTrace* trace = nullptr) {
  check_bits(bits);
  model.spec.validate();
  if (!model.spec.valid_split(split))
    throw ConfigError("quantize_frontend: invalid split " +
                      std::to_string(split));

  QuantizedFrontend qf;
  qf.spec = model.spec;
  qf.split = split;
  qf.bits = bits;
  qf.model_hash = spec_hash(model.spec);
  qf.embed.patch_embed = Param(model.embed.patch_embed.value);
  qf.embed.pos_encoding = Param(model.embed.pos_encoding.value);
  qf.embed.cls_token = Param(model.embed.cls_token.value);
  for (size_t l = 0; l < split; ++l) qf.layers.push_back(model.layers[l]);
  qf.act_scales.assign(split, 0.0);

  CalibrationData cal =
      build_calibration(model, server_head, split, calib_images, calib_labels);

  for (size_t unit = 0; unit <= split; ++unit) {
    UnitContext ctx = build_unit_context(qf, cal, unit);
    std::vector<Param*> tensors;
    if (unit == 0) {
      tensors = {&qf.embed.patch_embed, &qf.embed.pos_encoding,
                 &qf.embed.cls_token};
    } else {
      collect_layer_params(qf.layers[unit - 1], tensors);
    }
    for (Param* t : tensors) {
      const Tensor float_values = t->value;
      const double amax = max_abs(float_values);
      double delta;
      if (amax == 0.0) {
        delta = 1.0;  // all codes zero; any positive scale is exact
      } else {
        const std::vector<double> grid = scale_grid(amax, bits);
        delta = search_scale(grid, [&](double d) {
          return unit_objective_weight(ctx, *t, float_values, d);
        });
        if (trace && trace->on_weight)
          trace->on_weight(ctx, *t, float_values, grid, delta);
      }
      qf.codes.push_back(quantize_tensor(float_values, delta, bits));
      qf.weight_scales.push_back(delta);
      t->value = dequantize_tensor(qf.codes.back(), float_values.shape, delta);
    }
    if (unit > 0) {
      // activation scale for this layer's output, weights now committed
      std::vector<Tensor> outs = quant_detail::unit_outputs(ctx);
      double amax = 0.0;
      for (const Tensor& o : outs) amax = std::max(amax, max_abs(o));
      if (amax == 0.0) {
        qf.act_scales[unit - 1] = 1.0;
      } else {
        const std::vector<double> grid = scale_grid(amax, bits);
        qf.act_scales[unit - 1] = search_scale(grid, [&](double d) {
          return unit_objective_activation(ctx, d);
        });
        if (trace && trace->on_activation)
          trace->on_activation(ctx, grid, qf.act_scales[unit - 1]);
      }
    }
  }
  return qf;
}

// ------------------------- package serialization ---------------------------

inline constexpr uint32_t kFrontendPackageVersion = 1;

inline std::vector<uint8_t> encode_quantized_frontend(QuantizedFrontend& qf) {
  ByteWriter w;
  w.magic("SAQF");
  w.u32(kFrontendPackageVersion);
  encode_model_spec(w, qf.spec);
  w.u32(static_cast<uint32_t>(qf.split));
  w.u8(static_cast<uint8_t>(qf.bits));
  w.u64(qf.model_hash);
  w.u32(static_cast<uint32_t>(qf.codes.size()));
  for (size_t t = 0; t < qf.codes.size(); ++t) {
    w.f64(qf.weight_scales[t]);
    w.u32(static_cast<uint32_t>(qf.codes[t].size()));
    for (int8_t c : qf.codes[t]) w.u8(static_cast<uint8_t>(c));
  }
  for (double d : qf.act_scales) w.f64(d);
  return w.take();
}

inline QuantizedFrontend decode_quantized_frontend(
    std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("SAQF", "frontend package");
  const uint32_t version = r.u32();
  if (version != kFrontendPackageVersion)
    throw FormatError("frontend package: unsupported version", r.offset() - 4);
  QuantizedFrontend qf;
  qf.spec = decode_model_spec(r);
  qf.spec.validate();
  qf.split = r.u32();
  qf.bits = r.u8();
  check_bits(qf.bits);
  if (!qf.spec.valid_split(qf.split))
    throw FormatError("frontend package: invalid split", r.offset());
  qf.model_hash = r.u64();
  const uint32_t tensor_count = r.u32();
  if (tensor_count != 3 + 12 * qf.split)
    throw FormatError("frontend package: tensor count mismatch", r.offset() - 4);
  for (uint32_t t = 0; t < tensor_count; ++t) {
    const double scale = r.f64();
    if (!(scale > 0.0))
      throw FormatError("frontend package: nonpositive scale", r.offset() - 8);
    const uint32_t n = r.u32();
    std::vector<int8_t> codes;
    codes.reserve(n);
    for (uint32_t i = 0; i < n; ++i)
      codes.push_back(static_cast<int8_t>(r.u8()));
    qf.codes.push_back(std::move(codes));
    qf.weight_scales.push_back(scale);
  }
  for (size_t l = 0; l < qf.split; ++l) {
    const double d = r.f64();
    if (!(d > 0.0))
      throw FormatError("frontend package: nonpositive activation scale",
                        r.offset() - 8);
    qf.act_scales.push_back(d);
  }
  if (!r.done()) throw FormatError("frontend package: trailing bytes", r.offset());

  // materialize the dequantized working copy from codes, the same path the
  // sender used, so both sides run bit-identical forwards
  const size_t d = qf.spec.embed_dim;
  const size_t mlp = qf.spec.mlp_hidden;
  std::vector<std::vector<size_t>> shapes{
      {qf.spec.patch_dim(), d}, {qf.spec.tokens(), d}, {size_t{1}, d}};
  for (size_t l = 0; l < qf.split; ++l) {
    for (int i = 0; i < 4; ++i) shapes.push_back({d, d});
    shapes.push_back({d, mlp});
    shapes.push_back({size_t{1}, mlp});
    shapes.push_back({mlp, d});
    shapes.push_back({size_t{1}, d});
    for (int i = 0; i < 4; ++i) shapes.push_back({size_t{1}, d});
  }
  qf.layers.resize(qf.split);
  std::vector<Param*> order = qf.tensor_order();
  for (size_t t = 0; t < order.size(); ++t) {
    const size_t expect = shapes[t][0] * shapes[t][1];
    if (qf.codes[t].size() != expect)
      throw FormatError("frontend package: tensor " + std::to_string(t) +
                            " has " + std::to_string(qf.codes[t].size()) +
                            " codes, expected " + std::to_string(expect),
                        0);
    *order[t] = Param(
        dequantize_tensor(qf.codes[t], shapes[t], qf.weight_scales[t]));
  }
  return qf;
}

}  // namespace sa
