#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "sa/dataset.hpp"
#include "sa/quantize.hpp"
#include "sa/rng.hpp"
#include "sa/vit.hpp"

using namespace sa;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.image_size = 8;
  s.channels = 1;
  s.patch_size = 4;
  s.embed_dim = 8;
  s.num_heads = 2;
  s.mlp_hidden = 16;
  s.num_layers = 3;
  return s;
}

struct CalibBatch {
  std::vector<Tensor> images;
  std::vector<int> labels;
};

CalibBatch tiny_calib(const ModelSpec& spec, size_t n, int classes,
                      uint64_t seed) {
  std::vector<int> families;
  for (int f = 0; f < classes; ++f) families.push_back(f);
  Dataset d = generate_shapes(RenderStyle::server, families,
                              (n + classes - 1) / classes, seed,
                              spec.image_size);
  CalibBatch b;
  for (size_t i = 0; i < n; ++i) {
    b.images.push_back(d.images[i]);
    b.labels.push_back(static_cast<int>(d.labels[i]));
  }
  return b;
}

// Loss of the full float model as a function of the output of unit `unit`
// (0 = embedding, u >= 1 = encoder layer u). Used to finite-difference the
// calibration gradients.
double loss_from_unit(VitParams& p, Head& head, const Tensor& x, size_t unit,
                      int label) {
  PlainOps ops;
  Tensor cur = x;
  for (size_t l = unit; l < p.spec.num_layers; ++l)
    cur = encoder_layer_forward(ops, cur, p.layers[l], p.spec);
  cur = ops.layer_norm(cur, ops.param(p.final_ln_gain),
                       ops.param(p.final_ln_bias), p.spec.layernorm_eps);
  Tensor logits = head_forward(ops, ops.take_row(cur, 0), head);
  const std::vector<int> labels{label};
  return cross_entropy_value(logits, labels);
}

// Plain-kernel rebuild of the per-tensor weight objective, written against
// the contract rather than the production helper: fake-quantize one tensor,
// run the unit forward, accumulate sum of grad^2 * (out - ref)^2, average
// over the calibration batch.
double naive_weight_objective(UnitContext& ctx, Param& tensor,
                              const Tensor& float_values, double delta) {
  QuantizedFrontend& qf = *ctx.qf;
  tensor.value = fake_quantize(float_values, delta, qf.bits);
  PlainOps ops;
  double total = 0.0;
  const size_t n = ctx.cal->images.size();
  for (size_t i = 0; i < n; ++i) {
    Tensor out;
    if (ctx.unit == 0)
      out = embed_forward(ops, ctx.cal->images[i], qf.embed, qf.spec);
    else
      out = encoder_layer_forward(ops, ctx.inputs[i], qf.layers[ctx.unit - 1],
                                  qf.spec);
    const Tensor& ref = ctx.cal->refs[i][ctx.unit];
    const Tensor& g = ctx.cal->grads[i][ctx.unit];
    for (size_t j = 0; j < ref.data.size(); ++j) {
      const double d = out.data[j] - ref.data[j];
      total += g.data[j] * g.data[j] * d * d;
    }
  }
  tensor.value = float_values;
  return total / static_cast<double>(n);
}

double naive_activation_objective(UnitContext& ctx, double delta) {
  QuantizedFrontend& qf = *ctx.qf;
  PlainOps ops;
  double total = 0.0;
  const size_t n = ctx.cal->images.size();
  for (size_t i = 0; i < n; ++i) {
    Tensor out;
    if (ctx.unit == 0)
      out = embed_forward(ops, ctx.cal->images[i], qf.embed, qf.spec);
    else
      out = encoder_layer_forward(ops, ctx.inputs[i], qf.layers[ctx.unit - 1],
                                  qf.spec);
    out = fake_quantize(out, delta, qf.bits);
    const Tensor& ref = ctx.cal->refs[i][ctx.unit];
    const Tensor& g = ctx.cal->grads[i][ctx.unit];
    for (size_t j = 0; j < ref.data.size(); ++j) {
      const double d = out.data[j] - ref.data[j];
      total += g.data[j] * g.data[j] * d * d;
    }
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("scalar quantization contract") {
  SECTION("worked values") {
    CHECK(quantize_value(1.0, 0.5, 8) == 2);
    CHECK(quantize_value(100.0, 0.5, 8) == 127);
    CHECK(quantize_value(-100.0, 0.5, 8) == -128);
    CHECK(quantize_value(-0.26, 0.1, 8) == -3);
    CHECK(dequantize_value(2, 0.5) == 1.0);
    CHECK(dequantize_value(-3, 0.1) == -3 * 0.1);
  }
  SECTION("half rounds away from zero") {
    // exact binary fractions, so w / delta is exactly n + 0.5
    CHECK(quantize_value(0.375, 0.25, 8) == 2);    // 1.5 -> 2
    CHECK(quantize_value(-0.375, 0.25, 8) == -2);  // -1.5 -> -2
    CHECK(quantize_value(0.625, 0.25, 8) == 3);    // 2.5 -> 3
    CHECK(quantize_value(-0.625, 0.25, 8) == -3);
  }
  SECTION("narrow widths clamp harder") {
    CHECK(quantize_value(10.0, 0.1, 2) == 1);
    CHECK(quantize_value(-10.0, 0.1, 2) == -2);
    CHECK(quantize_value(10.0, 0.1, 4) == 7);
  }
  SECTION("bad arguments throw") {
    CHECK_THROWS_AS(quantize_value(1.0, 0.0, 8), ArgumentError);
    CHECK_THROWS_AS(quantize_value(1.0, -0.5, 8), ArgumentError);
    CHECK_THROWS_AS(quantize_value(1.0, 0.5, 1), ArgumentError);
    CHECK_THROWS_AS(quantize_value(1.0, 0.5, 9), ArgumentError);
    CHECK_THROWS_AS(dequantize_value(1, 0.0), ArgumentError);
  }
}

TEST_CASE("round trip error is at most half a step inside the clip range") {
  const double delta = 0.03;
  const double lim = 127.0 * delta;
  for (int i = 0; i <= 2000; ++i) {
    const double w = -lim + (2.0 * lim) * static_cast<double>(i) / 2000.0;
    const double wq = dequantize_value(quantize_value(w, delta, 8), delta);
    REQUIRE(std::abs(wq - w) <= delta / 2 + 1e-12);
  }
  // exact multiples of the step come back exactly
  for (int m = -128; m <= 127; ++m) {
    const double w = m * delta;
    REQUIRE(dequantize_value(quantize_value(w, delta, 8), delta) == w);
  }
}

TEST_CASE("tensor codecs share one arithmetic path") {
  Rng rng(7);
  Tensor t = Tensor::zeros(6, 5);
  for (double& v : t.data) v = rng.normal() * 0.3;
  const double delta = 0.004;

  std::vector<int8_t> codes = quantize_tensor(t, delta, 8);
  Tensor back = dequantize_tensor(codes, t.shape, delta);
  Tensor fq = fake_quantize(t, delta, 8);
  REQUIRE(back.shape == t.shape);
  REQUIRE(back.data == fq.data);
  for (size_t i = 0; i < t.data.size(); ++i)
    REQUIRE(back.data[i] ==
            dequantize_value(quantize_value(t.data[i], delta, 8), delta));

  CHECK_THROWS_AS(dequantize_tensor(codes, {7, 5}, delta), DimensionError);
}

TEST_CASE("scale grid covers 0.50 to 1.20 of the max step") {
  const double amax = 3.7;
  std::vector<double> g = scale_grid(amax, 8);
  REQUIRE(g.size() == 36);
  CHECK(g.front() == Catch::Approx(0.50 * amax / 127.0).epsilon(1e-15));
  CHECK(g.back() == Catch::Approx(1.20 * amax / 127.0).epsilon(1e-15));
  for (size_t i = 1; i < g.size(); ++i) REQUIRE(g[i] > g[i - 1]);

  std::vector<double> g4 = scale_grid(amax, 4);
  CHECK(g4.front() == Catch::Approx(0.50 * amax / 7.0).epsilon(1e-15));
}

TEST_CASE("grid search picks the minimum and breaks ties low") {
  std::vector<double> grid{0.1, 0.2, 0.3, 0.4};
  SECTION("unique minimum") {
    double got = search_scale(grid, [](double d) {
      return (d - 0.3) * (d - 0.3);
    });
    CHECK(got == 0.3);
  }
  SECTION("flat objective returns the smallest candidate") {
    double got = search_scale(grid, [](double) { return 5.0; });
    CHECK(got == 0.1);
  }
  SECTION("empty grid throws") {
    CHECK_THROWS_AS(search_scale({}, [](double) { return 0.0; }),
                    ArgumentError);
  }
}

TEST_CASE("reconstruction objective is the gradient-weighted squared error") {
  Tensor ref({1, 2}, {1.0, 2.0});
  Tensor hat({1, 2}, {2.0, 0.0});
  Tensor g({1, 2}, {3.0, 0.5});
  std::vector<Tensor> hats{hat}, refs{ref}, grads{g};
  // 9*1 + 0.25*4 = 10
  CHECK(reconstruction_objective(hats, refs, grads) == Catch::Approx(10.0));

  // second, perfectly matching sample halves the mean
  hats.push_back(ref);
  refs.push_back(ref);
  grads.push_back(g);
  CHECK(reconstruction_objective(hats, refs, grads) == Catch::Approx(5.0));

  std::vector<Tensor> bad{Tensor::zeros(2, 2), Tensor::zeros(2, 2)};
  CHECK_THROWS_AS(reconstruction_objective(bad, refs, grads), DimensionError);
}

TEST_CASE("calibration references and gradients match the float model") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 11);
  Head head = init_head(spec.embed_dim, 3, 12);
  CalibBatch batch = tiny_calib(spec, 3, 3, 13);
  const size_t split = 2;

  CalibrationData cal =
      build_calibration(model, head, split, batch.images, batch.labels);
  REQUIRE(cal.refs.size() == 3);
  REQUIRE(cal.refs[0].size() == split + 1);

  SECTION("references are the plain forward activations") {
    for (size_t i = 0; i < batch.images.size(); ++i) {
      PlainOps ops;
      Tensor x = embed_forward(ops, batch.images[i], model.embed, spec);
      REQUIRE(cal.refs[i][0].data == x.data);
      for (size_t u = 1; u <= split; ++u) {
        x = encoder_layer_forward(ops, x, model.layers[u - 1], spec);
        REQUIRE(cal.refs[i][u].data == x.data);
      }
    }
  }

  SECTION("gradients agree with finite differences of the tail loss") {
    Rng rng(99);
    const double h = 1e-5;
    for (size_t unit : {size_t{1}, split}) {
      const Tensor& ref = cal.refs[0][unit];
      const Tensor& grad = cal.grads[0][unit];
      for (int probe = 0; probe < 5; ++probe) {
        const size_t j = rng.index(ref.data.size());
        Tensor xp = ref, xm = ref;
        xp.data[j] += h;
        xm.data[j] -= h;
        const double fd = (loss_from_unit(model, head, xp, unit,
                                          batch.labels[0]) -
                           loss_from_unit(model, head, xm, unit,
                                          batch.labels[0])) /
                          (2 * h);
        const double ana = grad.data[j];
        if (std::abs(ana - fd) > 1e-8)
          REQUIRE(std::abs(ana - fd) / std::max(std::abs(ana), std::abs(fd)) <
                  1e-4);
      }
    }
  }
}

TEST_CASE("weights on an exact power-of-two step quantize losslessly at beta 1") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 21);
  Head head = init_head(spec.embed_dim, 3, 22);
  const size_t split = 2;
  const double q = 0.0078125;  // 2^-7: products and quotients stay exact

  // rebuild the embedding tensors on the grid {m*q : |m| <= 127}, with the
  // extreme code present so any scale below q clips it
  Rng rng(23);
  for (Param* p : {&model.embed.patch_embed, &model.embed.pos_encoding,
                   &model.embed.cls_token}) {
    for (double& v : p->value.data) {
      const int m = static_cast<int>(rng.index(255)) - 127;
      v = m * q;
    }
    p->value.data[0] = 127 * q;
    p->value.data[1] = -127 * q;
  }

  CalibBatch batch = tiny_calib(spec, 4, 3, 24);

  struct Seen {
    const Param* tensor;
    double chosen;
    double objective_at_chosen;
  };
  std::vector<Seen> seen;
  SearchTrace trace;
  trace.on_weight = [&](UnitContext& ctx, Param& t, const Tensor& floats,
                        const std::vector<double>&, double chosen) {
    if (ctx.unit != 0) return;
    seen.push_back({&t, chosen, naive_weight_objective(ctx, t, floats, chosen)});
  };

  QuantizedFrontend qf = quantize_frontend(model, head, split, 8, batch.images,
                                           batch.labels, &trace);

  REQUIRE(seen.size() == 3);
  for (const Seen& s : seen) {
    CHECK(s.chosen == q);
    CHECK(s.objective_at_chosen == 0.0);
  }
  // committed working values reproduce the originals bit for bit
  REQUIRE(qf.embed.patch_embed.value.data == model.embed.patch_embed.value.data);
  REQUIRE(qf.embed.pos_encoding.value.data == model.embed.pos_encoding.value.data);
  REQUIRE(qf.embed.cls_token.value.data == model.embed.cls_token.value.data);
}

TEST_CASE("zero gradients make every scale equal and the smallest wins") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 31);
  CalibBatch batch = tiny_calib(spec, 2, 3, 32);

  QuantizedFrontend qf;
  qf.spec = spec;
  qf.split = 2;
  qf.bits = 8;
  qf.embed.patch_embed = Param(model.embed.patch_embed.value);
  qf.embed.pos_encoding = Param(model.embed.pos_encoding.value);
  qf.embed.cls_token = Param(model.embed.cls_token.value);
  for (size_t l = 0; l < 2; ++l) qf.layers.push_back(model.layers[l]);
  qf.act_scales.assign(2, 0.0);

  CalibrationData cal;
  cal.images = batch.images;
  cal.labels = batch.labels;
  for (const Tensor& img : batch.images) {
    PlainOps ops;
    Tensor e = embed_forward(ops, img, model.embed, spec);
    Tensor z = Tensor::zeros(e.rows(), e.cols());
    cal.refs.push_back({e});
    cal.grads.push_back({z});
  }

  UnitContext ctx = build_unit_context(qf, cal, 0);
  Param& t = qf.embed.patch_embed;
  const Tensor floats = t.value;
  std::vector<double> grid = scale_grid(max_abs(floats), 8);
  for (double d : grid)
    REQUIRE(unit_objective_weight(ctx, t, floats, d) == 0.0);
  const double chosen = search_scale(grid, [&](double d) {
    return unit_objective_weight(ctx, t, floats, d);
  });
  CHECK(chosen == grid.front());
}

TEST_CASE("production search is grid-optimal against a rebuilt objective") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 41);
  Head head = init_head(spec.embed_dim, 3, 42);
  CalibBatch batch = tiny_calib(spec, 4, 3, 43);
  const size_t split = 2;

  size_t weight_events = 0, act_events = 0;
  SearchTrace trace;
  trace.on_weight = [&](UnitContext& ctx, Param& t, const Tensor& floats,
                        const std::vector<double>& grid, double chosen) {
    ++weight_events;
    double best = 0.0, best_delta = 0.0;
    bool first = true;
    for (double d : grid) {
      const double obj = naive_weight_objective(ctx, t, floats, d);
      if (first || obj < best) {
        best = obj;
        best_delta = d;
        first = false;
      }
    }
    REQUIRE(chosen == best_delta);
  };
  trace.on_activation = [&](UnitContext& ctx, const std::vector<double>& grid,
                            double chosen) {
    ++act_events;
    double best = 0.0, best_delta = 0.0;
    bool first = true;
    for (double d : grid) {
      const double obj = naive_activation_objective(ctx, d);
      if (first || obj < best) {
        best = obj;
        best_delta = d;
        first = false;
      }
    }
    REQUIRE(chosen == best_delta);
  };

  quantize_frontend(model, head, split, 8, batch.images, batch.labels, &trace);
  // 3 embedding tensors plus the nonzero layer tensors (biases start at zero
  // and are committed without a search)
  CHECK(weight_events == 3 + 8 * split);
  CHECK(act_events == split);
}

TEST_CASE("frontend quantization is deterministic") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 51);
  Head head = init_head(spec.embed_dim, 3, 52);
  CalibBatch batch = tiny_calib(spec, 4, 3, 53);

  VitParams model2 = init_vit(spec, 51);
  Head head2 = init_head(spec.embed_dim, 3, 52);

  QuantizedFrontend a =
      quantize_frontend(model, head, 2, 8, batch.images, batch.labels);
  QuantizedFrontend b =
      quantize_frontend(model2, head2, 2, 8, batch.images, batch.labels);

  std::vector<uint8_t> ea = encode_quantized_frontend(a);
  std::vector<uint8_t> eb = encode_quantized_frontend(b);
  REQUIRE(ea.size() == eb.size());
  REQUIRE(std::memcmp(ea.data(), eb.data(), ea.size()) == 0);
}

TEST_CASE("frontend package round trip preserves the forward bit for bit") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 61);
  Head head = init_head(spec.embed_dim, 3, 62);
  CalibBatch batch = tiny_calib(spec, 4, 3, 63);

  QuantizedFrontend qf =
      quantize_frontend(model, head, 2, 8, batch.images, batch.labels);
  std::vector<uint8_t> bytes = encode_quantized_frontend(qf);
  QuantizedFrontend back = decode_quantized_frontend(bytes);

  REQUIRE(back.spec == qf.spec);
  REQUIRE(back.split == qf.split);
  REQUIRE(back.bits == qf.bits);
  REQUIRE(back.model_hash == qf.model_hash);
  REQUIRE(back.codes == qf.codes);
  REQUIRE(back.weight_scales == qf.weight_scales);
  REQUIRE(back.act_scales == qf.act_scales);

  CalibBatch probe = tiny_calib(spec, 3, 3, 64);
  for (const Tensor& img : probe.images) {
    Tensor y1 = quantized_frontend_forward(qf, img);
    Tensor y2 = quantized_frontend_forward(back, img);
    REQUIRE(y1.data == y2.data);
  }

  SECTION("corrupted packages are rejected") {
    std::vector<uint8_t> bad = bytes;
    bad[0] ^= 0xFF;
    CHECK_THROWS_AS(decode_quantized_frontend(bad), DecodeError);

    std::vector<uint8_t> cut(bytes.begin(), bytes.begin() + bytes.size() / 2);
    CHECK_THROWS_AS(decode_quantized_frontend(cut), DecodeError);

    std::vector<uint8_t> extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(decode_quantized_frontend(extra), FormatError);
  }
}

TEST_CASE("quantized forward applies the committed activation scales") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 71);
  Head head = init_head(spec.embed_dim, 3, 72);
  CalibBatch batch = tiny_calib(spec, 4, 3, 73);

  QuantizedFrontend qf =
      quantize_frontend(model, head, 2, 8, batch.images, batch.labels);
  for (double d : qf.act_scales) REQUIRE(d > 0.0);

  PlainOps ops;
  Tensor x = embed_forward(ops, batch.images[0], qf.embed, spec);
  for (size_t l = 0; l < qf.split; ++l) {
    x = encoder_layer_forward(ops, x, qf.layers[l], spec);
    x = fake_quantize(x, qf.act_scales[l], qf.bits);
  }
  Tensor y = quantized_frontend_forward(qf, batch.images[0]);
  REQUIRE(x.data == y.data);
}

TEST_CASE("two bits lose more signal than eight") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 81);
  Head head = init_head(spec.embed_dim, 3, 82);
  CalibBatch batch = tiny_calib(spec, 4, 3, 83);
  const size_t split = 2;

  QuantizedFrontend q8 =
      quantize_frontend(model, head, split, 8, batch.images, batch.labels);
  QuantizedFrontend q2 =
      quantize_frontend(model, head, split, 2, batch.images, batch.labels);

  CalibBatch probe = tiny_calib(spec, 6, 3, 84);
  double err8 = 0.0, err2 = 0.0;
  for (const Tensor& img : probe.images) {
    Tensor ref = vit_frontend(model, split, img);
    Tensor y8 = quantized_frontend_forward(q8, img);
    Tensor y2 = quantized_frontend_forward(q2, img);
    for (size_t j = 0; j < ref.data.size(); ++j) {
      err8 += std::abs(y8.data[j] - ref.data[j]);
      err2 += std::abs(y2.data[j] - ref.data[j]);
    }
  }
  CHECK(err2 > err8);
  CHECK(err8 > 0.0);
}

TEST_CASE("representation codec stays within half a step") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 91);
  CalibBatch batch = tiny_calib(spec, 1, 3, 92);
  Tensor rep = vit_frontend(model, 2, batch.images[0]);

  const double delta = max_abs(rep) / 127.0;
  std::vector<int8_t> codes = rep_to_codes(rep, delta, 8);
  Tensor back = codes_to_rep(codes, spec, delta);
  REQUIRE(back.shape == rep.shape);
  for (size_t j = 0; j < rep.data.size(); ++j)
    REQUIRE(std::abs(back.data[j] - rep.data[j]) <= delta / 2 + 1e-12);
}

TEST_CASE("quantize_frontend validates its arguments") {
  ModelSpec spec = tiny_spec();
  VitParams model = init_vit(spec, 95);
  Head head = init_head(spec.embed_dim, 3, 96);
  CalibBatch batch = tiny_calib(spec, 2, 3, 97);

  CHECK_THROWS_AS(
      quantize_frontend(model, head, 1, 8, batch.images, batch.labels),
      ConfigError);  // 2*1 <= 3
  CHECK_THROWS_AS(
      quantize_frontend(model, head, 3, 8, batch.images, batch.labels),
      ConfigError);  // split == L
  CHECK_THROWS_AS(
      quantize_frontend(model, head, 2, 1, batch.images, batch.labels),
      ArgumentError);
  std::vector<Tensor> none;
  std::vector<int> no_labels;
  CHECK_THROWS_AS(quantize_frontend(model, head, 2, 8, none, no_labels),
                  ArgumentError);
}
