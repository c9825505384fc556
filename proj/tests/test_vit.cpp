#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fd_check.hpp"
#include "sa/rng.hpp"
#include "sa/vit.hpp"

using namespace sa;
using sa::testing::fd_check_sampled;

namespace {

ModelSpec toy_spec() { return ModelSpec{}; }  // 16x16, P=4, d=32, h=4, L=6

ModelSpec tiny_spec() {
  ModelSpec s;
  s.image_size = 8;
  s.patch_size = 4;  // N = 4
  s.embed_dim = 8;
  s.num_heads = 2;
  s.mlp_hidden = 16;
  s.num_layers = 3;
  return s;
}

Tensor random_image(Rng& rng, const ModelSpec& spec) {
  Tensor t = Tensor::zeros({spec.image_size, spec.image_size, spec.channels});
  for (double& v : t.data) v = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("model spec validation") {
  ModelSpec s = toy_spec();
  REQUIRE_NOTHROW(s.validate());
  REQUIRE(s.num_patches() == 16);
  REQUIRE(s.tokens() == 17);
  REQUIRE(s.head_dim() == 8);

  s.patch_size = 5;
  REQUIRE_THROWS_AS(s.validate(), ConfigError);
  s = toy_spec();
  s.num_heads = 5;
  REQUIRE_THROWS_AS(s.validate(), ConfigError);
  s = toy_spec();
  s.num_layers = 2;
  REQUIRE_THROWS_AS(s.validate(), ConfigError);

  // L/2 < K < L
  s = toy_spec();
  REQUIRE(!s.valid_split(3));
  REQUIRE(s.valid_split(4));
  REQUIRE(s.valid_split(5));
  REQUIRE(!s.valid_split(6));
}

TEST_CASE("patchify index arithmetic") {
  ModelSpec s;
  s.image_size = 4;
  s.patch_size = 2;  // N = 4
  s.embed_dim = 8;
  s.num_heads = 2;
  s.mlp_hidden = 8;
  s.num_layers = 3;
  Tensor img = Tensor::zeros({4, 4, 1});
  for (size_t i = 0; i < 16; ++i) img.data[i] = static_cast<double>(i);
  Tensor patches = patchify(img, s);
  REQUIRE(patches.rows() == 4);
  REQUIRE(patches.cols() == 4);
  // patch 3 covers pixels (2..3, 2..3): values 10, 11, 14, 15
  REQUIRE(patches.at(3, 0) == 10.0);
  REQUIRE(patches.at(3, 1) == 11.0);
  REQUIRE(patches.at(3, 2) == 14.0);
  REQUIRE(patches.at(3, 3) == 15.0);

  Tensor wrong = Tensor::zeros({5, 4, 1});
  REQUIRE_THROWS_AS(patchify(wrong, s), DimensionError);
}

TEST_CASE("embedding layout") {
  ModelSpec s = tiny_spec();
  VitParams p = init_vit(s, 3);

  SECTION("zero image leaves cls plus positions") {
    // zero the patch projection contribution by zeroing the image
    Tensor img = Tensor::zeros({8, 8, 1});
    PlainOps ops;
    Tensor x0 = embed_forward(ops, img, p.embed, s);
    for (size_t j = 0; j < s.embed_dim; ++j)
      REQUIRE(x0.at(0, j) == p.embed.cls_token.value.data[j] +
                                 p.embed.pos_encoding.value.at(0, j));
    for (size_t r = 1; r < s.tokens(); ++r)
      for (size_t j = 0; j < s.embed_dim; ++j)
        REQUIRE(x0.at(r, j) == p.embed.pos_encoding.value.at(r, j));
  }
  SECTION("all zero parameters and image give zero embedding") {
    VitParams z = init_vit(s, 0);
    for (Param* t : z.all_params())
      std::fill(t->value.data.begin(), t->value.data.end(), 0.0);
    Tensor img = Tensor::zeros({8, 8, 1});
    PlainOps ops;
    Tensor x0 = embed_forward(ops, img, z.embed, s);
    for (double v : x0.data) REQUIRE(v == 0.0);
  }
}

TEST_CASE("token-constant input stays token-constant through a layer") {
  // all rows equal -> attention is a convex combination of identical rows
  ModelSpec s = tiny_spec();
  VitParams p = init_vit(s, 11);
  Rng rng(4);
  Tensor x = Tensor::zeros(s.tokens(), s.embed_dim);
  for (size_t j = 0; j < s.embed_dim; ++j) {
    const double v = rng.normal();
    for (size_t r = 0; r < s.tokens(); ++r) x.at(r, j) = v;
  }
  PlainOps ops;
  Tensor y = encoder_layer_forward(ops, x, p.layers[0], s);
  for (size_t r = 1; r < y.rows(); ++r)
    for (size_t j = 0; j < y.cols(); ++j)
      REQUIRE(std::abs(y.at(r, j) - y.at(0, j)) < 1e-12);
}

TEST_CASE("attention scores are row-normalized convex weights") {
  ModelSpec s = toy_spec();
  VitParams p = init_vit(s, 21);
  Rng rng(9);
  Tensor x = sa::testing::random_tensor(rng, s.tokens(), s.embed_dim);
  Tensor q = matmul(x, p.layers[2].w_q.value);
  Tensor k = matmul(x, p.layers[2].w_k.value);
  const size_t dh = s.head_dim();
  for (size_t h = 0; h < s.num_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor a = softmax_rows(
        scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh))));
    for (size_t i = 0; i < a.rows(); ++i) {
      double sum = 0.0;
      for (size_t j = 0; j < a.cols(); ++j) sum += a.at(i, j);
      REQUIRE(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("patch permutation equivariance with zero positions") {
  ModelSpec s = toy_spec();
  VitParams p = init_vit(s, 31);
  std::fill(p.embed.pos_encoding.value.data.begin(),
            p.embed.pos_encoding.value.data.end(), 0.0);
  Rng rng(12);
  Tensor img = random_image(rng, s);

  // permute patch blocks in pixel space
  std::vector<size_t> perm = rng.permutation(s.num_patches());
  Tensor img_p = img;
  const size_t g = s.grid(), ps = s.patch_size, hw = s.image_size;
  for (size_t j = 0; j < perm.size(); ++j) {
    const size_t sy = (perm[j] / g) * ps, sx = (perm[j] % g) * ps;
    const size_t dy = (j / g) * ps, dx = (j % g) * ps;
    for (size_t y = 0; y < ps; ++y)
      for (size_t x = 0; x < ps; ++x)
        img_p.data[(dy + y) * hw + (dx + x)] =
            img.data[(sy + y) * hw + (sx + x)];
  }

  Tensor out = vit_full(p, img);
  Tensor out_p = vit_full(p, img_p);
  for (size_t j = 0; j < s.embed_dim; ++j)
    REQUIRE(std::abs(out_p.at(0, j) - out.at(0, j)) <= 1e-10);
  for (size_t r = 0; r < perm.size(); ++r)
    for (size_t j = 0; j < s.embed_dim; ++j)
      REQUIRE(std::abs(out_p.at(1 + r, j) - out.at(1 + perm[r], j)) <= 1e-10);
}

TEST_CASE("split composition is bitwise identical to the full forward") {
  ModelSpec s = toy_spec();
  VitParams p = init_vit(s, 41);
  Rng rng(13);
  for (size_t split : {4, 5}) {
    REQUIRE(s.valid_split(split));
    for (int i = 0; i < 20; ++i) {
      Tensor img = random_image(rng, s);
      Tensor composed = vit_backend(p, split, vit_frontend(p, split, img));
      Tensor full = vit_full(p, img);
      REQUIRE(composed.data == full.data);
    }
  }
}

TEST_CASE("graph forward equals plain forward bitwise") {
  ModelSpec s = tiny_spec();
  VitParams p = init_vit(s, 51);
  Head head = init_head(s.embed_dim, 5, 52);
  Rng rng(14);
  std::vector<Tensor> batch{random_image(rng, s), random_image(rng, s)};

  Tensor plain = model_logits_batch(p, head, batch);
  Graph g;
  Var logits = vit_logits_graph(g, p, head, batch);
  REQUIRE(g.value(logits).data == plain.data);

  // backend-only graph path composes with the plain frontend identically
  const size_t split = 2;
  std::vector<Tensor> reps;
  for (const Tensor& img : batch)
    reps.push_back(vit_frontend(p, split, img));
  Graph g2;
  Var logits2 = backend_logits_graph(g2, p, split, head, reps);
  PlainOps pops;
  Tensor via_backend =
      head_forward(pops, backend_cls_batch(p, split, reps), head);
  REQUIRE(g2.value(logits2).data == via_backend.data);
}

TEST_CASE("full model gradients match finite differences") {
  ModelSpec s = tiny_spec();
  VitParams p = init_vit(s, 61);
  Head head = init_head(s.embed_dim, 3, 62);
  Rng rng(15);
  std::vector<Tensor> batch{random_image(rng, s), random_image(rng, s)};
  std::vector<int> labels{2, 0};

  std::vector<Param*> params = p.all_params();
  std::vector<Param*> hp = head.all_params();
  params.insert(params.end(), hp.begin(), hp.end());

  Rng pick(16);
  auto rep = fd_check_sampled(
      [&](Graph& g) {
        return g.cross_entropy(vit_logits_graph(g, p, head, batch), labels);
      },
      params, pick, 2);
  REQUIRE(rep.checked >= 2 * params.size());
  REQUIRE(rep.max_rel_err <= 1e-4);
}

TEST_CASE("initialization is deterministic and shaped") {
  ModelSpec s = toy_spec();
  VitParams a = init_vit(s, 7);
  VitParams b = init_vit(s, 7);
  REQUIRE(encode_vit(a) == encode_vit(b));
  VitParams c = init_vit(s, 8);
  REQUIRE(encode_vit(a) != encode_vit(c));

  REQUIRE(a.embed.patch_embed.value.rows() == s.patch_dim());
  REQUIRE(a.embed.pos_encoding.value.rows() == s.tokens());
  REQUIRE(a.layers.size() == s.num_layers);
  // biases zero, LN gains one
  for (double v : a.layers[0].b1.value.data) REQUIRE(v == 0.0);
  for (double v : a.layers[0].ln1_gain.value.data) REQUIRE(v == 1.0);
  // truncated normal: bounded by 2 sigma
  for (double v : a.embed.patch_embed.value.data)
    REQUIRE(std::abs(v) <= 0.04 + 1e-12);
}

TEST_CASE("checkpoint round trip is bitwise exact") {
  ModelSpec s = tiny_spec();
  VitParams p = init_vit(s, 71);
  std::vector<uint8_t> bytes = encode_vit(p);
  VitParams back = decode_vit(bytes);
  REQUIRE(back.spec == p.spec);
  REQUIRE(encode_vit(back) == bytes);

  SECTION("corruption is rejected") {
    std::vector<uint8_t> t = bytes;
    t[1] = 'X';
    REQUIRE_THROWS_AS(decode_vit(t), DecodeError);
    t = bytes;
    t.resize(t.size() - 3);
    REQUIRE_THROWS_AS(decode_vit(t), Error);
    t = bytes;
    t.push_back(0);
    REQUIRE_THROWS_AS(decode_vit(t), FormatError);
  }
}

TEST_CASE("head shapes and serialization") {
  Head narrow = init_head(32, 4, 9);
  REQUIRE(narrow.w1.value.rows() == 32);
  REQUIRE(narrow.w1.value.cols() == 4);
  Head wide = init_head(32, 4, 9, true);
  REQUIRE(wide.w1.value.cols() == 32);
  REQUIRE(wide.w2.value.cols() == 4);

  Rng rng(10);
  Tensor cls = sa::testing::random_tensor(rng, 3, 32);
  PlainOps ops;
  Tensor ln = head_forward(ops, cls, narrow);
  REQUIRE(ln.rows() == 3);
  REQUIRE(ln.cols() == 4);
  Tensor lw = head_forward(ops, cls, wide);
  REQUIRE(lw.cols() == 4);

  std::vector<uint8_t> bytes = encode_head(wide);
  Head back = decode_head(bytes);
  REQUIRE(encode_head(back) == bytes);
}

TEST_CASE("argmax prefers the lowest index on ties") {
  Tensor logits({1, 4}, {0.5, 2.0, 2.0, 1.0});
  REQUIRE(argmax_row(logits) == 1);
  Tensor flat({1, 3}, {7.0, 7.0, 7.0});
  REQUIRE(argmax_row(flat) == 0);
}
